"""Process entry points: the episode wire protocol server (JSON lines over a
TCP socket or standard streams) and the command-line interface.

Protocol version 1, one JSON object per line:
  request  {"cmd": "info"} | {"cmd": "reset", "seed": int, "split": "train"}
           | {"cmd": "step", "action": 0..3} | {"cmd": "close"}
  response {"proto", "grid", "actions", "vocab_size"} for info;
           {"frame": base64 RGB bytes, "tokens", "text", "reward", "done",
            "success", "step_count"} for reset/step; {"closed": true} for
           close; {"error": message} on any failure (the session survives).
Each connection owns a private environment; sessions are independent.
"""
from __future__ import annotations

import argparse
import base64
import json
import os
import socketserver
import sys

import numpy as np

from . import a3c, langgen, nn, presets, probes, render, world
from .agent import Agent, AgentConfig
from .world import ScenarioConfig

PROTO_VERSION = 1


class Session:
    """Sequential protocol session over one environment."""

    def __init__(self, scenario: ScenarioConfig):
        self.scenario = scenario
        self.vocab = langgen.vocab_for_config(scenario)
        self.state = None
        self.instr = None

    def handle_line(self, line: str) -> dict | None:
        """Returns the response document, or None when the session should end."""
        try:
            msg = json.loads(line)
        except json.JSONDecodeError as exc:
            return {"error": f"malformed JSON: {exc.msg}"}
        if not isinstance(msg, dict) or "cmd" not in msg:
            return {"error": "request must be an object with a 'cmd' field"}
        cmd = msg["cmd"]
        try:
            if cmd == "info":
                return {
                    "proto": PROTO_VERSION,
                    "grid": list(self.scenario.grid_dims),
                    "actions": len(world.Action),
                    "vocab_size": self.vocab.size,
                }
            if cmd == "reset":
                seed = msg.get("seed", self.scenario.rng_seed)
                split = msg.get("split", "train")
                if not isinstance(seed, int):
                    return {"error": "seed must be an integer"}
                self.state, self.instr = world.reset(self.scenario, seed, split)
                return self._observation(reward=0.0)
            if cmd == "step":
                if self.state is None:
                    return {"error": "step before reset"}
                if self.state.done:
                    return {"error": "episode is done; reset required"}
                action = msg.get("action")
                if not isinstance(action, int) or not 0 <= action < len(world.Action):
                    return {"error": f"action must be an integer in [0, {len(world.Action) - 1}]"}
                self.state, res = world.step(self.state, world.Action(action))
                return self._observation(reward=res.reward)
            if cmd == "close":
                return None
            return {"error": f"unknown cmd {cmd!r}"}
        except (world.ScenarioError, world.PlacementError, ValueError) as exc:
            return {"error": str(exc)}

    def _observation(self, reward: float) -> dict:
        frame = render.observe(self.state)
        return {
            "frame": base64.b64encode(frame.tobytes()).decode(),
            "tokens": list(self.instr.tokens),
            "text": self.instr.text,
            "reward": reward,
            "done": self.state.done,
            "success": self.state.success,
            "step_count": self.state.step_count,
        }


def _encode(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def serve(scenario: ScenarioConfig, host: str = "127.0.0.1", port: int = 0,
          stdio: bool = False, ready_cb=None) -> None:
    """Serve sessions over standard streams (one session) or TCP (one session
    per connection, concurrent connections independent)."""
    if stdio:
        out = sys.stdout
        session = Session(scenario)
        for line in sys.stdin:
            if not line.strip():
                continue
            doc = session.handle_line(line)
            if doc is None:
                out.write(_encode({"closed": True}) + "\n")
                out.flush()
                break
            out.write(_encode(doc) + "\n")
            out.flush()
        return

    class Handler(socketserver.StreamRequestHandler):
        def handle(self):
            session = Session(scenario)
            for raw in self.rfile:
                line = raw.decode()
                if not line.strip():
                    continue
                doc = session.handle_line(line)
                if doc is None:
                    self.wfile.write((_encode({"closed": True}) + "\n").encode())
                    break
                self.wfile.write((_encode(doc) + "\n").encode())

    class Server(socketserver.ThreadingTCPServer):
        allow_reuse_address = True
        daemon_threads = True

    with Server((host, port), Handler) as server:
        actual = server.server_address
        sys.stderr.write(f"serving on {actual[0]}:{actual[1]}\n")
        sys.stderr.flush()
        if ready_cb is not None:
            ready_cb(server)
        server.serve_forever()


# ---------------- CLI ----------------

def _load_scenario_arg(args) -> ScenarioConfig:
    if getattr(args, "scenario", None):
        with open(args.scenario) as fh:
            return world.load_scenario(fh.read())
    return presets.PRESETS[getattr(args, "preset", "default")]()


def _cmd_gen_scenario(args) -> int:
    config = presets.PRESETS[args.preset]()
    text = world.scenario_to_json(config)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return 0


def _cmd_train(args) -> int:
    scenario = _load_scenario_arg(args)
    agent_cfg = AgentConfig(fusion_kind=args.fusion, n_attention_maps=args.n_maps,
                            activation=args.activation)
    cfg = a3c.TrainConfig(
        workers=args.workers, max_env_steps=args.steps, seed=args.seed,
        base_lr=args.lr, entropy_coef=args.entropy, discount=args.discount,
        gae_lambda=args.gae_lambda, rollout_len=args.rollout,
        sync=args.sync, target_success=args.target_success,
        time_limit_s=args.time_limit,
    )
    result = a3c.train(scenario, agent_cfg, cfg, args.out)
    print(json.dumps({
        "checkpoint": result.checkpoint_path, "csv": result.csv_path,
        "env_steps": result.env_steps, "episodes": result.episodes,
        "stop_reason": result.stop_reason,
    }, sort_keys=True))
    return 0


def _cmd_eval(args) -> int:
    agent, params, scenario, _ = a3c.load_agent_checkpoint(args.checkpoint)
    report = a3c.evaluate(agent, params, scenario, args.mode, args.episodes, args.seed)
    print(report.to_json())
    return 0


def _cmd_serve(args) -> int:
    scenario = _load_scenario_arg(args)
    serve(scenario, host=args.host, port=args.port, stdio=args.stdio)
    return 0


def _cmd_export_frames(args) -> int:
    agent, params, scenario, _ = a3c.load_agent_checkpoint(args.checkpoint)
    os.makedirs(args.out, exist_ok=True)
    state, instr = world.reset(scenario, args.seed, args.split)
    ctx = agent.make_context(params, instr.tokens)
    lstm = agent.initial_state(params.dtype)
    print(f"instruction: {instr.text}")
    step = 0
    while True:
        frame = render.observe(state)
        render.save_png(frame, os.path.join(args.out, f"step{step:03d}.png"))
        out, _ = agent.act(params, frame, ctx, lstm)
        if out.attention_maps is not None:
            maps = out.attention_maps
            for j in range(maps.shape[-1]):
                render.attention_to_png(
                    maps[:, :, j],
                    os.path.join(args.out, f"step{step:03d}_att{j}.png"),
                )
        if state.done or step >= scenario.max_episode_len:
            break
        lstm = out.state
        state, _ = world.step(state, world.Action(int(np.argmax(out.policy_logits))))
        step += 1
    print(f"wrote {step + 1} frames to {args.out}")
    return 0


def _parse_expression(terms: list[str]) -> list[tuple[int, str]]:
    out = []
    for term in terms:
        term = term.strip()
        sign = 1
        if term.startswith("+"):
            term = term[1:]
        elif term.startswith("-"):
            sign = -1
            term = term[1:]
        out.append((sign, term.strip().lower()))
    return out


def _cmd_probe(args) -> int:
    agent, params, scenario, _ = a3c.load_agent_checkpoint(args.checkpoint)
    vocab = langgen.vocab_for_config(scenario)
    if args.probe == "pca":
        texts = args.instructions or _all_direct_texts(scenario)
        matrix = probes.embed_instructions(agent, params, vocab, texts)
        csv = probes.pca_csv(matrix)
        _write_or_print(args.out, csv)
        return 0
    if args.probe == "analogy":
        pairs = [tuple(p.split("|")) for p in args.pairs]
        cos = probes.analogy_parallelism(agent, params, vocab, pairs)
        print(json.dumps({
            "pairs": args.pairs,
            "cosines": [[None if np.isnan(c) else round(float(c), 6) for c in row]
                        for row in cos],
            "mean_offdiag": probes.mean_offdiag_cosine(cos),
        }, sort_keys=True))
        return 0
    if args.probe == "compose":
        expression = _parse_expression(args.expr)
        target = langgen.parse_direct_phrase(args.target)
        report = probes.compose_and_navigate(
            agent, params, scenario, expression, target,
            episodes=args.episodes, seed=args.seed,
        )
        print(report.to_json())
        return 0
    raise AssertionError(args.probe)


def _cmd_translate(args) -> int:
    params, meta = nn.load_checkpoint(args.checkpoint)
    scenario = world.load_scenario(json.dumps(meta["scenario"]))
    agent_cfg = AgentConfig(**_agent_cfg_from_meta(meta))
    agent = Agent(agent_cfg, meta["vocab_size"])
    pair = probes.decoder_pair_for(scenario, agent_cfg.gru_hidden)
    vocab = langgen.vocab_for_config(scenario)
    out = probes.translate(args.text.lower(), args.src, args.dst, agent, params,
                           pair, vocab)
    print(out)
    return 0


def _agent_cfg_from_meta(meta) -> dict:
    return {
        k: tuple(tuple(x) if isinstance(x, list) else x for x in v) if isinstance(v, list) else v
        for k, v in meta["agent_config"].items()
    }


def _all_direct_texts(scenario: ScenarioConfig) -> list[str]:
    texts = []
    for entry in scenario.catalog:
        texts.append(f"go to {entry.kind}")
        for color in entry.colors:
            texts.append(f"go to {color} {entry.kind}")
    return texts


def _write_or_print(path, text) -> None:
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="langnav",
                                     description="grid-world language grounding")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scenario", help="emit a scenario JSON document")
    p.add_argument("--preset", choices=sorted(presets.PRESETS), default="default")
    p.add_argument("--out")
    p.set_defaults(fn=_cmd_gen_scenario)

    p = sub.add_parser("train", help="train an agent")
    p.add_argument("--scenario", help="scenario JSON path")
    p.add_argument("--preset", choices=sorted(presets.PRESETS), default="default")
    p.add_argument("--out", required=True)
    p.add_argument("--fusion", choices=["attn", "netattn", "hadamard", "concat"],
                   default="attn")
    p.add_argument("--n-maps", type=int, default=5)
    p.add_argument("--activation", choices=["prelu", "relu"], default="prelu")
    p.add_argument("--workers", type=int, default=32)
    p.add_argument("--steps", type=int, default=1_000_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--entropy", type=float, default=0.01)
    p.add_argument("--discount", type=float, default=0.99)
    p.add_argument("--gae-lambda", type=float, default=0.95)
    p.add_argument("--rollout", type=int, default=20)
    p.add_argument("--sync", action="store_true")
    p.add_argument("--target-success", type=float)
    p.add_argument("--time-limit", type=float)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=["US", "ZS", "us", "zs"], default="US",
                   type=lambda s: s.upper())
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("serve", help="serve the episode wire protocol")
    p.add_argument("--scenario")
    p.add_argument("--preset", choices=sorted(presets.PRESETS), default="default")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--stdio", action="store_true",
                   help="single session over stdin/stdout")
    p.set_defaults(fn=_cmd_serve)

    p = sub.add_parser("export-frames", help="per-step PNG frames and attention maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", choices=["train", "zero_shot"], default="train")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_export_frames)

    p = sub.add_parser("probe", help="embedding-geometry probes")
    p.add_argument("probe", choices=["pca", "analogy", "compose"])
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--instructions", nargs="*")
    p.add_argument("--pairs", nargs="*", default=[],
                   help="analogy pairs as 'text a|text b'")
    p.add_argument("--expr", nargs="*", default=[],
                   help="signed composition terms, e.g. '+go to tree'")
    p.add_argument("--target", default="")
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(fn=_cmd_probe)

    p = sub.add_parser("translate", help="dual-decoder translation")
    p.add_argument("--checkpoint", required=True,
                   help="checkpoint produced by translation training")
    p.add_argument("--text", required=True)
    p.add_argument("--src", choices=["en", "fr"], required=True)
    p.add_argument("--dst", choices=["en", "fr"], required=True)
    p.set_defaults(fn=_cmd_translate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (world.ScenarioError, world.PlacementError, langgen.GrammarError,
            nn.CheckpointError, a3c.TrainingError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
