"""Full agent network: CNN encoder, GRU instruction encoder, a selectable
fusion mechanism, post-fusion convolutions (or the concat bridge), LSTM core,
and policy/value heads.

The acting path runs one frame at a time and caches per-step pre-activations;
`backward_rollout` then backpropagates a whole rollout segment with the time
axis batched, which keeps the training loop fast without an autodiff graph.
Instruction embeddings are computed once per episode and shared by all steps.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fusion, nn
from .langgen import one_hot

FUSION_KINDS = ("attn", "netattn", "hadamard", "concat")


@dataclass(frozen=True)
class AgentConfig:
    fusion_kind: str = "attn"
    n_attention_maps: int = 5
    activation: str = "prelu"  # prelu | relu
    frame_hw: int = 84
    conv_specs: tuple[tuple[int, int, int], ...] = (
        (32, 5, 2),
        (32, 5, 2),
        (64, 4, 1),
        (64, 3, 2),
    )  # (filters, kernel, stride)
    post_conv_specs: tuple[tuple[int, int, int], ...] = ((64, 3, 1), (64, 3, 1))
    gru_hidden: int = 16
    lstm_hidden: int = 32
    concat_text_dim: int = 64
    n_actions: int = 4

    def __post_init__(self):
        if self.fusion_kind not in FUSION_KINDS:
            raise ValueError(f"unknown fusion kind {self.fusion_kind!r}")
        if self.activation not in ("prelu", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.n_attention_maps < 1 or self.gru_hidden < 1 or self.lstm_hidden < 1:
            raise ValueError("sizes must be positive")


def conv_chain(hw: int, specs) -> list[int]:
    """Spatial size after each conv (valid padding)."""
    sizes = [hw]
    for _, k, s in specs:
        nxt = (sizes[-1] - k) // s + 1
        if nxt < 1:
            raise ValueError(f"conv chain collapses: {sizes} with kernel {k}")
        sizes.append(nxt)
    return sizes


@dataclass
class RecurrentState:
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, hidden: int, dtype=np.float32) -> "RecurrentState":
        return cls(np.zeros(hidden, dtype=dtype), np.zeros(hidden, dtype=dtype))


@dataclass
class ForwardOutput:
    policy_logits: np.ndarray
    value: float
    attention_maps: np.ndarray | None
    instruction_embedding: np.ndarray
    state: RecurrentState


@dataclass
class EmbeddingContext:
    """Per-episode instruction context: the embedding, its fusion projections,
    and the caches needed to backpropagate into the GRU."""

    ctx_id: int
    emb: np.ndarray
    tokens: tuple[int, ...] | None  # None for injected embeddings
    gru_cache: list | None
    fusion_cache: dict
    demb: np.ndarray | None = None


@dataclass
class StepCache:
    """One acting step for a batch of environments (K=1 for the plain path).

    Arrays carry a leading batch axis; ctx_ids and fresh have length K. fresh
    marks environments whose recurrent state was zeroed right before this
    step (episode starts), which also cuts the BPTT carry.
    """

    x: np.ndarray
    conv_z: list[np.ndarray]
    post_z: list[np.ndarray]
    bridge_z: np.ndarray | None
    lstm_cache: tuple
    ctx_ids: tuple
    fresh: np.ndarray

    @property
    def batch(self) -> int:
        return self.x.shape[0]


class Agent:
    def __init__(self, config: AgentConfig, vocab_size: int):
        self.config = config
        self.vocab_size = vocab_size
        c = config
        sizes = conv_chain(c.frame_hw, c.conv_specs)
        self.enc_hw = sizes[-1]
        self.depth = c.conv_specs[-1][0]
        post_in = {
            "attn": c.n_attention_maps,
            "netattn": self.depth + 1,
            "hadamard": self.depth,
            "concat": None,
        }[c.fusion_kind]
        if c.fusion_kind == "concat":
            post_sizes = conv_chain(self.enc_hw, c.post_conv_specs)
            self.lstm_in = post_sizes[-1] ** 2 * c.post_conv_specs[-1][0]
            self.post_in_depths = []
        else:
            post_sizes = conv_chain(self.enc_hw, c.post_conv_specs)
            self.lstm_in = post_sizes[-1] ** 2 * c.post_conv_specs[-1][0]
            depths = [post_in] + [f for f, _, _ in c.post_conv_specs]
            self.post_in_depths = depths[:-1]
        self.post_hw = conv_chain(self.enc_hw, c.post_conv_specs)

    # ---------------- parameter construction ----------------

    def param_spec(self) -> list[tuple[str, tuple[int, ...]]]:
        c = self.config
        spec: list[tuple[str, tuple[int, ...]]] = []
        prelu = c.activation == "prelu"

        def layer(name, shape):
            spec.append((f"{name}.w", shape))
            spec.append((f"{name}.b", (shape[-1],)))
            if prelu:
                spec.append((f"{name}.a", (1,)))

        in_c = 3
        for i, (f, k, _) in enumerate(c.conv_specs):
            layer(f"enc.conv{i}", (k, k, in_c, f))
            in_c = f
        spec.extend(nn.gru_param_spec("gru", self.vocab_size, c.gru_hidden))
        if c.fusion_kind == "attn":
            for j in range(c.n_attention_maps):
                layer(f"fuse.v{j}", (c.gru_hidden, self.depth))
            spec.append(("fuse.map_bias", (c.n_attention_maps,)))
        elif c.fusion_kind == "netattn":
            layer("fuse.v0", (c.gru_hidden, self.depth))
            spec.append(("fuse.map_bias", (1,)))
        elif c.fusion_kind == "hadamard":
            spec.append(("fuse.gate.w", (c.gru_hidden, self.depth)))
            spec.append(("fuse.gate.b", (self.depth,)))
        else:
            layer("fuse.text", (c.gru_hidden, c.concat_text_dim))
            flat_vis = self.enc_hw * self.enc_hw * self.depth
            layer("fuse.bridge", (flat_vis + c.concat_text_dim, self.lstm_in))
        if c.fusion_kind != "concat":
            in_c = self.post_in_depths[0]
            for i, (f, k, _) in enumerate(c.post_conv_specs):
                layer(f"post.conv{i}", (k, k, in_c, f))
                in_c = f
        spec.extend(nn.lstm_param_spec("lstm", self.lstm_in, c.lstm_hidden))
        spec.append(("pi.w", (c.lstm_hidden, c.n_actions)))
        spec.append(("pi.b", (c.n_actions,)))
        spec.append(("vf.w", (c.lstm_hidden, 1)))
        spec.append(("vf.b", (1,)))
        return spec

    def build(self, seed: int = 0, dtype=np.float32) -> nn.ParamSet:
        """Deterministic init: orthogonal recurrent matrices, fan-in uniform
        weights, zero biases, PReLU slope 0.25."""
        params = nn.ParamSet(self.param_spec(), dtype=dtype)
        rng = np.random.default_rng(np.random.SeedSequence((seed & 0xFFFFFFFFFFFFFFFF, 0xA9E27)))
        hidden = self.config.lstm_hidden
        for name, shape in params.spec:
            arr = params.params[name]
            if name.endswith(".a"):
                arr[...] = 0.25
            elif name.endswith(".b") or name == "fuse.map_bias" or name.endswith(".bz") \
                    or name.endswith(".br") or name.endswith(".bh"):
                arr[...] = 0
            elif name.startswith("gru.u"):
                arr[...] = nn.orthogonal(rng, shape, params.dtype)
            elif name == "lstm.wh":
                blocks = [nn.orthogonal(rng, (hidden, hidden), params.dtype) for _ in range(4)]
                arr[...] = np.concatenate(blocks, axis=1)
            elif name.endswith(".w") or name.startswith("gru.w") or name == "lstm.wx":
                fan_in = int(np.prod(shape[:-1]))
                # sqrt(2) gain keeps PReLU-activated layers at unit signal
                # variance; gated/linear layers use gain 1
                prelu_fed = (
                    name.startswith(("enc.", "post.")) or
                    (name.startswith("fuse.") and self.config.activation == "prelu"
                     and not name.startswith("fuse.gate"))
                )
                gain = np.sqrt(2.0) if prelu_fed else 1.0
                arr[...] = nn.uniform_fanin(rng, shape, fan_in, params.dtype, gain)
            else:
                raise AssertionError(f"unhandled parameter {name}")
        return params

    # ---------------- activations ----------------

    def _act(self, params, name: str, z: np.ndarray) -> np.ndarray:
        if self.config.activation == "prelu":
            return nn.prelu(z, params[f"{name}.a"])
        return nn.relu(z)

    def _act_backward(self, params, name: str, dy: np.ndarray, z: np.ndarray) -> np.ndarray:
        if self.config.activation == "prelu":
            dz, da = nn.prelu_backward(dy, z, params[f"{name}.a"])
            params.grads[f"{name}.a"] += da
            return dz
        return nn.relu_backward(dy, z)

    # ---------------- instruction encoding ----------------

    def encode_instruction(self, params: nn.ParamSet, tokens) -> np.ndarray:
        """GRU over one-hot tokens; the final hidden state is the embedding."""
        emb, _ = self._encode(params, tokens)
        return emb

    def _encode(self, params, tokens):
        if len(tokens) == 0:
            raise ValueError("empty token sequence")
        xs = one_hot(tokens, self.vocab_size, dtype=params.dtype)
        return nn.gru_sequence(xs, params.params, "gru")

    def _fusion_cache(self, params, emb: np.ndarray) -> dict:
        """Text-side fusion quantities shared by every step of an episode."""
        c = self.config
        out: dict = {}
        if c.fusion_kind in ("attn", "netattn"):
            n = c.n_attention_maps if c.fusion_kind == "attn" else 1
            vz = [
                nn.fc_forward(emb, params[f"fuse.v{j}.w"], params[f"fuse.v{j}.b"])
                for j in range(n)
            ]
            out["vz"] = vz
            out["v_stack"] = np.stack(
                [self._act(params, f"fuse.v{j}", z) for j, z in enumerate(vz)]
            )
        elif c.fusion_kind == "hadamard":
            out["gate"] = None  # computed inside hadamard_fuse per call
        else:
            tz = nn.fc_forward(emb, params["fuse.text.w"], params["fuse.text.b"])
            out["tz"] = tz
            out["tv"] = self._act(params, "fuse.text", tz)
        return out

    def make_context(self, params, tokens, ctx_id: int = 0) -> EmbeddingContext:
        emb, cache = self._encode(params, tokens)
        return EmbeddingContext(
            ctx_id, emb, tuple(int(t) for t in tokens), cache, self._fusion_cache(params, emb)
        )

    def make_context_from_embedding(self, params, embedding, ctx_id: int = 0) -> EmbeddingContext:
        emb = np.asarray(embedding, dtype=params.dtype)
        if emb.shape != (self.config.gru_hidden,):
            raise nn.ShapeError(
                f"embedding must have shape ({self.config.gru_hidden},), got {emb.shape}"
            )
        return EmbeddingContext(ctx_id, emb, None, None, self._fusion_cache(params, emb))

    # ---------------- forward ----------------

    def _scale_frames(self, params, frames: np.ndarray) -> np.ndarray:
        hw = self.config.frame_hw
        frames = np.asarray(frames)
        if frames.ndim == 3:
            frames = frames[None]
        if frames.shape[1:] != (hw, hw, 3):
            raise nn.ShapeError(f"frames must be (K,{hw},{hw},3), got {frames.shape}")
        return frames.astype(params.dtype) * params.dtype.type(1.0 / 255.0)

    def act_batch(self, params, frames, ctxs: list[EmbeddingContext],
                  h: np.ndarray, c_state: np.ndarray, fresh=None):
        """One acting step for K environments with per-environment contexts.

        Returns (logits (K, A), values (K,), h2, c2, attention (K,W,H,n)|None,
        StepCache).
        """
        c = self.config
        x = self._scale_frames(params, frames)
        k_batch = x.shape[0]
        if len(ctxs) != k_batch:
            raise nn.ShapeError("one context per environment required")
        fresh = np.zeros(k_batch, bool) if fresh is None else np.asarray(fresh, bool)
        conv_z = []
        a = x
        for i, (_, _, s) in enumerate(c.conv_specs):
            z = nn.conv2d_forward(a, params[f"enc.conv{i}.w"], params[f"enc.conv{i}.b"], s)
            conv_z.append(z)
            a = self._act(params, f"enc.conv{i}", z)
        r_e = a

        attention = None
        post_z: list[np.ndarray] = []
        bridge_z = None
        if c.fusion_kind in ("attn", "netattn"):
            v_stacks = np.stack([ctx.fusion_cache["v_stack"] for ctx in ctxs])
            maps = r_e @ v_stacks.transpose(0, 2, 1)[:, None]  # (K,W,H,n)
            maps = maps + params["fuse.map_bias"]
            if c.fusion_kind == "attn":
                fused = maps
                attention = maps
            else:
                fused = np.concatenate([r_e, maps], axis=-1)
                attention = maps
        elif c.fusion_kind == "hadamard":
            gates = np.stack([self._ctx_gate(params, ctx) for ctx in ctxs])
            fused = r_e * gates[:, None, None, :]
        else:
            tvs = np.stack([ctx.fusion_cache["tv"] for ctx in ctxs])
            flat = fusion.concat_fuse(r_e, tvs)
            bridge_z = nn.fc_forward(flat, params["fuse.bridge.w"], params["fuse.bridge.b"])
            fused = self._act(params, "fuse.bridge", bridge_z)

        if c.fusion_kind != "concat":
            a = fused
            for i, (_, _, s) in enumerate(c.post_conv_specs):
                z = nn.conv2d_forward(a, params[f"post.conv{i}.w"], params[f"post.conv{i}.b"], s)
                post_z.append(z)
                a = self._act(params, f"post.conv{i}", z)
            feat = a.reshape(k_batch, -1)
        else:
            feat = fused

        h2, c2, lstm_cache = nn.lstm_step(
            feat, h, c_state, params["lstm.wx"], params["lstm.wh"], params["lstm.b"]
        )
        logits = nn.fc_forward(h2, params["pi.w"], params["pi.b"])
        values = nn.fc_forward(h2, params["vf.w"], params["vf.b"])[:, 0]
        cache = StepCache(
            x=x, conv_z=conv_z, post_z=post_z, bridge_z=bridge_z,
            lstm_cache=lstm_cache, ctx_ids=tuple(ctx.ctx_id for ctx in ctxs),
            fresh=fresh,
        )
        return logits, values, h2, c2, attention, cache

    def _ctx_gate(self, params, ctx: EmbeddingContext) -> np.ndarray:
        gate = ctx.fusion_cache.get("gate")
        if gate is None:
            gate = nn.sigmoid(
                nn.fc_forward(ctx.emb, params["fuse.gate.w"], params["fuse.gate.b"])
            )
            ctx.fusion_cache["gate"] = gate
        return gate

    def act(self, params, frame, ctx: EmbeddingContext, state: RecurrentState,
            fresh: bool = False):
        """Single acting step; returns (ForwardOutput, StepCache with K=1)."""
        logits, values, h2, c2, attention, cache = self.act_batch(
            params, frame[None] if frame.ndim == 3 else frame, [ctx],
            state.h[None], state.c[None], np.array([fresh]),
        )
        out = ForwardOutput(
            policy_logits=logits[0],
            value=float(values[0]),
            attention_maps=attention[0] if attention is not None else None,
            instruction_embedding=ctx.emb,
            state=RecurrentState(h2[0], c2[0]),
        )
        return out, cache

    def forward(self, params, frame, tokens, state: RecurrentState) -> ForwardOutput:
        """Full pipeline for one step (tokens re-encoded; see make_context for
        the per-episode cached path)."""
        ctx = self.make_context(params, tokens)
        out, _ = self.act(params, frame, ctx, state)
        return out

    def forward_with_embedding(self, params, frame, embedding, state: RecurrentState) -> ForwardOutput:
        """Like forward, but injects a raw 16-d embedding, bypassing the GRU."""
        ctx = self.make_context_from_embedding(params, embedding)
        out, _ = self.act(params, frame, ctx, state)
        return out

    def initial_state(self, dtype=np.float32) -> RecurrentState:
        return RecurrentState.zeros(self.config.lstm_hidden, dtype)

    # ---------------- batched rollout backward ----------------

    def backward_rollout(self, params, caches: list[StepCache],
                         contexts: dict, dlogits: np.ndarray,
                         dvalues: np.ndarray) -> None:
        """Accumulate parameter gradients for a rollout segment of T batched
        steps over K environments.

        dlogits is (T, K, n_actions) or (T, n_actions) for K=1; dvalues
        matches. Time and environments are flattened (index t*K + k) wherever
        layers have no recurrence; the LSTM walks time with the environment
        batch, cutting carries at episode starts.
        """
        c = self.config
        T = len(caches)
        K = caches[0].batch
        if dlogits.ndim == 2:
            dlogits = dlogits[:, None, :]
        if dvalues.ndim == 1:
            dvalues = dvalues[:, None]
        if dlogits.shape != (T, K, c.n_actions) or dvalues.shape != (T, K):
            raise nn.ShapeError("loss gradient shapes do not match the rollout")
        g = params.grads
        N = T * K

        # heads (batched over time x envs)
        h2 = np.concatenate(
            [cc.lstm_cache[6] * np.tanh(cc.lstm_cache[7]) for cc in caches]
        )
        dh2, dw, db = nn.fc_backward(dlogits.reshape(N, -1), h2, params["pi.w"])
        g["pi.w"] += dw
        g["pi.b"] += db
        dxv, dw, db = nn.fc_backward(dvalues.reshape(N, 1), h2, params["vf.w"])
        g["vf.w"] += dw
        g["vf.b"] += db
        dh2 = (dh2 + dxv).reshape(T, K, c.lstm_hidden)

        # LSTM BPTT (sequential in time, batched over envs)
        dfeat = np.empty((T, K, self.lstm_in), dtype=params.dtype)
        dwx = np.zeros_like(params["lstm.wx"])
        dwh = np.zeros_like(params["lstm.wh"])
        dbl = np.zeros_like(params["lstm.b"])
        dh = np.zeros((K, c.lstm_hidden), dtype=params.dtype)
        dc = np.zeros((K, c.lstm_hidden), dtype=params.dtype)
        for t in range(T - 1, -1, -1):
            dx, dh, dc, (dwx_t, dwh_t, db_t) = nn.lstm_backward(
                dh2[t] + dh, dc, caches[t].lstm_cache, params["lstm.wx"], params["lstm.wh"]
            )
            dwx += dwx_t
            dwh += dwh_t
            dbl += db_t
            dfeat[t] = dx
            cut = caches[t].fresh
            if cut.any():
                dh[cut] = 0
                dc[cut] = 0
        g["lstm.wx"] += dwx
        g["lstm.wh"] += dwh
        g["lstm.b"] += dbl
        dfeat = dfeat.reshape(N, self.lstm_in)

        # visual feature stack (recomputed batched from stored pre-activations)
        r_e = self._act(params, f"enc.conv{len(c.conv_specs) - 1}",
                        np.concatenate([cc.conv_z[-1] for cc in caches]))

        ctx_steps: dict = {}
        for t, cc in enumerate(caches):
            for k, cid in enumerate(cc.ctx_ids):
                ctx_steps.setdefault(cid, []).append(t * K + k)

        if c.fusion_kind != "concat":
            # post convolutions, batched over time x envs
            n_in = self.post_in_depths[0]
            fused_stack = self._fused_stack(params, contexts, ctx_steps, r_e, n_in)
            n_post = len(c.post_conv_specs)
            acts = [fused_stack]
            for i in range(n_post):
                z = np.concatenate([cc.post_z[i] for cc in caches])
                acts.append(self._act(params, f"post.conv{i}", z))
            hw = self.post_hw[-1]
            dy = dfeat.reshape(N, hw, hw, c.post_conv_specs[-1][0])
            for i in range(n_post - 1, -1, -1):
                z = np.concatenate([cc.post_z[i] for cc in caches])
                dz = self._act_backward(params, f"post.conv{i}", dy, z)
                dy, dw, db = nn.conv2d_backward(
                    dz, acts[i], params[f"post.conv{i}.w"], c.post_conv_specs[i][2]
                )
                g[f"post.conv{i}.w"] += dw
                g[f"post.conv{i}.b"] += db
            dfused = dy
            dr_e = self._fusion_backward(params, contexts, ctx_steps, r_e, dfused)
        else:
            bridge_z = np.concatenate([cc.bridge_z for cc in caches])
            dz = self._act_backward(params, "fuse.bridge", dfeat, bridge_z)
            tv_dim = c.concat_text_dim
            flat_vis = self.enc_hw * self.enc_hw * self.depth
            flat = np.empty((N, flat_vis + tv_dim), dtype=params.dtype)
            flat[:, :flat_vis] = r_e.reshape(N, flat_vis)
            for cid, idx in ctx_steps.items():
                flat[np.array(idx), flat_vis:] = contexts[cid].fusion_cache["tv"]
            dflat, dw, db = nn.fc_backward(dz, flat, params["fuse.bridge.w"])
            g["fuse.bridge.w"] += dw
            g["fuse.bridge.b"] += db
            dr_e = dflat[:, :flat_vis].reshape(r_e.shape)
            for cid, idx in ctx_steps.items():
                ctx = contexts[cid]
                dtv = dflat[np.array(idx), flat_vis:].sum(axis=0)
                dtz = self._act_backward(params, "fuse.text", dtv, ctx.fusion_cache["tz"])
                demb, dw, db = nn.fc_backward(dtz, ctx.emb, params["fuse.text.w"])
                g["fuse.text.w"] += dw
                g["fuse.text.b"] += db
                self._add_demb(ctx, demb)

        # encoder convolutions, batched over time x envs
        n_enc = len(c.conv_specs)
        acts = [np.concatenate([cc.x for cc in caches])]
        for i in range(n_enc - 1):
            z = np.concatenate([cc.conv_z[i] for cc in caches])
            acts.append(self._act(params, f"enc.conv{i}", z))
        dy = dr_e
        for i in range(n_enc - 1, -1, -1):
            z = np.concatenate([cc.conv_z[i] for cc in caches])
            dz = self._act_backward(params, f"enc.conv{i}", dy, z)
            dy, dw, db = nn.conv2d_backward(dz, acts[i], params[f"enc.conv{i}.w"],
                                            c.conv_specs[i][2], need_dx=i > 0)
            g[f"enc.conv{i}.w"] += dw
            g[f"enc.conv{i}.b"] += db

        # GRU per context
        for ctx in contexts.values():
            if ctx.demb is None or ctx.tokens is None:
                continue
            nn.gru_backward(ctx.demb.astype(params.dtype), ctx.gru_cache, params.params, g, "gru")

    def _fused_stack(self, params, contexts, ctx_steps, r_e, n_in):
        c = self.config
        out = np.empty(r_e.shape[:-1] + (n_in,), dtype=params.dtype)
        for ctx_id, steps in ctx_steps.items():
            ctx = contexts[ctx_id]
            idx = np.array(steps)
            if c.fusion_kind == "attn":
                out[idx] = fusion.attn_fuse(r_e[idx], ctx.fusion_cache["v_stack"], params["fuse.map_bias"])
            elif c.fusion_kind == "netattn":
                out[idx] = fusion.netattn_fuse(r_e[idx], ctx.fusion_cache["v_stack"][0], params["fuse.map_bias"])
            else:
                gate = self._ctx_gate(params, ctx)
                out[idx] = r_e[idx] * gate
        return out

    def _fusion_backward(self, params, contexts, ctx_steps, r_e, dfused):
        c = self.config
        g = params.grads
        dr_e = np.empty_like(r_e)
        for ctx_id, steps in ctx_steps.items():
            ctx = contexts[ctx_id]
            idx = np.array(steps)
            if c.fusion_kind in ("attn", "netattn"):
                if c.fusion_kind == "attn":
                    dr, dv, db = fusion.attn_fuse_backward(dfused[idx], r_e[idx], ctx.fusion_cache["v_stack"])
                else:
                    dr, dv1, db = fusion.netattn_fuse_backward(dfused[idx], r_e[idx], ctx.fusion_cache["v_stack"][0])
                    dv = dv1[None, :]
                dr_e[idx] = dr
                g["fuse.map_bias"] += db
                demb = np.zeros_like(ctx.emb)
                for j in range(dv.shape[0]):
                    dvz = self._act_backward(params, f"fuse.v{j}", dv[j], ctx.fusion_cache["vz"][j])
                    de, dw, dbj = nn.fc_backward(dvz, ctx.emb, params[f"fuse.v{j}.w"])
                    g[f"fuse.v{j}.w"] += dw
                    g[f"fuse.v{j}.b"] += dbj
                    demb = demb + de
                self._add_demb(ctx, demb)
            else:  # hadamard
                dr, demb, dw, db = fusion.hadamard_fuse_backward(
                    dfused[idx], r_e[idx], ctx.emb, params["fuse.gate.w"], ctx.fusion_cache["gate"]
                )
                dr_e[idx] = dr
                g["fuse.gate.w"] += dw
                g["fuse.gate.b"] += db
                self._add_demb(ctx, demb)
        return dr_e

    @staticmethod
    def _add_demb(ctx: EmbeddingContext, demb: np.ndarray) -> None:
        ctx.demb = demb if ctx.demb is None else ctx.demb + demb
