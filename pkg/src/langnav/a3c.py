"""Advantage actor-critic training with GAE: a bit-deterministic synchronous
mode and a multi-process asynchronous mode sharing one parameter store.

Workers hold private environments and private parameter copies; the global
store is updated under a single lock (whole-update granularity), so readers
see either the pre- or post-update parameters, never a torn mix.
"""
from __future__ import annotations

import itertools
import json
import multiprocessing
import os
import queue as queue_mod
import time
import traceback
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn, render, world
from .agent import Agent, AgentConfig, RecurrentState
from .langgen import vocab_for_config
from .world import Action, ScenarioConfig

CSV_HEADER = "global_step,episodes_done,mean_reward_100,success_rate_100,lr"


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    workers: int = 32
    discount: float = 0.99
    gae_lambda: float = 0.95
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    rollout_len: int = 20
    grad_accum: int = 1  # rollouts accumulated per optimizer update
    envs_per_worker: int = 1  # environments stepped in lockstep per worker
    max_env_steps: int = 1_000_000
    base_lr: float = 1e-4
    anneal_factor: float = 0.9
    anneal_interval: int = 10000
    clip_norm: float = 40.0
    adam_eps: float = 1e-8
    seed: int = 0
    sync: bool = False  # single-worker, bit-deterministic
    target_success: float | None = None  # early stop on trailing train success
    time_limit_s: float | None = None
    checkpoint_every: int = 0  # optimizer steps between checkpoints (0 = final only)

    def __post_init__(self):
        if not (0 < self.discount <= 1):
            raise ValueError("discount must be in (0, 1]")
        if not (0 <= self.gae_lambda <= 1):
            raise ValueError("gae_lambda must be in [0, 1]")
        if self.workers < 1 or self.rollout_len < 1:
            raise ValueError("workers and rollout_len must be >= 1")


@dataclass
class EvalReport:
    mean_reward: float
    success_rate: float
    episodes: int
    mode: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def gae(rewards, values, bootstrap: float, terminals, discount: float, lam: float):
    """Recursive GAE: d_t = r_t + g*v_{t+1}*(1-term_t) - v_t;
    A_t = d_t + g*lam*(1-term_t)*A_{t+1}; returns = advantages + values."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    terminals = np.asarray(terminals, dtype=np.float64)
    t_len = len(rewards)
    if len(values) != t_len or len(terminals) != t_len:
        raise ValueError("rewards, values and terminals must have equal length")
    next_values = np.append(values[1:], bootstrap)
    deltas = rewards + discount * next_values * (1 - terminals) - values
    advantages = np.zeros(t_len)
    acc = 0.0
    for t in range(t_len - 1, -1, -1):
        acc = deltas[t] + discount * lam * (1 - terminals[t]) * acc
        advantages[t] = acc
    return advantages, advantages + values


@dataclass
class LossTerms:
    total: float
    policy: float
    value: float
    entropy: float
    dlogits: np.ndarray
    dvalues: np.ndarray


def loss_terms(logits: np.ndarray, values: np.ndarray, actions, advantages, returns,
               entropy_coef: float, value_coef: float) -> LossTerms:
    """A3C objective over a rollout; advantages and returns are constants.

    L = -sum logpi(a_t)*A_t + value_coef*sum (v_t - R_t)^2 - entropy_coef*sum H_t
    """
    t_len, n_actions = logits.shape
    actions = np.asarray(actions)
    advantages = np.asarray(advantages, dtype=logits.dtype)
    returns = np.asarray(returns, dtype=logits.dtype)
    logp = nn.log_softmax(logits)
    p = np.exp(logp)
    picked = logp[np.arange(t_len), actions]
    policy_loss = float(-(picked * advantages).sum())
    diff = values - returns
    value_loss = float(value_coef * (diff**2).sum())
    ent = -(p * logp).sum(axis=1)
    entropy_loss = float(-entropy_coef * ent.sum())
    total = policy_loss + value_loss + entropy_loss
    onehot = np.zeros_like(logits)
    onehot[np.arange(t_len), actions] = 1
    dlogits = advantages[:, None] * (p - onehot) + entropy_coef * p * (logp + ent[:, None])
    dvalues = 2 * value_coef * diff
    if not np.isfinite(total):
        raise TrainingError(
            f"non-finite loss (policy={policy_loss}, value={value_loss}, "
            f"entropy={entropy_loss})"
        )
    return LossTerms(total, policy_loss, value_loss, entropy_loss,
                     dlogits.astype(logits.dtype), dvalues.astype(logits.dtype))


@dataclass
class RolloutBuffer:
    """One worker's trajectory segment plus everything backward needs."""

    caches: list = field(default_factory=list)
    contexts: dict = field(default_factory=dict)
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    values: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    terminals: list = field(default_factory=list)
    logits: list = field(default_factory=list)
    bootstrap: float = 0.0
    finished: list = field(default_factory=list)  # (return, success, length)
    hook_events: list = field(default_factory=list)  # (ctx, instruction)

    def __len__(self):
        return len(self.actions)


class EnvRunner:
    """Per-worker environment wrapper holding the episode in progress."""

    def __init__(self, scenario: ScenarioConfig, agent: Agent, seed: int,
                 split: str = "train"):
        self.scenario = scenario
        self.agent = agent
        self.split = split
        self.rng = np.random.default_rng(
            np.random.SeedSequence((seed & 0xFFFFFFFFFFFFFFFF, 0xE9150DE))
        )
        self._ctx_ids = itertools.count()
        self.state = None
        self.instr = None
        self.frame = None
        self.lstm = None
        self.ctx = None
        self.fresh = True
        self.ep_return = 0.0
        self.ep_len = 0

    def new_episode(self, params) -> None:
        seed = int(self.rng.integers(0, 2**62))
        self.state, self.instr = world.reset(self.scenario, seed, self.split)
        self.frame = render.observe(self.state)
        self.ep_return = 0.0
        self.ep_len = 0
        self.fresh = True
        self.lstm = self.agent.initial_state(params.dtype)
        self.ctx = self.agent.make_context(params, self.instr.tokens, next(self._ctx_ids))

    def begin_rollout(self, params) -> None:
        if self.state is None or self.state.done:
            self.new_episode(params)
        else:
            # re-derive the context under the freshly synced parameters so the
            # rollout's forward and backward passes agree
            self.ctx = self.agent.make_context(params, self.instr.tokens, next(self._ctx_ids))

    def step_env(self, action: int):
        self.state, res = world.step(self.state, Action(action))
        self.frame = render.observe(self.state)
        self.ep_return += res.reward
        self.ep_len += 1
        return res


def collect_rollout(agent: Agent, params: nn.ParamSet, runner: EnvRunner,
                    rollout_len: int, rng: np.random.Generator,
                    want_hooks: bool = False) -> RolloutBuffer:
    buf = RolloutBuffer()
    runner.begin_rollout(params)
    buf.contexts[runner.ctx.ctx_id] = runner.ctx
    if want_hooks and runner.fresh:
        buf.hook_events.append((runner.ctx, runner.instr))
    for _ in range(rollout_len):
        out, cache = agent.act(params, runner.frame, runner.ctx, runner.lstm,
                               fresh=runner.fresh)
        runner.fresh = False
        runner.lstm = out.state
        probs = nn.softmax(out.policy_logits.astype(np.float64))
        probs /= probs.sum()
        action = int(rng.choice(len(probs), p=probs))
        res = runner.step_env(action)
        buf.caches.append(cache)
        buf.actions.append(action)
        buf.values.append(out.value)
        buf.rewards.append(res.reward)
        buf.terminals.append(res.done)
        buf.log_probs.append(float(np.log(max(probs[action], 1e-300))))
        buf.logits.append(out.policy_logits)
        if res.done:
            buf.finished.append((runner.ep_return, bool(res.success), runner.ep_len))
            runner.new_episode(params)
            buf.contexts[runner.ctx.ctx_id] = runner.ctx
            if want_hooks:
                buf.hook_events.append((runner.ctx, runner.instr))
    if buf.terminals[-1]:
        buf.bootstrap = 0.0
    else:
        out, _ = agent.act(params, runner.frame, runner.ctx, runner.lstm)
        buf.bootstrap = out.value
    return buf


class VecRunner:
    """K environments stepped in lockstep with batched forward passes."""

    def __init__(self, scenario: ScenarioConfig, agent: Agent, seed: int, k: int,
                 split: str = "train"):
        self.agent = agent
        self.k = k
        self.slots = [
            EnvRunner(scenario, agent, seed=seed * 131 + i, split=split)
            for i in range(k)
        ]
        for i, slot in enumerate(self.slots):
            slot._ctx_ids = itertools.count(start=i, step=k)

    def begin_rollout(self, params):
        for slot in self.slots:
            slot.begin_rollout(params)

    def frames(self) -> np.ndarray:
        return np.stack([slot.frame for slot in self.slots])

    def recurrent(self, dtype):
        h = np.stack([slot.lstm.h for slot in self.slots])
        c = np.stack([slot.lstm.c for slot in self.slots])
        return h, c


def collect_rollout_vec(agent: Agent, params: nn.ParamSet, vec: VecRunner,
                        rollout_len: int, rng: np.random.Generator,
                        want_hooks: bool = False):
    """Like collect_rollout, but for K lockstep environments.

    Returns (caches, contexts, logits (T,K,A), values (T,K), actions (T,K),
    rewards (T,K), terminals (T,K), bootstraps (K,), finished, hook_events).
    """
    k = vec.k
    vec.begin_rollout(params)
    contexts = {}
    hook_events = []
    for slot in vec.slots:
        contexts[slot.ctx.ctx_id] = slot.ctx
        if want_hooks and slot.fresh:
            hook_events.append((slot.ctx, slot.instr))
    caches = []
    logits_all = np.empty((rollout_len, k, agent.config.n_actions), dtype=params.dtype)
    values_all = np.empty((rollout_len, k))
    actions = np.empty((rollout_len, k), dtype=np.int64)
    rewards = np.empty((rollout_len, k))
    terminals = np.zeros((rollout_len, k), dtype=bool)
    finished = []
    for t in range(rollout_len):
        fresh = np.array([slot.fresh for slot in vec.slots])
        h, c = vec.recurrent(params.dtype)
        logits, values, h2, c2, _, cache = agent.act_batch(
            params, vec.frames(), [slot.ctx for slot in vec.slots], h, c, fresh)
        caches.append(cache)
        logits_all[t] = logits
        values_all[t] = values
        probs = nn.softmax(logits.astype(np.float64), axis=-1)
        probs /= probs.sum(axis=-1, keepdims=True)
        for i, slot in enumerate(vec.slots):
            slot.fresh = False
            slot.lstm = RecurrentState(h2[i], c2[i])
            action = int(rng.choice(agent.config.n_actions, p=probs[i]))
            res = slot.step_env(action)
            actions[t, i] = action
            rewards[t, i] = res.reward
            terminals[t, i] = res.done
            if res.done:
                finished.append((slot.ep_return, bool(res.success), slot.ep_len))
                slot.new_episode(params)
                contexts[slot.ctx.ctx_id] = slot.ctx
                if want_hooks:
                    hook_events.append((slot.ctx, slot.instr))
    h, c = vec.recurrent(params.dtype)
    _, boot_values, _, _, _, _ = agent.act_batch(
        params, vec.frames(), [slot.ctx for slot in vec.slots], h, c)
    bootstraps = np.where(terminals[-1], 0.0, boot_values)
    return (caches, contexts, logits_all, values_all, actions, rewards,
            terminals, bootstraps, finished, hook_events)


def vec_rollout_gradients(agent: Agent, params: nn.ParamSet, rollout, cfg: TrainConfig,
                          aux_hook=None) -> float:
    """GAE + loss + backward for a vectorized rollout; returns the total loss."""
    (caches, contexts, logits_all, values_all, actions, rewards, terminals,
     bootstraps, finished, hook_events) = rollout
    t_len, k = rewards.shape
    advantages = np.empty((t_len, k))
    returns = np.empty((t_len, k))
    for i in range(k):
        advantages[:, i], returns[:, i] = gae(
            rewards[:, i], values_all[:, i], float(bootstraps[i]),
            terminals[:, i], cfg.discount, cfg.gae_lambda)
    n = t_len * k
    terms = loss_terms(
        logits_all.reshape(n, -1),
        values_all.reshape(n).astype(params.dtype),
        actions.reshape(n), advantages.reshape(n), returns.reshape(n),
        cfg.entropy_coef, cfg.value_coef)
    if aux_hook is not None:
        for ctx, instr in hook_events:
            aux_hook(agent, params, ctx, instr)
    agent.backward_rollout(
        params, caches, contexts,
        terms.dlogits.reshape(t_len, k, -1), terms.dvalues.reshape(t_len, k))
    return terms.total


def rollout_gradients(agent: Agent, params: nn.ParamSet, buf: RolloutBuffer,
                      cfg: TrainConfig, aux_hook=None) -> LossTerms:
    """Compute GAE, the loss, and accumulate all parameter gradients."""
    advantages, returns = gae(buf.rewards, buf.values, buf.bootstrap,
                              buf.terminals, cfg.discount, cfg.gae_lambda)
    terms = loss_terms(np.stack(buf.logits), np.asarray(buf.values, dtype=params.dtype),
                       buf.actions, advantages, returns,
                       cfg.entropy_coef, cfg.value_coef)
    if aux_hook is not None:
        for ctx, instr in buf.hook_events:
            aux_hook(agent, params, ctx, instr)
    agent.backward_rollout(params, buf.caches, buf.contexts, terms.dlogits, terms.dvalues)
    return terms


# ---------------- shared store (async mode) ----------------

class SharedStore:
    """Flat parameter/moment buffers in shared memory with one update lock."""

    def __init__(self, template: nn.ParamSet, mp_ctx):
        self.spec = template.spec
        self.total = template.total
        self._flat_raw = mp_ctx.RawArray("f", self.total)
        self._m_raw = mp_ctx.RawArray("f", self.total)
        self._v_raw = mp_ctx.RawArray("f", self.total)
        self.lock = mp_ctx.Lock()
        self.opt_step = mp_ctx.RawValue("q", 0)
        self.env_steps = mp_ctx.RawValue("q", 0)
        self.stop = mp_ctx.RawValue("b", 0)
        self.views()[0][:] = template.flat.astype(np.float32)

    def views(self):
        flat = np.frombuffer(self._flat_raw, dtype=np.float32)
        m = np.frombuffer(self._m_raw, dtype=np.float32)
        v = np.frombuffer(self._v_raw, dtype=np.float32)
        return flat, m, v

    def snapshot(self) -> nn.ParamSet:
        flat, _, _ = self.views()
        out = nn.ParamSet(self.spec, dtype=np.float32)
        with self.lock:
            out.flat[:] = flat
        return out


def _lr_at(cfg: TrainConfig, opt_step: int) -> float:
    return cfg.base_lr * cfg.anneal_factor ** (opt_step // cfg.anneal_interval)


def worker_loop(worker_id: int, store: SharedStore, scenario: ScenarioConfig,
                agent_config: AgentConfig, cfg: TrainConfig, metrics_queue,
                aux_hook=None) -> None:
    """Copy global params, run a rollout, push clipped gradients through Adam
    on the global store; repeat until the step budget or stop flag."""
    try:
        agent = Agent(agent_config, vocab_for_config(scenario).size)
        params = nn.ParamSet(store.spec, dtype=np.float32)
        k = cfg.envs_per_worker
        if k > 1:
            runner = VecRunner(scenario, agent, seed=cfg.seed * 1000003 + worker_id, k=k)
        else:
            runner = EnvRunner(scenario, agent, seed=cfg.seed * 1000003 + worker_id)
        rng = np.random.default_rng(
            np.random.SeedSequence((cfg.seed & 0xFFFFFFFFFFFFFFFF, worker_id, 0xAC7))
        )
        flat, m, v = store.views()
        while True:
            with store.lock:
                if store.stop.value or store.env_steps.value >= cfg.max_env_steps:
                    break
                params.flat[:] = flat
            finished = []
            total_steps = 0
            for _ in range(cfg.grad_accum):
                if k > 1:
                    rollout = collect_rollout_vec(agent, params, runner,
                                                  cfg.rollout_len, rng,
                                                  want_hooks=aux_hook is not None)
                    vec_rollout_gradients(agent, params, rollout, cfg, aux_hook)
                    finished.extend(rollout[8])
                    total_steps += cfg.rollout_len * k
                else:
                    buf = collect_rollout(agent, params, runner, cfg.rollout_len, rng,
                                          want_hooks=aux_hook is not None)
                    rollout_gradients(agent, params, buf, cfg, aux_hook)
                    finished.extend(buf.finished)
                    total_steps += len(buf)
            nn.clip_global_norm(params, cfg.clip_norm)
            with store.lock:
                t = store.opt_step.value + 1
                nn.adam_update_flat(flat, m, v, params.grad_flat,
                                    t, _lr_at(cfg, store.opt_step.value),
                                    eps=cfg.adam_eps)
                store.opt_step.value = t
                store.env_steps.value += total_steps
                env_steps_now = store.env_steps.value
            params.zero_grads()
            for ep_return, success, ep_len in finished:
                metrics_queue.put(("episode", env_steps_now, ep_return, success, ep_len))
    except Exception:
        metrics_queue.put(("error", worker_id, traceback.format_exc()))


@dataclass
class TrainResult:
    checkpoint_path: str
    csv_path: str
    env_steps: int
    episodes: int
    opt_steps: int
    params: nn.ParamSet
    stop_reason: str


class _Tally:
    """Trailing-100 episode statistics and CSV emission."""

    def __init__(self, csv_path):
        self.rewards = deque(maxlen=100)
        self.successes = deque(maxlen=100)
        self.episodes = 0
        self.fh = open(csv_path, "w")
        self.fh.write(CSV_HEADER + "\n")

    def add(self, global_step: int, ep_return: float, success: bool, lr: float) -> None:
        self.episodes += 1
        self.rewards.append(ep_return)
        self.successes.append(1.0 if success else 0.0)
        self.fh.write(
            f"{global_step},{self.episodes},"
            f"{np.mean(self.rewards):.6f},{np.mean(self.successes):.6f},{lr:.10g}\n"
        )

    @property
    def success_rate(self) -> float:
        return float(np.mean(self.successes)) if self.successes else 0.0

    def close(self):
        self.fh.close()


def _checkpoint_meta(scenario: ScenarioConfig, agent_config: AgentConfig,
                     opt_steps: int, env_steps: int) -> dict:
    return {
        "scenario": json.loads(world.scenario_to_json(scenario)),
        "agent_config": asdict(agent_config),
        "opt_steps": opt_steps,
        "env_steps": env_steps,
        "vocab_size": vocab_for_config(scenario).size,
    }


def train(scenario: ScenarioConfig, agent_config: AgentConfig, cfg: TrainConfig,
          out_dir, aux_hook=None, init_params: nn.ParamSet | None = None) -> TrainResult:
    """Run training to the env-step budget (or early stop); writes the metric
    CSV and the final checkpoint under out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "metrics.csv")
    ckpt_path = os.path.join(out_dir, "checkpoint.bin")
    vocab = vocab_for_config(scenario)
    agent = Agent(agent_config, vocab.size)
    if init_params is not None:
        # init_params may extend the agent spec (e.g. translation decoders)
        template = init_params.clone(np.float32)
    else:
        template = agent.build(seed=cfg.seed, dtype=np.float32)
    if cfg.sync or cfg.workers == 1:
        return _train_sync(scenario, agent_config, cfg, agent, template,
                           csv_path, ckpt_path, aux_hook)
    return _train_async(scenario, agent_config, cfg, agent, template,
                        csv_path, ckpt_path, aux_hook)


def _train_sync(scenario, agent_config, cfg, agent, params, csv_path, ckpt_path,
                aux_hook) -> TrainResult:
    adam = nn.AdamState.for_params(params, cfg.base_lr, cfg.anneal_factor,
                                   cfg.anneal_interval)
    adam.eps = cfg.adam_eps
    k = cfg.envs_per_worker
    if k > 1:
        runner = VecRunner(scenario, agent, seed=cfg.seed * 1000003, k=k)
    else:
        runner = EnvRunner(scenario, agent, seed=cfg.seed * 1000003)
    rng = np.random.default_rng(
        np.random.SeedSequence((cfg.seed & 0xFFFFFFFFFFFFFFFF, 0, 0xAC7))
    )
    tally = _Tally(csv_path)
    start = time.monotonic()
    env_steps = 0
    stop_reason = "budget"
    while env_steps < cfg.max_env_steps:
        finished = []
        for _ in range(cfg.grad_accum):
            if k > 1:
                rollout = collect_rollout_vec(agent, params, runner, cfg.rollout_len,
                                              rng, want_hooks=aux_hook is not None)
                vec_rollout_gradients(agent, params, rollout, cfg, aux_hook)
                finished.extend(rollout[8])
                env_steps += cfg.rollout_len * k
            else:
                buf = collect_rollout(agent, params, runner, cfg.rollout_len, rng,
                                      want_hooks=aux_hook is not None)
                rollout_gradients(agent, params, buf, cfg, aux_hook)
                finished.extend(buf.finished)
                env_steps += len(buf)
        buf_finished = finished
        nn.clip_global_norm(params, cfg.clip_norm)
        lr = nn.adam_step(params, adam)
        if cfg.checkpoint_every and adam.step % cfg.checkpoint_every == 0:
            nn.save_checkpoint(
                ckpt_path, params,
                _checkpoint_meta(scenario, agent_config, adam.step, env_steps),
            )
        for ep_return, success, ep_len in buf_finished:
            tally.add(env_steps, ep_return, success, lr)
        if (cfg.target_success is not None and len(tally.successes) == 100
                and tally.success_rate >= cfg.target_success):
            stop_reason = "target_success"
            break
        if cfg.time_limit_s is not None and time.monotonic() - start > cfg.time_limit_s:
            stop_reason = "time_limit"
            break
    tally.close()
    nn.save_checkpoint(ckpt_path, params,
                       _checkpoint_meta(scenario, agent_config, adam.step, env_steps))
    return TrainResult(ckpt_path, csv_path, env_steps, tally.episodes, adam.step,
                       params, stop_reason)


def _train_async(scenario, agent_config, cfg, agent, template, csv_path, ckpt_path,
                 aux_hook) -> TrainResult:
    mp_ctx = multiprocessing.get_context("fork")
    store = SharedStore(template, mp_ctx)
    metrics_queue = mp_ctx.Queue()
    procs = [
        mp_ctx.Process(
            target=worker_loop,
            args=(wid, store, scenario, agent_config, cfg, metrics_queue, aux_hook),
            daemon=True,
        )
        for wid in range(cfg.workers)
    ]
    for p in procs:
        p.start()
    tally = _Tally(csv_path)
    start = time.monotonic()
    stop_reason = "budget"
    error = None
    try:
        while True:
            try:
                msg = metrics_queue.get(timeout=0.2)
            except queue_mod.Empty:
                msg = None
            if msg is not None:
                if msg[0] == "error":
                    error = msg
                    stop_reason = "worker_error"
                    store.stop.value = 1
                    break
                _, step_now, ep_return, success, _ = msg
                tally.add(step_now, ep_return, success,
                          _lr_at(cfg, max(0, store.opt_step.value - 1)))
                if (cfg.target_success is not None and len(tally.successes) == 100
                        and tally.success_rate >= cfg.target_success):
                    stop_reason = "target_success"
                    store.stop.value = 1
                    break
            if cfg.time_limit_s is not None and time.monotonic() - start > cfg.time_limit_s:
                stop_reason = "time_limit"
                store.stop.value = 1
                break
            if store.env_steps.value >= cfg.max_env_steps and msg is None:
                break
        store.stop.value = 1
        deadline = time.monotonic() + 30
        for p in procs:
            p.join(max(0.1, deadline - time.monotonic()))
        # drain stragglers so episode counts are complete
        while True:
            try:
                msg = metrics_queue.get_nowait()
            except queue_mod.Empty:
                break
            if msg[0] == "episode":
                _, step_now, ep_return, success, _ = msg
                tally.add(step_now, ep_return, success,
                          _lr_at(cfg, max(0, store.opt_step.value - 1)))
    finally:
        store.stop.value = 1
        for p in procs:
            if p.is_alive():
                p.terminate()
        tally.close()
    if error is not None:
        raise TrainingError(f"worker {error[1]} failed:\n{error[2]}")
    params = store.snapshot()
    env_steps = int(store.env_steps.value)
    opt_steps = int(store.opt_step.value)
    nn.save_checkpoint(ckpt_path, params,
                       _checkpoint_meta(scenario, agent_config, opt_steps, env_steps))
    return TrainResult(ckpt_path, csv_path, env_steps, tally.episodes, opt_steps,
                       params, stop_reason)


# ---------------- evaluation ----------------

def evaluate_policy(scenario: ScenarioConfig, mode: str, episodes: int, seed: int,
                    action_fn) -> EvalReport:
    """Run `episodes` fresh episodes with action_fn(state, frame) -> Action."""
    split = {"US": "train", "ZS": "zero_shot"}[mode]
    total = 0.0
    successes = 0
    for i in range(episodes):
        ep_seed = int(
            np.random.default_rng(np.random.SeedSequence((seed, i, 0xE7A1))).integers(2**62)
        )
        state, instr = world.reset(scenario, ep_seed, split)
        ep_return = 0.0
        res = None
        while not state.done:
            frame = render.observe(state)
            state, res = world.step(state, action_fn(state, frame, instr))
            ep_return += res.reward
        total += ep_return
        successes += bool(res.success)
    return EvalReport(total / episodes, successes / episodes, episodes, mode)


def evaluate(agent: Agent, params: nn.ParamSet, scenario: ScenarioConfig,
             mode: str = "US", episodes: int = 100, seed: int = 0) -> EvalReport:
    """Greedy (argmax) evaluation on fresh layouts of the requested split."""
    split = {"US": "train", "ZS": "zero_shot"}[mode]
    total = 0.0
    successes = 0
    for i in range(episodes):
        ep_seed = int(
            np.random.default_rng(np.random.SeedSequence((seed, i, 0xE7A1))).integers(2**62)
        )
        state, instr = world.reset(scenario, ep_seed, split)
        ctx = agent.make_context(params, instr.tokens)
        lstm = agent.initial_state(params.dtype)
        ep_return = 0.0
        res = None
        while not state.done:
            out, _ = agent.act(params, render.observe(state), ctx, lstm)
            lstm = out.state
            state, res = world.step(state, Action(int(np.argmax(out.policy_logits))))
            ep_return += res.reward
        total += ep_return
        successes += bool(res.success)
    return EvalReport(total / episodes, successes / episodes, episodes, mode)


def first_crossing_step(csv_path, threshold: float) -> int | None:
    """First global_step whose trailing-100 success rate (with a full window)
    reaches `threshold`, per the metric CSV; None if never."""
    with open(csv_path) as fh:
        next(fh)
        for line in fh:
            step, episodes, _, success, _ = line.strip().split(",")
            if int(episodes) >= 100 and float(success) >= threshold:
                return int(step)
    return None


def load_agent_checkpoint(path):
    """Rebuild (agent, params, scenario) from a training checkpoint."""
    params, meta = nn.load_checkpoint(path)
    scenario = world.load_scenario(json.dumps(meta["scenario"]))
    agent_config = AgentConfig(**{
        k: tuple(tuple(x) if isinstance(x, list) else x for x in v) if isinstance(v, list) else v
        for k, v in meta["agent_config"].items()
    })
    agent = Agent(agent_config, meta["vocab_size"])
    return agent, params, scenario, meta
