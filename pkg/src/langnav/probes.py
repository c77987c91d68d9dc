"""Post-training analyses: embedding geometry (PCA, analogy parallelism),
vector-arithmetic navigation, and the dual-decoder unsupervised translation
experiment."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from . import a3c, langgen, nn, render, world
from .agent import Agent
from .langgen import Direct, Instruction, Vocabulary, one_hot
from .world import Action, ScenarioConfig


@dataclass
class EmbeddingMatrix:
    labels: list[str]
    rows: np.ndarray  # (n_instructions, embedding_dim)


def embed_instructions(agent: Agent, params: nn.ParamSet, vocab: Vocabulary,
                       texts: list[str]) -> EmbeddingMatrix:
    rows = [
        agent.encode_instruction(params, langgen.tokenize(t, vocab)) for t in texts
    ]
    return EmbeddingMatrix(list(texts), np.stack(rows))


def pca2(matrix: EmbeddingMatrix | np.ndarray) -> np.ndarray:
    """Top-2 principal-component coordinates via eigen-decomposition of the
    covariance; sign fixed so each component's largest-magnitude loading is
    positive."""
    rows = matrix.rows if isinstance(matrix, EmbeddingMatrix) else np.asarray(matrix)
    if rows.shape[0] < 3:
        raise ValueError("pca2 needs at least 3 rows")
    centered = rows - rows.mean(axis=0)
    if not centered.any():
        raise ValueError("degenerate input: all rows identical")
    cov = centered.T @ centered / (rows.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:2]
    components = eigvecs[:, order]
    for j in range(components.shape[1]):
        lead = np.argmax(np.abs(components[:, j]))
        if components[lead, j] < 0:
            components[:, j] = -components[:, j]
    return centered @ components


def pca_csv(matrix: EmbeddingMatrix) -> str:
    coords = pca2(matrix)
    lines = ["label,x,y"]
    for label, (x, y) in zip(matrix.labels, coords):
        lines.append(f"{json.dumps(label)},{x:.8g},{y:.8g}")
    return "\n".join(lines) + "\n"


def analogy_parallelism(agent: Agent, params: nn.ParamSet, vocab: Vocabulary,
                        pairs: list[tuple[str, str]]) -> np.ndarray:
    """Pairwise cosines between difference vectors emb(a) - emb(b), computed in
    the full embedding space. Zero difference vectors yield NaN rows."""
    diffs = []
    for a, b in pairs:
        ea = agent.encode_instruction(params, langgen.tokenize(a, vocab))
        eb = agent.encode_instruction(params, langgen.tokenize(b, vocab))
        diffs.append(ea - eb)
    n = len(diffs)
    out = np.full((n, n), np.nan)
    norms = [float(np.linalg.norm(d)) for d in diffs]
    for i in range(n):
        for j in range(n):
            if norms[i] > 0 and norms[j] > 0:
                out[i, j] = float(diffs[i] @ diffs[j]) / (norms[i] * norms[j])
    return out


def mean_offdiag_cosine(cosines: np.ndarray) -> float:
    n = cosines.shape[0]
    mask = ~np.eye(n, dtype=bool)
    vals = cosines[mask]
    return float(np.nanmean(vals))


def compose_embedding(agent: Agent, params: nn.ParamSet, vocab: Vocabulary,
                      expression: list[tuple[int, str]]) -> np.ndarray:
    """Signed sum of instruction embeddings; expression terms are (+1|-1, text)."""
    if not expression:
        raise ValueError("empty expression")
    total = np.zeros(agent.config.gru_hidden, dtype=params.dtype)
    for sign, text in expression:
        if sign not in (1, -1):
            raise ValueError(f"term sign must be +1 or -1, got {sign}")
        emb = agent.encode_instruction(params, langgen.tokenize(text, vocab))
        total = total + sign * emb
    return total


def compose_and_navigate(agent: Agent, params: nn.ParamSet, scenario: ScenarioConfig,
                         expression: list[tuple[int, str]], target: Direct,
                         episodes: int = 20, seed: int = 0) -> a3c.EvalReport:
    """Drive episodes with an injected composed embedding, judged against a
    caller-specified target meaning (exploratory metric, no fixed threshold)."""
    vocab = langgen.vocab_for_config(scenario)
    emb = compose_embedding(agent, params, vocab, expression)
    total = 0.0
    successes = 0
    done_eps = 0
    attempt = 0
    while done_eps < episodes and attempt < episodes * 200:
        ep_seed = int(np.random.default_rng(
            np.random.SeedSequence((seed, attempt, 0xC0A1))).integers(2**62))
        attempt += 1
        state, _ = world.reset(scenario, ep_seed, "train")
        probe = langgen._bare(target)
        try:
            cells = langgen.resolve_target(probe, state)
        except langgen.ResolutionError:
            continue
        if state.agent in cells:
            continue
        state = dataclasses.replace(state, target_cells=frozenset(cells))
        ctx = agent.make_context_from_embedding(params, emb)
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
        done_eps += 1
    if done_eps == 0:
        raise ValueError(f"target {target} never uniquely resolvable in {scenario.grid_dims} scenario")
    return a3c.EvalReport(total / done_eps, successes / done_eps, done_eps, "US")


# ---------------- dual-decoder translation ----------------

START, END = "<s>", "</s>"


@dataclass
class DecoderPair:
    """Per-language GRU decoders over the shared instruction encoder."""

    vocabs: dict[str, Vocabulary]  # per-language output vocabularies
    hidden: int

    def spec(self):
        spec = []
        for lang in sorted(self.vocabs):
            size = self.vocabs[lang].size
            # input one-hots carry words plus the start token; outputs predict
            # words plus the end token
            spec.extend(nn.gru_param_spec(f"dec.{lang}", size + 1, self.hidden))
            spec.append((f"dec.{lang}.out.w", (self.hidden, size + 1)))
            spec.append((f"dec.{lang}.out.b", (size + 1,)))
        return spec


def decoder_pair_for(scenario: ScenarioConfig, hidden: int = 16) -> DecoderPair:
    vocabs = {
        lang: langgen.build_vocab(scenario.catalog, lang) for lang in scenario.languages
    }
    return DecoderPair(vocabs, hidden)


def build_translation_params(agent: Agent, pair: DecoderPair, seed: int = 0,
                             dtype=np.float32) -> nn.ParamSet:
    """Agent parameters plus decoder parameters in one flat set."""
    spec = agent.param_spec() + pair.spec()
    params = nn.ParamSet(spec, dtype=dtype)
    base = agent.build(seed=seed, dtype=dtype)
    for name in base.names():
        params.params[name][...] = base.params[name]
    rng = np.random.default_rng(np.random.SeedSequence((seed & 0xFFFFFFFFFFFFFFFF, 0xDEC0DE)))
    for name, shape in pair.spec():
        arr = params.params[name]
        leaf = name.split(".")[-1]
        if leaf.startswith("b"):
            arr[...] = 0
        elif leaf.startswith("u"):
            arr[...] = nn.orthogonal(rng, shape, dtype)
        else:
            fan_in = int(np.prod(shape[:-1]))
            arr[...] = nn.uniform_fanin(rng, shape, fan_in, dtype)
    return params


def _decoder_step_tokens(instr: Instruction, vocab: Vocabulary):
    word_ids = [vocab.word2id()[w] for w in instr.text.split()]
    start_id = vocab.size  # input-only slot
    end_id = vocab.size  # output-only slot
    inputs = [start_id] + word_ids
    targets = word_ids + [end_id]
    return inputs, targets


def reconstruction_loss_and_grads(agent: Agent, params: nn.ParamSet, ctx,
                                  instr: Instruction, pair: DecoderPair,
                                  beta: float = 1.0) -> float:
    """Teacher-forced cross-entropy through the decoder matching the
    instruction's language; decoder gradients accumulate into params.grads and
    the embedding gradient flows into the episode context (and thus the GRU)."""
    lang = instr.language
    vocab = pair.vocabs[lang]
    prefix = f"dec.{lang}"
    inputs, targets = _decoder_step_tokens(instr, vocab)
    xs = one_hot(inputs, vocab.size + 1, dtype=params.dtype)
    h = ctx.emb
    if h.shape != (pair.hidden,):
        raise nn.ShapeError("decoder hidden size must match the encoder embedding")
    caches = []
    douts = []
    total = 0.0
    hs = [h]
    for x, tgt in zip(xs, targets):
        h, cache = nn.gru_sequence(x[None], params.params, prefix, h0=hs[-1])
        logits = nn.fc_forward(h, params[f"{prefix}.out.w"], params[f"{prefix}.out.b"])
        logp = nn.log_softmax(logits)
        total += float(-logp[tgt])
        p = np.exp(logp)
        dlogit = p.copy()
        dlogit[tgt] -= 1.0
        caches.append(cache)
        douts.append(dlogit)
        hs.append(h)
    scale = params.dtype.type(beta)
    dh_next = np.zeros(pair.hidden, dtype=params.dtype)
    for t in range(len(caches) - 1, -1, -1):
        dh, dw, db = nn.fc_backward(scale * douts[t], hs[t + 1], params[f"{prefix}.out.w"])
        params.grads[f"{prefix}.out.w"] += dw
        params.grads[f"{prefix}.out.b"] += db
        _, dh0 = nn.gru_backward(dh + dh_next, caches[t], params.params,
                                 params.grads, prefix)
        dh_next = dh0
    agent._add_demb(ctx, dh_next)
    return beta * total


@dataclass
class TranslationResult:
    params: nn.ParamSet
    pair: DecoderPair
    train_result: a3c.TrainResult
    episode_log: list[tuple[str, str]]  # (language, text) per episode


def train_translation(scenario: ScenarioConfig, agent_config, train_cfg: a3c.TrainConfig,
                      out_dir, beta: float = 1.0, decoder_hidden: int | None = None,
                      seed: int | None = None) -> TranslationResult:
    """Joint objective: A3C loss plus beta * reconstruction cross-entropy,
    teacher-forced through the decoder of the episode's language."""
    if len(scenario.languages) < 2:
        raise ValueError("translation training needs a bilingual scenario")
    vocab = langgen.vocab_for_config(scenario)
    agent = Agent(agent_config, vocab.size)
    pair = decoder_pair_for(scenario, decoder_hidden or agent_config.gru_hidden)
    init = build_translation_params(agent, pair, seed=seed if seed is not None else train_cfg.seed)
    episode_log: list[tuple[str, str]] = []

    def hook(agent_, params_, ctx_, instr_):
        episode_log.append((instr_.language, instr_.text))
        return reconstruction_loss_and_grads(agent_, params_, ctx_, instr_, pair, beta)

    result = a3c.train(scenario, agent_config, train_cfg, out_dir,
                       aux_hook=hook if beta != 0 else None, init_params=init)
    return TranslationResult(result.params, pair, result, episode_log)


def translate(text: str, src_lang: str, dst_lang: str, agent: Agent,
              params: nn.ParamSet, pair: DecoderPair, encoder_vocab: Vocabulary,
              max_len: int = 18) -> str:
    """Encode with the shared GRU, then greedily decode with the destination
    language's decoder until the end token or the length cap.

    The encoder reads the shared (merged) vocabulary; src_lang only sanity
    checks that the words belong to that language's lexicon.
    """
    langgen.tokenize(text, pair.vocabs[src_lang])  # OOV check against src
    emb = agent.encode_instruction(params, langgen.tokenize(text, encoder_vocab))
    dst_vocab = pair.vocabs[dst_lang]
    prefix = f"dec.{dst_lang}"
    start_id = end_id = dst_vocab.size
    h = emb.astype(params.dtype)
    token = start_id
    words: list[str] = []
    for _ in range(max_len):
        x = one_hot([token], dst_vocab.size + 1, dtype=params.dtype)
        h, _ = nn.gru_sequence(x, params.params, prefix, h0=h)
        logits = nn.fc_forward(h, params[f"{prefix}.out.w"], params[f"{prefix}.out.b"])
        token = int(np.argmax(logits))
        if token == end_id:
            break
        words.append(dst_vocab.words[token])
    return " ".join(words)


def exact_match_rate(pairs: list[tuple[str, str]]) -> float:
    """Fraction of word-exact full-sentence matches."""
    if not pairs:
        raise ValueError("empty list")
    hits = sum(1 for got, ref in pairs if got.split() == ref.split())
    return hits / len(pairs)
