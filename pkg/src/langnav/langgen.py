"""Instruction grammar: generation, tokenization, semantic resolution, splits.

Eleven template families cover the supported instruction shapes; French
mirrors the direct "go to" subset for the translation probe. Everything here
is a pure function of its inputs, so concurrent use is safe.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import lexicon, world
from .world import FAMILY_NAMES, ScenarioConfig, WorldState

DIRECTIONS = ("north", "south", "east", "west")
DIRECTION_DELTAS = {
    "north": (-1, 0),
    "south": (1, 0),
    "east": (0, 1),
    "west": (0, -1),
}
CORNERS = ("top-left", "top-right", "bottom-left", "bottom-right")

# Fixed template terminals per language; content words come from the catalog.
EN_FUNCTION_WORDS = (
    "go to is your target destination south north east west of top bottom "
    "left right corner there a it are multiple smaller larger one and former "
    "latter if present then else"
).split()
FR_FUNCTION_WORDS = "aller a la".split()

MIN_LEN, MAX_LEN = 3, 18


class GrammarError(ValueError):
    pass


class OOVError(GrammarError):
    pass


class ResolutionError(GrammarError):
    """Empty or ambiguous target resolution; signals an infeasibility bug."""


@dataclass(frozen=True)
class Direct:
    kind: str
    color: str | None = None
    size: str | None = None


@dataclass(frozen=True)
class Spatial:
    direction: str
    referent: Direct


@dataclass(frozen=True)
class Corner:
    which: str


@dataclass(frozen=True)
class Comparative:
    kind: str
    color: str | None
    pick: str  # smaller | larger


@dataclass(frozen=True)
class Ordinal:
    first: Direct
    second: Direct
    pick: str  # former | latter


@dataclass(frozen=True)
class Conditional:
    condition: Direct
    then: Direct
    otherwise: Direct


SemanticForm = Direct | Spatial | Corner | Comparative | Ordinal | Conditional


@dataclass(frozen=True)
class Instruction:
    text: str
    tokens: tuple[int, ...]
    language: str
    semantics: SemanticForm
    split: str
    family: str


@dataclass(frozen=True)
class Vocabulary:
    language: str
    words: tuple[str, ...]  # index == id; words[0] is the padding slot

    @property
    def size(self) -> int:
        return len(self.words)

    def word2id(self) -> dict[str, int]:
        return _word2id(self.words)


@lru_cache(maxsize=32)
def _word2id(words: tuple[str, ...]) -> dict[str, int]:
    return {w: i for i, w in enumerate(words)}


@dataclass(frozen=True)
class SplitSpec:
    held_out: frozenset[tuple[str, str]]  # (attribute, kind); attribute is a color or size
    held_out_instruction_count: int


def _content_words(catalog, language: str) -> set[str]:
    words: set[str] = set()
    for entry in catalog:
        if language == "en":
            words.add(entry.kind)
            words.update(entry.colors)
            words.update(entry.sizes)
        else:
            words.add(lexicon.FR_KINDS[entry.kind])
            words.update(lexicon.FR_COLORS[c] for c in entry.colors)
            words.update(lexicon.FR_SIZES[s] for s in entry.sizes)
    return words


def build_vocab(catalog, language: str = "en") -> Vocabulary:
    """Alphabetical word ids over template terminals plus catalog content words.

    `language` is "en", "fr", or "en+fr" for the shared bilingual encoder
    vocabulary. Id 0 is reserved for padding.
    """
    if not catalog:
        raise ValueError("catalog must be non-empty")
    words: set[str] = set()
    if language in ("en", "en+fr"):
        words.update(EN_FUNCTION_WORDS)
        words.update(_content_words(catalog, "en"))
    if language in ("fr", "en+fr"):
        words.update(FR_FUNCTION_WORDS)
        words.update(_content_words(catalog, "fr"))
    if language not in ("en", "fr", "en+fr"):
        raise ValueError(f"unknown language {language!r}")
    return Vocabulary(language, ("<pad>", *sorted(words)))


@lru_cache(maxsize=32)
def vocab_for_config(config: ScenarioConfig) -> Vocabulary:
    lang = "en+fr" if len(config.languages) > 1 else config.languages[0]
    return build_vocab(config.catalog, lang)


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    table = vocab.word2id()
    ids = []
    for word in text.split():
        if word not in table:
            raise OOVError(f"word {word!r} not in {vocab.language} vocabulary")
        ids.append(table[word])
    return ids


def detokenize(ids, vocab: Vocabulary) -> str:
    return " ".join(vocab.words[i] for i in ids)


def one_hot(ids, vocab_size: int, dtype=np.float32) -> np.ndarray:
    """One row per token, no padding; each row sums to 1."""
    mat = np.zeros((len(ids), vocab_size), dtype=dtype)
    mat[np.arange(len(ids)), list(ids)] = 1
    return mat


def direct_text(d: Direct, language: str = "en") -> str:
    if language == "en":
        parts = [p for p in (d.size, d.color, d.kind) if p]
        return " ".join(parts)
    parts = ["aller", "a", "la"]
    if d.size:
        parts.append(lexicon.FR_SIZES[d.size])
    parts.append(lexicon.FR_KINDS[d.kind])
    if d.color:
        parts.append(lexicon.FR_COLORS[d.color])
    return " ".join(parts)


def combos_in(sem: SemanticForm) -> frozenset[tuple[str, str]]:
    """Attribute-kind combinations an instruction exercises (for split tagging)."""
    def direct_combos(d: Direct):
        out = set()
        if d.color:
            out.add((d.color, d.kind))
        if d.size:
            out.add((d.size, d.kind))
        return out

    if isinstance(sem, Direct):
        return frozenset(direct_combos(sem))
    if isinstance(sem, Spatial):
        return frozenset(direct_combos(sem.referent))
    if isinstance(sem, Corner):
        return frozenset()
    if isinstance(sem, Comparative):
        return frozenset({(sem.color, sem.kind)} if sem.color else set())
    if isinstance(sem, Ordinal):
        return frozenset(direct_combos(sem.first) | direct_combos(sem.second))
    if isinstance(sem, Conditional):
        return frozenset(
            direct_combos(sem.condition)
            | direct_combos(sem.then)
            | direct_combos(sem.otherwise)
        )
    raise TypeError(f"unknown semantic form {sem!r}")


def _matches(obj: world.ObjectRecord, d: Direct) -> bool:
    return (
        obj.kind == d.kind
        and (d.color is None or obj.color == d.color)
        and (d.size is None or obj.size == d.size)
    )


def _match_cells(state: WorldState, d: Direct) -> list[tuple[int, int]]:
    return [o.cell for o in state.objects if _matches(o, d)]


def resolve_target(instr: Instruction, state: WorldState) -> frozenset[tuple[int, int]]:
    """Target cells for an instruction; raises ResolutionError when the world
    does not support a unique reading."""
    sem = instr.semantics

    def unique_cell(d: Direct) -> tuple[int, int]:
        cells = _match_cells(state, d)
        if not cells:
            raise ResolutionError(f"no object matches {d}")
        if len(cells) > 1:
            raise ResolutionError(f"ambiguous reference {d}: {sorted(cells)}")
        return cells[0]

    if isinstance(sem, Direct):
        return frozenset({unique_cell(sem)})
    if isinstance(sem, Spatial):
        r, c = unique_cell(sem.referent)
        dr, dc = DIRECTION_DELTAS[sem.direction]
        cell = (r + dr, c + dc)
        if not state.in_bounds(cell):
            raise ResolutionError(f"offset cell {cell} outside the grid")
        return frozenset({cell})
    if isinstance(sem, Corner):
        rows, cols = state.grid_dims
        cell = {
            "top-left": (0, 0),
            "top-right": (0, cols - 1),
            "bottom-left": (rows - 1, 0),
            "bottom-right": (rows - 1, cols - 1),
        }[sem.which]
        return frozenset({cell})
    if isinstance(sem, Comparative):
        group = [
            o
            for o in state.objects
            if o.kind == sem.kind and (sem.color is None or o.color == sem.color)
        ]
        if len(group) < 2:
            raise ResolutionError(f"fewer than two instances for {sem}")
        key = lambda o: lexicon.SIZE_ORDER[o.size]
        group.sort(key=key)
        chosen = group[0] if sem.pick == "smaller" else group[-1]
        twin = group[1] if sem.pick == "smaller" else group[-2]
        if key(chosen) == key(twin):
            raise ResolutionError(f"{sem.pick} instance not unique for {sem}")
        return frozenset({chosen.cell})
    if isinstance(sem, Ordinal):
        d = sem.first if sem.pick == "former" else sem.second
        return frozenset({unique_cell(d)})
    if isinstance(sem, Conditional):
        present = len(_match_cells(state, sem.condition)) > 0
        return frozenset({unique_cell(sem.then if present else sem.otherwise)})
    raise TypeError(f"unknown semantic form {sem!r}")


def _full_spec(obj: world.ObjectRecord) -> Direct:
    return Direct(obj.kind, obj.color, obj.size)


def _direct_variants(state: WorldState) -> list[tuple[str, Direct]]:
    """Uniquely-resolving direct forms, tagged with their family."""
    out = []
    kinds = {}
    pairs = {}
    full = {}
    for o in state.objects:
        kinds.setdefault(o.kind, []).append(o)
        pairs.setdefault((o.kind, o.color), []).append(o)
        full.setdefault(_full_spec(o), []).append(o)
    for kind, group in kinds.items():
        if len(group) == 1:
            out.append(("direct_kind", Direct(kind)))
    for (kind, color), group in pairs.items():
        if len(group) == 1:
            out.append(("direct_color", Direct(kind, color)))
    for spec, group in full.items():
        if len(group) == 1:  # always true for reset-sampled worlds
            out.append(("direct_size", spec))
    return out


def _en_surfaces(family: str, sem: SemanticForm) -> list[str]:
    if family in ("direct_kind", "direct_color", "direct_size"):
        return [f"go to {direct_text(sem)}"]
    if family == "target_of":
        phrase = direct_text(sem)
        return [f"{phrase} is your target", f"{phrase} is your destination"]
    if family == "spatial":
        return [f"go to {sem.direction} of {direct_text(sem.referent)}"]
    if family == "corner":
        a, b = sem.which.split("-")
        return [f"go to {a} {b} corner"]
    if family in ("exist_color", "exist_size"):
        return [f"there is a {direct_text(sem)} go to it"]
    if family == "comparative":
        noun = f"{sem.color} {sem.kind}" if sem.color else sem.kind
        return [f"there are multiple {noun} go to {sem.pick} one"]
    if family == "ordinal":
        return [
            f"there is a {direct_text(sem.first)} and a {direct_text(sem.second)} "
            f"go to {sem.pick}"
        ]
    if family == "conditional":
        return [
            f"if {direct_text(sem.condition)} is present then go to "
            f"{direct_text(sem.then)} else go to {direct_text(sem.otherwise)}"
        ]
    raise ValueError(f"unknown family {family!r}")


def feasible_instructions(
    state: WorldState,
    split_spec: SplitSpec | None = None,
    families=None,
    languages=("en",),
) -> list[Instruction]:
    """Every instruction that resolves to a nonempty, unambiguous, reachable
    target in this world, sorted by (language, text).

    `state` is a freshly reset world: objects placed, target not yet chosen.
    """
    families = FAMILY_NAMES if families is None else tuple(families)
    held = split_spec.held_out if split_spec is not None else frozenset()
    vocab = vocab_for_config(state.config)
    reachable = set(world._bfs_cells(state.agent, set(state.obstacles), state.grid_dims))
    occupied = {o.cell for o in state.objects}

    def cell_ok(cell, must_be_empty: bool) -> bool:
        if cell == state.agent or not state.in_bounds(cell):
            return False
        if cell in state.obstacles or cell not in reachable:
            return False
        return not (must_be_empty and cell in occupied)

    candidates: list[tuple[str, SemanticForm]] = []
    directs = _direct_variants(state)
    by_cell_ok_directs = []
    for fam, d in directs:
        cell = _match_cells(state, d)[0]
        if cell_ok(cell, must_be_empty=False):
            by_cell_ok_directs.append((fam, d, cell))
            if fam in families:
                candidates.append((fam, d))

    if "target_of" in families or "spatial" in families:
        for fam, d, cell in by_cell_ok_directs:
            if "target_of" in families:
                candidates.append(("target_of", d))
            if "spatial" in families:
                for direction in DIRECTIONS:
                    dr, dc = DIRECTION_DELTAS[direction]
                    off = (cell[0] + dr, cell[1] + dc)
                    if cell_ok(off, must_be_empty=True):
                        candidates.append(("spatial", Spatial(direction, d)))

    if "corner" in families:
        for which in CORNERS:
            probe = Corner(which)
            cell = next(iter(resolve_target(_bare(probe), state)))
            if cell_ok(cell, must_be_empty=True):
                candidates.append(("corner", probe))

    if "exist_color" in families or "exist_size" in families:
        for fam, d, cell in by_cell_ok_directs:
            if fam == "direct_color" and "exist_color" in families:
                candidates.append(("exist_color", d))
            if fam == "direct_size" and "exist_size" in families:
                candidates.append(("exist_size", d))

    if "comparative" in families:
        groups: dict[tuple[str, str | None], list] = {}
        for o in state.objects:
            groups.setdefault((o.kind, None), []).append(o)
            groups.setdefault((o.kind, o.color), []).append(o)
        for (kind, color), group in sorted(groups.items(), key=str):
            if len(group) < 2:
                continue
            orders = sorted(lexicon.SIZE_ORDER[o.size] for o in group)
            for pick, ok in (
                ("smaller", orders[0] != orders[1]),
                ("larger", orders[-1] != orders[-2]),
            ):
                if not ok:
                    continue
                sem = Comparative(kind, color, pick)
                cell = next(iter(resolve_target(_bare(sem), state)))
                if cell_ok(cell, must_be_empty=False):
                    candidates.append(("comparative", sem))

    if "ordinal" in families:
        specs = [
            (d, cell)
            for fam, d, cell in by_cell_ok_directs
            if fam == "direct_size"
        ]
        specs.sort(key=lambda sc: (sc[0].size, sc[0].color, sc[0].kind))
        for i in range(len(specs)):
            for j in range(i + 1, len(specs)):
                for pick in ("former", "latter"):
                    candidates.append(
                        ("ordinal", Ordinal(specs[i][0], specs[j][0], pick))
                    )

    if "conditional" in families:
        present_specs = sorted(
            {_full_spec(o) for o in state.objects},
            key=lambda d: (d.kind, d.color, d.size),
        )
        absent = [
            Direct(*t)
            for t in state.config.triples()
            if not _match_cells(state, Direct(*t))
        ][:2]
        branch_specs = [
            (d, cell) for fam, d, cell in by_cell_ok_directs if fam == "direct_size"
        ]
        for cond in present_specs + absent:
            for then_d, _ in branch_specs:
                for else_d, _ in branch_specs:
                    if then_d == else_d or cond in (then_d, else_d):
                        continue
                    candidates.append(
                        ("conditional", Conditional(cond, then_d, else_d))
                    )

    out: dict[tuple[str, str], Instruction] = {}
    for fam, sem in candidates:
        split = "zero_shot" if combos_in(sem) & held else "train"
        texts_by_lang = {"en": _en_surfaces(fam, sem)}
        if "fr" in languages and fam in ("direct_kind", "direct_color", "direct_size"):
            texts_by_lang["fr"] = [direct_text(sem, "fr")]
        for lang in languages:
            for text in texts_by_lang.get(lang, ()):
                out[(lang, text)] = Instruction(
                    text=text,
                    tokens=tuple(tokenize(text, vocab)),
                    language=lang,
                    semantics=sem,
                    split=split,
                    family=fam,
                )
    return [out[key] for key in sorted(out)]


def _bare(sem: SemanticForm) -> Instruction:
    return Instruction("", (), "en", sem, "train", "probe")


def pick_instruction(candidates: list[Instruction], rng, languages) -> Instruction:
    """Language chosen uniformly among those with feasible instructions, then
    uniform within the language."""
    if not candidates:
        raise GrammarError("empty feasible set; caller must re-reset")
    by_lang: dict[str, list[Instruction]] = {}
    for ins in candidates:
        by_lang.setdefault(ins.language, []).append(ins)
    langs = sorted(by_lang)
    lang = langs[int(rng.integers(len(langs)))]
    group = by_lang[lang]
    return group[int(rng.integers(len(group)))]


def sample_instruction(
    state: WorldState,
    rng,
    split: str = "train",
    split_spec: SplitSpec | None = None,
    families=None,
    languages=("en",),
) -> Instruction:
    """Uniform draw over the feasible instructions of the requested split."""
    candidates = [
        ins
        for ins in feasible_instructions(state, split_spec, families, languages)
        if ins.split == split
    ]
    return pick_instruction(candidates, rng, languages)


def make_zero_shot_split(catalog, k: int = 19, rng=None) -> SplitSpec:
    """Hold out k (attribute, kind) combinations such that every individual
    word still occurs in the train split."""
    if rng is None:
        rng = np.random.default_rng(0)
    if k == 0:
        return SplitSpec(frozenset(), 0)
    color_combos = sorted({(c, e.kind) for e in catalog for c in e.colors})
    size_combos = sorted({(s, e.kind) for e in catalog for s in e.sizes})
    candidates = color_combos + size_combos
    if k >= len(candidates):
        raise GrammarError(
            f"k={k} infeasible: only {len(candidates)} attribute-kind combinations"
        )
    colors = {c for c, _ in color_combos}
    sizes = {s for s, _ in size_combos}
    for _ in range(1000):
        idx = rng.choice(len(candidates), size=k, replace=False)
        held = frozenset(candidates[int(i)] for i in idx)
        color_cover = {c for c, kk in set(color_combos) - held}
        size_cover = {s for s, kk in set(size_combos) - held}
        if colors <= color_cover and sizes <= size_cover:
            return SplitSpec(held, k)
    raise GrammarError(f"could not satisfy word coverage with k={k}")


@lru_cache(maxsize=32)
def split_for_config(config: ScenarioConfig) -> SplitSpec:
    if config.zero_shot_k == 0:
        return SplitSpec(frozenset(), 0)
    rng = np.random.default_rng(
        np.random.SeedSequence((config.rng_seed & 0xFFFFFFFFFFFFFFFF, 0x5EED17))
    )
    return make_zero_shot_split(config.catalog, config.zero_shot_k, rng)


def parse_direct_phrase(text: str) -> Direct:
    """Parse "[size] [color] kind" (used by probe CLI arguments)."""
    words = text.lower().split()
    size = color = None
    if words and words[0] in lexicon.SIZES:
        size = words.pop(0)
    if words and words[0] in lexicon.COLORS:
        color = words.pop(0)
    if len(words) != 1 or words[0] not in lexicon.KINDS:
        raise GrammarError(f"cannot parse direct phrase {text!r}")
    return Direct(words[0], color, size)


def semantics_to_json(sem: SemanticForm) -> dict:
    if isinstance(sem, Direct):
        return {"type": "direct", "kind": sem.kind, "color": sem.color, "size": sem.size}
    if isinstance(sem, Spatial):
        return {
            "type": "spatial",
            "direction": sem.direction,
            "referent": semantics_to_json(sem.referent),
        }
    if isinstance(sem, Corner):
        return {"type": "corner", "which": sem.which}
    if isinstance(sem, Comparative):
        return {"type": "comparative", "kind": sem.kind, "color": sem.color, "pick": sem.pick}
    if isinstance(sem, Ordinal):
        return {
            "type": "ordinal",
            "first": semantics_to_json(sem.first),
            "second": semantics_to_json(sem.second),
            "pick": sem.pick,
        }
    if isinstance(sem, Conditional):
        return {
            "type": "conditional",
            "condition": semantics_to_json(sem.condition),
            "then": semantics_to_json(sem.then),
            "else": semantics_to_json(sem.otherwise),
        }
    raise TypeError(f"unknown semantic form {sem!r}")


def instruction_json(instr: Instruction) -> str:
    return json.dumps(
        {
            "text": instr.text,
            "language": instr.language,
            "semantics": semantics_to_json(instr.semantics),
            "split": instr.split,
            "family": instr.family,
        },
        sort_keys=True,
    )


def vocab_json(vocab: Vocabulary) -> str:
    return json.dumps(vocab.word2id(), sort_keys=True)
