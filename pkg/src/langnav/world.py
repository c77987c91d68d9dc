"""Deterministic grid-world dynamics: placement, movement, rewards, termination.

Coordinates are (row, col) with row 0 at the top; "south" is +row. Episodes
are driven functionally: `step` returns a fresh WorldState, so independent
episodes can run concurrently without shared mutable state.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, replace
from enum import IntEnum

import numpy as np

from . import lexicon


class ScenarioError(ValueError):
    """Raised when scenario JSON is malformed or fails validation."""


class PlacementError(RuntimeError):
    """Raised when no feasible layout is found within the retry bound."""


class EpisodeDoneError(RuntimeError):
    """Raised when `step` is called on a finished episode."""


class UnreachableTargetError(RuntimeError):
    """Raised by the path oracle when no target cell can be reached."""


PLACEMENT_RETRIES = 1000
SPLITS = ("train", "zero_shot")


class Action(IntEnum):
    UP = 0
    DOWN = 1
    LEFT = 2
    RIGHT = 3


# Tie-break order for the path oracle: up < down < left < right.
ACTION_DELTAS = {
    Action.UP: (-1, 0),
    Action.DOWN: (1, 0),
    Action.LEFT: (0, -1),
    Action.RIGHT: (0, 1),
}


@dataclass(frozen=True)
class Rewards:
    target: float = 1.0
    wall: float = -1.0
    non_target: float = -0.5
    step: float = 0.0


@dataclass(frozen=True)
class CatalogEntry:
    kind: str
    colors: tuple[str, ...]
    sizes: tuple[str, ...] = lexicon.SIZES


@dataclass(frozen=True)
class ScenarioConfig:
    grid_dims: tuple[int, int] = (10, 10)
    catalog: tuple[CatalogEntry, ...] = ()
    n_obstacles: int = 8
    objects_per_episode: tuple[int, int] = (3, 6)
    max_episode_len: int = 100
    visibility_radius: float = 2.5
    rewards: Rewards = Rewards()
    rng_seed: int = 0
    # Extensions beyond the core schema (documented in the README): restrict
    # the generatable template families, control the held-out combination
    # count, and pick the instruction languages.
    families: tuple[str, ...] | None = None
    zero_shot_k: int = 19
    languages: tuple[str, ...] = ("en",)

    def triples(self) -> tuple[tuple[str, str, str], ...]:
        """Sampling universe: every (kind, color, size) the catalog allows."""
        out = []
        for entry in self.catalog:
            for color in entry.colors:
                for size in entry.sizes:
                    out.append((entry.kind, color, size))
        return tuple(sorted(out))


@dataclass(frozen=True)
class ObjectRecord:
    kind: str
    color: str
    size: str
    cell: tuple[int, int]


@dataclass(frozen=True)
class WorldState:
    config: ScenarioConfig
    grid_dims: tuple[int, int]
    agent: tuple[int, int]
    objects: tuple[ObjectRecord, ...]
    obstacles: frozenset[tuple[int, int]]
    step_count: int = 0
    target_cells: frozenset[tuple[int, int]] = frozenset()
    done: bool = False
    success: bool = False

    def in_bounds(self, cell: tuple[int, int]) -> bool:
        r, c = cell
        return 0 <= r < self.grid_dims[0] and 0 <= c < self.grid_dims[1]

    def object_at(self, cell: tuple[int, int]) -> ObjectRecord | None:
        for obj in self.objects:
            if obj.cell == cell:
                return obj
        return None


@dataclass(frozen=True)
class StepResult:
    reward: float
    done: bool
    success: bool
    event: str  # moved|blocked_wall|blocked_boundary|non_target_contact|target_reached|timeout


def default_catalog() -> tuple[CatalogEntry, ...]:
    return tuple(
        CatalogEntry(kind, lexicon.KIND_COLORS[kind]) for kind in lexicon.KINDS
    )


def default_scenario() -> ScenarioConfig:
    return ScenarioConfig(catalog=default_catalog())


_SCHEMA_KEYS = (
    "grid_dims",
    "catalog",
    "n_obstacles",
    "objects_per_episode",
    "max_episode_len",
    "visibility_radius",
    "rewards",
    "rng_seed",
    "families",
    "zero_shot_k",
    "languages",
)

FAMILY_NAMES = (
    "direct_kind",
    "direct_color",
    "direct_size",
    "target_of",
    "spatial",
    "corner",
    "exist_color",
    "exist_size",
    "comparative",
    "ordinal",
    "conditional",
)


def _require(cond: bool, key: str, msg: str) -> None:
    if not cond:
        raise ScenarioError(f"{key}: {msg}")


def _parse_catalog(raw) -> tuple[CatalogEntry, ...]:
    _require(isinstance(raw, list) and raw, "catalog", "must be a non-empty list")
    entries = []
    seen = set()
    for item in raw:
        _require(isinstance(item, dict), "catalog", "entries must be objects")
        unknown = set(item) - {"kind", "colors", "sizes"}
        _require(not unknown, "catalog", f"unknown entry keys {sorted(unknown)}")
        kind = item.get("kind")
        _require(kind in lexicon.KINDS, "catalog.kind", f"unknown kind {kind!r}")
        _require(kind not in seen, "catalog.kind", f"duplicate kind {kind!r}")
        seen.add(kind)
        colors = tuple(item.get("colors", ()))
        _require(len(colors) > 0, "catalog.colors", f"{kind}: at least one color")
        for color in colors:
            _require(
                color in lexicon.COLORS, "catalog.colors", f"unknown color {color!r}"
            )
        sizes = tuple(item.get("sizes", lexicon.SIZES))
        _require(len(sizes) > 0, "catalog.sizes", f"{kind}: at least one size")
        for size in sizes:
            _require(size in lexicon.SIZES, "catalog.sizes", f"unknown size {size!r}")
        entries.append(CatalogEntry(kind, colors, sizes))
    return tuple(entries)


def load_scenario(json_text: str) -> ScenarioConfig:
    """Parse and validate scenario JSON; omitted keys take documented defaults."""
    try:
        raw = json.loads(json_text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"malformed JSON: {exc}") from exc
    _require(isinstance(raw, dict), "<root>", "scenario must be a JSON object")
    unknown = set(raw) - set(_SCHEMA_KEYS)
    _require(not unknown, "<root>", f"unknown keys {sorted(unknown)}")

    base = default_scenario()
    grid_dims = tuple(raw.get("grid_dims", base.grid_dims))
    _require(
        len(grid_dims) == 2 and all(isinstance(d, int) for d in grid_dims),
        "grid_dims",
        "must be two integers",
    )
    _require(min(grid_dims) >= 2, "grid_dims", "dims must be >= 2")

    catalog = _parse_catalog(raw["catalog"]) if "catalog" in raw else base.catalog

    n_obstacles = raw.get("n_obstacles", base.n_obstacles)
    _require(
        isinstance(n_obstacles, int) and n_obstacles >= 0,
        "n_obstacles",
        "must be a non-negative integer",
    )

    ope = tuple(raw.get("objects_per_episode", base.objects_per_episode))
    _require(
        len(ope) == 2 and all(isinstance(v, int) for v in ope) and 1 <= ope[0] <= ope[1],
        "objects_per_episode",
        "must be an integer range [lo, hi] with lo >= 1",
    )
    capacity = sum(len(e.colors) * len(e.sizes) for e in catalog)
    _require(ope[1] <= capacity, "objects_per_episode", f"hi exceeds catalog capacity {capacity}")

    max_len = raw.get("max_episode_len", base.max_episode_len)
    _require(isinstance(max_len, int) and max_len >= 1, "max_episode_len", "must be >= 1")

    radius = float(raw.get("visibility_radius", base.visibility_radius))
    _require(radius > 0, "visibility_radius", "must be > 0")

    rw_raw = raw.get("rewards", {})
    _require(isinstance(rw_raw, dict), "rewards", "must be an object")
    unknown = set(rw_raw) - {"target", "wall", "non_target", "step"}
    _require(not unknown, "rewards", f"unknown keys {sorted(unknown)}")
    rewards = Rewards(
        target=float(rw_raw.get("target", base.rewards.target)),
        wall=float(rw_raw.get("wall", base.rewards.wall)),
        non_target=float(rw_raw.get("non_target", base.rewards.non_target)),
        step=float(rw_raw.get("step", base.rewards.step)),
    )
    for name in ("target", "wall", "non_target", "step"):
        _require(np.isfinite(getattr(rewards, name)), f"rewards.{name}", "must be finite")

    rng_seed = raw.get("rng_seed", base.rng_seed)
    _require(isinstance(rng_seed, int), "rng_seed", "must be an integer")

    families = raw.get("families")
    if families is not None:
        families = tuple(families)
        _require(len(families) > 0, "families", "must be non-empty when given")
        for fam in families:
            _require(fam in FAMILY_NAMES, "families", f"unknown family {fam!r}")

    zero_shot_k = raw.get("zero_shot_k", base.zero_shot_k)
    _require(
        isinstance(zero_shot_k, int) and zero_shot_k >= 0,
        "zero_shot_k",
        "must be a non-negative integer",
    )

    languages = tuple(raw.get("languages", base.languages))
    _require(len(languages) > 0, "languages", "must be non-empty")
    for lang in languages:
        _require(lang in ("en", "fr"), "languages", f"unknown language {lang!r}")

    return ScenarioConfig(
        grid_dims=grid_dims,
        catalog=catalog,
        n_obstacles=n_obstacles,
        objects_per_episode=ope,
        max_episode_len=max_len,
        visibility_radius=radius,
        rewards=rewards,
        rng_seed=rng_seed,
        families=families,
        zero_shot_k=zero_shot_k,
        languages=languages,
    )


def scenario_to_json(config: ScenarioConfig) -> str:
    doc = {
        "grid_dims": list(config.grid_dims),
        "catalog": [
            {"kind": e.kind, "colors": list(e.colors), "sizes": list(e.sizes)}
            for e in config.catalog
        ],
        "n_obstacles": config.n_obstacles,
        "objects_per_episode": list(config.objects_per_episode),
        "max_episode_len": config.max_episode_len,
        "visibility_radius": config.visibility_radius,
        "rewards": {
            "target": config.rewards.target,
            "wall": config.rewards.wall,
            "non_target": config.rewards.non_target,
            "step": config.rewards.step,
        },
        "rng_seed": config.rng_seed,
        "families": list(config.families) if config.families is not None else None,
        "zero_shot_k": config.zero_shot_k,
        "languages": list(config.languages),
    }
    if doc["families"] is None:
        del doc["families"]
    return json.dumps(doc, indent=2, sort_keys=True)


def _bfs_cells(
    start: tuple[int, int],
    blocked: set[tuple[int, int]],
    dims: tuple[int, int],
) -> dict[tuple[int, int], tuple[int, int] | None]:
    """Cells reachable from start avoiding `blocked`; maps cell -> BFS parent."""
    rows, cols = dims
    parents: dict[tuple[int, int], tuple[int, int] | None] = {start: None}
    queue = deque([start])
    while queue:
        cell = queue.popleft()
        r, c = cell
        for action in Action:
            dr, dc = ACTION_DELTAS[action]
            nxt = (r + dr, c + dc)
            if not (0 <= nxt[0] < rows and 0 <= nxt[1] < cols):
                continue
            if nxt in blocked or nxt in parents:
                continue
            parents[nxt] = cell
            queue.append(nxt)
    return parents


def objects_reachable(
    agent: tuple[int, int],
    objects: tuple[ObjectRecord, ...],
    obstacles: frozenset[tuple[int, int]],
    dims: tuple[int, int],
) -> bool:
    """Every object reachable by a 4-connected path avoiding obstacles and the
    other objects."""
    cells = [o.cell for o in objects]
    for i, cell in enumerate(cells):
        blocked = set(obstacles)
        blocked.update(c for j, c in enumerate(cells) if j != i)
        if cell not in _bfs_cells(agent, blocked, dims):
            return False
    return True


def cell_reachable(state: WorldState, cell: tuple[int, int]) -> bool:
    """Reachable from the agent avoiding obstacles (object cells are passable)."""
    return cell in _bfs_cells(state.agent, set(state.obstacles), state.grid_dims)


def reset(
    config: ScenarioConfig, seed: int, split: str = "train"
):
    """Sample a fresh episode: layout, instruction, target cells.

    Identical (config, seed, split) yields identical output. Layouts where an
    object is unreachable or no instruction of the requested split is feasible
    are resampled, up to PLACEMENT_RETRIES.
    """
    from . import langgen  # runtime import; langgen only needs world types

    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    rng = np.random.default_rng(
        np.random.SeedSequence((seed & 0xFFFFFFFFFFFFFFFF, SPLITS.index(split), 0xC0DE))
    )
    triples = config.triples()
    rows, cols = config.grid_dims
    n_cells = rows * cols
    lo, hi = config.objects_per_episode
    split_spec = langgen.split_for_config(config)

    for _ in range(PLACEMENT_RETRIES):
        k = int(rng.integers(lo, hi + 1))
        if 1 + k + config.n_obstacles > n_cells:
            raise PlacementError(
                f"grid has {n_cells} cells; cannot place agent, {k} objects "
                f"and {config.n_obstacles} obstacles"
            )
        chosen = rng.choice(len(triples), size=k, replace=False)
        flat = rng.choice(n_cells, size=1 + k + config.n_obstacles, replace=False)
        cells = [(int(f) // cols, int(f) % cols) for f in flat]
        agent = cells[0]
        objects = tuple(
            ObjectRecord(*triples[int(t)], cell=cells[1 + i])
            for i, t in enumerate(chosen)
        )
        obstacles = frozenset(cells[1 + k :])
        if not objects_reachable(agent, objects, obstacles, config.grid_dims):
            continue
        state = WorldState(
            config=config,
            grid_dims=config.grid_dims,
            agent=agent,
            objects=objects,
            obstacles=obstacles,
        )
        candidates = langgen.feasible_instructions(
            state,
            split_spec=split_spec,
            families=config.families,
            languages=config.languages,
        )
        candidates = [ins for ins in candidates if ins.split == split]
        if not candidates:
            continue
        instr = langgen.pick_instruction(candidates, rng, config.languages)
        targets = langgen.resolve_target(instr, state)
        return replace(state, target_cells=frozenset(targets)), instr
    raise PlacementError(
        f"no feasible layout within {PLACEMENT_RETRIES} attempts "
        f"(split={split!r}); the scenario is over-dense or over-constrained"
    )


def step(state: WorldState, action: Action) -> tuple[WorldState, StepResult]:
    """Advance one step; boundary exits and obstacle bumps block in place."""
    if state.done:
        raise EpisodeDoneError("step() called on a finished episode")
    rewards = state.config.rewards
    action = Action(action)
    dr, dc = ACTION_DELTAS[action]
    candidate = (state.agent[0] + dr, state.agent[1] + dc)
    step_count = state.step_count + 1
    timeout = step_count >= state.config.max_episode_len

    if not state.in_bounds(candidate):
        reward, event, agent = rewards.wall, "blocked_boundary", state.agent
        done, success = timeout, False
    elif candidate in state.obstacles:
        reward, event, agent = rewards.wall, "blocked_wall", state.agent
        done, success = timeout, False
    elif candidate in state.target_cells:
        reward, event, agent = rewards.target, "target_reached", candidate
        done, success = True, True
    elif state.object_at(candidate) is not None:
        reward, event, agent = rewards.non_target, "non_target_contact", candidate
        done, success = timeout, False
    else:
        reward, event, agent = rewards.step, "moved", candidate
        done, success = timeout, False
        if timeout:
            event = "timeout"

    new_state = replace(
        state, agent=agent, step_count=step_count, done=done, success=success
    )
    return new_state, StepResult(reward=reward, done=done, success=success, event=event)


def shortest_path_oracle(state: WorldState) -> list[Action]:
    """BFS-shortest action sequence from the agent to any target cell.

    Prefers paths that avoid non-target object cells; falls back to passing
    through them when no clean path exists. Ties break by action order
    up < down < left < right via first-discovery BFS.
    """
    if not state.target_cells:
        raise UnreachableTargetError("state has no target cells")
    non_target_objects = {
        o.cell for o in state.objects if o.cell not in state.target_cells
    }
    for blocked in (
        set(state.obstacles) | non_target_objects,
        set(state.obstacles),
    ):
        blocked -= state.target_cells
        blocked.discard(state.agent)
        parents = _bfs_cells(state.agent, blocked, state.grid_dims)
        hits = [c for c in parents if c in state.target_cells]
        if not hits:
            continue
        # first-discovery BFS ranks equal-distance targets consistently; pick
        # the one whose reconstructed path is shortest, then lexicographic
        best = None
        for target in hits:
            path = []
            cell = target
            while parents[cell] is not None:
                prev = parents[cell]
                delta = (cell[0] - prev[0], cell[1] - prev[1])
                act = next(a for a, d in ACTION_DELTAS.items() if d == delta)
                path.append(act)
                cell = prev
            path.reverse()
            key = (len(path), [int(a) for a in path])
            if best is None or key < best[0]:
                best = (key, path)
        return best[1]
    raise UnreachableTargetError(f"no path from {state.agent} to {sorted(state.target_cells)}")
