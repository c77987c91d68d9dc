"""Ready-made scenario configurations: the paper-scale default, the small
fast-converging smoke task, and the bilingual grammar for the translation
probe."""
from __future__ import annotations

from .world import CatalogEntry, ScenarioConfig, default_scenario

DIRECT_FAMILIES = ("direct_kind", "direct_color", "direct_size")


def default() -> ScenarioConfig:
    return default_scenario()


def smoke() -> ScenarioConfig:
    """5x5 grid, two objects, full visibility, direct instructions only."""
    catalog = tuple(
        CatalogEntry(kind, ("green", "red"), sizes=("medium",))
        for kind in ("ball", "car", "cup", "tree")
    )
    return ScenarioConfig(
        grid_dims=(5, 5),
        catalog=catalog,
        n_obstacles=0,
        objects_per_episode=(2, 2),
        max_episode_len=25,
        visibility_radius=99.0,
        families=DIRECT_FAMILIES,
        zero_shot_k=0,
    )


def bilingual() -> ScenarioConfig:
    """Desk-scale English/French direct grammar for the translation probe;
    covers the canonical pair "small red car" / "petite voiture rouge"."""
    catalog = tuple(
        CatalogEntry(kind, ("green", "red"), sizes=("small",))
        for kind in ("bag", "car", "chair")
    )
    return ScenarioConfig(
        grid_dims=(5, 5),
        catalog=catalog,
        n_obstacles=0,
        objects_per_episode=(2, 2),
        max_episode_len=25,
        visibility_radius=99.0,
        families=DIRECT_FAMILIES,
        zero_shot_k=0,
        languages=("en", "fr"),
    )


PRESETS = {"default": default, "smoke": smoke, "bilingual": bilingual}
