"""Rasterize world states into the agent's 84x84x3 RGB observation.

Each grid cell maps to a square tile on an 80x80 canvas centered in the 84x84
frame (a 10x10 grid gives the canonical 8-pixel tiles with a 2-pixel margin).
Object kinds draw as distinct procedural glyphs; the glyph box scales with the
size attribute (tile/2, 3*tile/4, tile). Partial observability blackens pixels
whose centers lie beyond the visibility radius from the agent cell center.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import lexicon
from .world import WorldState

FRAME_HW = 84
CANVAS_HW = 80

BACKGROUND = (0, 0, 0)
OBSTACLE_RGB = (128, 128, 128)
AGENT_RGB = (255, 255, 255)


def _grid(s: int) -> tuple[np.ndarray, np.ndarray, float]:
    y, x = np.mgrid[0:s, 0:s].astype(np.float64)
    return y, x, (s - 1) / 2.0


def _solid(s):
    return np.ones((s, s), bool)


def _ring(s):
    y, x, _ = _grid(s)
    return (x == 0) | (y == 0) | (x == s - 1) | (y == s - 1)


def _disc(s):
    y, x, c = _grid(s)
    return (x - c) ** 2 + (y - c) ** 2 <= (s / 2.0) ** 2


def _diamond(s):
    y, x, c = _grid(s)
    # at s=4 the full-radius diamond degenerates into the disc; keep it tight
    thr = c if s == 4 else s / 2.0
    return np.abs(x - c) + np.abs(y - c) <= thr


def _plus(s):
    y, x, _ = _grid(s)
    cf = (s - 1) // 2
    return (x == cf) | (y == cf)


def _cross(s):
    y, x, _ = _grid(s)
    return (x == y) | (x + y == s - 1)


def _hbars(s):
    y, _, _ = _grid(s)
    return y.astype(int) % 2 == 0


def _vbars(s):
    _, x, _ = _grid(s)
    return x.astype(int) % 2 == 0


def _checker(s):
    y, x, _ = _grid(s)
    return (x.astype(int) + y.astype(int)) % 2 == 0


def _tri_up(s):
    y, x, c = _grid(s)
    return np.abs(x - c) <= (y + 1) / 2.0


def _tri_down(s):
    return _tri_up(s)[::-1].copy()


def _tri_right(s):
    return _tri_up(s).T[:, ::-1].copy()


def _tri_left(s):
    return _tri_up(s).T.copy()


def _corner_l(s):
    y, x, _ = _grid(s)
    return (x == 0) | (y == s - 1)


def _tee(s):
    y, x, c = _grid(s)
    return (y == 0) | (np.abs(x - c) < max(s / 6.0, 0.51))


def _cup_u(s):
    y, x, _ = _grid(s)
    return (x == 0) | (x == s - 1) | (y == s - 1)


def _aitch(s):
    y, x, c = _grid(s)
    return (x == 0) | (x == s - 1) | (np.abs(y - c) < max(s / 6.0, 0.51))


def _zed(s):
    y, x, _ = _grid(s)
    w = max(s / 6.0, 0.51)
    return (y == 0) | (y == s - 1) | (np.abs(x + y - (s - 1)) < 2 * w)


def _eye(s):
    y, x, c = _grid(s)
    return (y == 0) | (y == s - 1) | (np.abs(x - c) < max(s / 6.0, 0.51))


def _dots(s):
    y, x, _ = _grid(s)
    cf = (s - 1) // 2
    m = (np.abs(x - cf) <= s / 8.0) & (np.abs(y - cf) <= s / 8.0)
    m[0, 0] = m[0, -1] = m[-1, 0] = m[-1, -1] = True
    return m


def _hourglass(s):
    y, x, c = _grid(s)
    return np.abs(x - c) < np.abs(y - c)


SHAPES = (
    _solid,
    _ring,
    _disc,
    _diamond,
    _plus,
    _cross,
    _hbars,
    _vbars,
    _checker,
    _tri_up,
    _tri_down,
    _tri_left,
    _tri_right,
    _corner_l,
    _tee,
    _cup_u,
    _aitch,
    _zed,
    _eye,
    _dots,
    _hourglass,
)

KIND_SHAPE = {kind: SHAPES[i % len(SHAPES)] for i, kind in enumerate(lexicon.KINDS)}


@lru_cache(maxsize=256)
def glyph_stencil(kind: str, size_px: int) -> np.ndarray:
    mask = KIND_SHAPE[kind](size_px)
    mask.setflags(write=False)
    return mask


def geometry(grid_dims: tuple[int, int]) -> tuple[int, int, int]:
    """(tile_px, row_offset, col_offset) of the grid block inside the frame."""
    rows, cols = grid_dims
    tile = CANVAS_HW // max(rows, cols)
    if tile < 4:
        raise ValueError(f"grid {grid_dims} too large to rasterize at {FRAME_HW}px")
    return tile, (FRAME_HW - rows * tile) // 2, (FRAME_HW - cols * tile) // 2


def glyph_px(tile: int, size: str) -> int:
    return {"small": tile // 2, "medium": (3 * tile) // 4, "large": tile}[size]


def _stamp(frame: np.ndarray, cell, grid_dims, mask: np.ndarray, rgb) -> None:
    tile, off_r, off_c = geometry(grid_dims)
    g = mask.shape[0]
    r0 = off_r + cell[0] * tile + (tile - g) // 2
    c0 = off_c + cell[1] * tile + (tile - g) // 2
    frame[r0 : r0 + g, c0 : c0 + g][mask] = rgb


@lru_cache(maxsize=128)
def _static_layer(grid_dims, objects, obstacles) -> np.ndarray:
    frame = np.zeros((FRAME_HW, FRAME_HW, 3), dtype=np.uint8)
    tile, _, _ = geometry(grid_dims)
    for cell in sorted(obstacles):
        _stamp(frame, cell, grid_dims, np.ones((tile, tile), bool), OBSTACLE_RGB)
    for obj in objects:
        mask = glyph_stencil(obj.kind, glyph_px(tile, obj.size))
        _stamp(frame, obj.cell, grid_dims, mask, lexicon.COLOR_RGB[obj.color])
    frame.setflags(write=False)
    return frame


def rasterize(state: WorldState) -> np.ndarray:
    """Full bird's-eye frame (no visibility mask), deterministic per state."""
    frame = _static_layer(state.grid_dims, state.objects, state.obstacles).copy()
    tile, _, _ = geometry(state.grid_dims)
    _stamp(frame, state.agent, state.grid_dims, _diamond(tile), AGENT_RGB)
    return frame


@lru_cache(maxsize=4096)
def _radius_mask(grid_dims, agent_cell, radius: float) -> np.ndarray:
    tile, off_r, off_c = geometry(grid_dims)
    cy = off_r + (agent_cell[0] + 0.5) * tile
    cx = off_c + (agent_cell[1] + 0.5) * tile
    y, x = np.mgrid[0:FRAME_HW, 0:FRAME_HW].astype(np.float64)
    mask = (y + 0.5 - cy) ** 2 + (x + 0.5 - cx) ** 2 <= (radius * tile) ** 2
    mask.setflags(write=False)
    return mask


def apply_visibility_mask(
    frame: np.ndarray,
    agent_cell: tuple[int, int],
    radius: float,
    grid_dims: tuple[int, int],
) -> np.ndarray:
    """Keep pixels whose centers lie within `radius` cells (Euclidean) of the
    agent-cell center; blacken the rest."""
    if radius <= 0:
        raise ValueError("radius must be > 0")
    mask = _radius_mask(grid_dims, tuple(agent_cell), float(radius))
    return np.where(mask[:, :, None], frame, np.uint8(0))


def observe(state: WorldState) -> np.ndarray:
    """The agent's observation: rasterized frame with the visibility mask."""
    return apply_visibility_mask(
        rasterize(state), state.agent, state.config.visibility_radius, state.grid_dims
    )


def save_png(frame: np.ndarray, path) -> None:
    from PIL import Image

    Image.fromarray(frame).save(path)


def attention_to_png(att_map: np.ndarray, path, scale: int = 12) -> None:
    """Min-max normalized grayscale PNG of one attention map, nearest-upscaled."""
    amin, amax = float(att_map.min()), float(att_map.max())
    norm = (att_map - amin) / (amax - amin) if amax > amin else np.zeros_like(att_map)
    img = (norm * 255).astype(np.uint8)
    img = np.repeat(np.repeat(img, scale, axis=0), scale, axis=1)
    save_png(np.stack([img] * 3, axis=-1), path)
