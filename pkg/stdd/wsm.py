"""
Window shift masking.

Builds the periodic per-frame retention maps that keep a fraction of patch
tokens inside repeated spatial windows, shifting the retained cells by one
window position per frame, and applies them to token grids.
"""
import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import tensor as tn
from .errors import ConfigurationError, DimensionError, InvariantError

logger = logging.getLogger(__name__)

MASK_STRATEGIES = ("repeat_window_shift", "random", "random_shift", "uniform_shift", "random_window_shift")


@dataclass(frozen=True)
class TokenGrid:
    """
    Patch grid of one frame.

    Attributes:
        rows (int): L1, patch rows (H / P)
        cols (int): L2, patch columns (W / P)
    """
    rows: int
    cols: int

    @property
    def n(self):
        return self.rows * self.cols

    @classmethod
    def from_frame(cls, height, width, patch):
        """
        Build the grid for an H x W frame cut into P x P patches.

        Raises:
            ConfigurationError: If H or W is not divisible by P
        """
        if patch < 1:
            raise ConfigurationError(f"patch size must be positive, got {patch}", key="patch")
        if height % patch != 0:
            raise ConfigurationError(f"height {height} is not divisible by patch {patch}", key="height")
        if width % patch != 0:
            raise ConfigurationError(f"width {width} is not divisible by patch {patch}", key="width")
        return cls(height // patch, width // patch)


@dataclass(frozen=True)
class WindowSpec:
    """
    Repeated masking window.

    Attributes:
        w1 (int): Window extent in patch rows
        w2 (int): Window extent in patch columns
        ratio (float): r, fraction of tokens retained as window-shifted tokens
    """
    w1: int = 2
    w2: int = 2
    ratio: float = 0.5

    @property
    def cells(self):
        return self.w1 * self.w2

    @property
    def keep_per_window(self):
        """
        r * w1 * w2 as an exact integer.

        Raises:
            ConfigurationError: If the product is not a positive integer
        """
        keep = Fraction(self.ratio).limit_denominator(10**6) * self.cells
        if keep.denominator != 1 or keep <= 0 or keep > self.cells:
            raise ConfigurationError(
                f"mask ratio {self.ratio} x window {self.w1}x{self.w2} is not a positive integer cell count",
                key="mask_ratio")
        return int(keep)

    def validate(self, grid):
        """
        Check the window against a grid.

        Raises:
            ConfigurationError: On a non-tiling window or fractional keep count
        """
        if self.w1 < 1 or grid.rows % self.w1 != 0:
            raise ConfigurationError(f"window height {self.w1} does not tile {grid.rows} patch rows", key="window_h")
        if self.w2 < 1 or grid.cols % self.w2 != 0:
            raise ConfigurationError(f"window width {self.w2} does not tile {grid.cols} patch columns", key="window_w")
        return self.keep_per_window


def visible_count(grid, win):
    """
    N' = r * N, cross-checked against (L1/w1 * L2/w2) * (r * w1 * w2).

    Returns:
        int: Retained tokens per frame

    Raises:
        InvariantError: If the window-wise count differs from r * N
    """
    keep = win.validate(grid)
    windows = (grid.rows // win.w1) * (grid.cols // win.w2)
    n_prime = windows * keep
    expected = Fraction(win.ratio).limit_denominator(10**6) * grid.n
    if expected != n_prime:
        raise InvariantError(f"visible count {n_prime} from windows differs from r * N = {expected}")
    return n_prime


@dataclass(frozen=True)
class MaskSchedule:
    """
    Per-frame retention maps, identical for every layer.

    Attributes:
        maps (np.ndarray): [T, N] bool, True = retained (window-shifted) token
        period (int): Frames after which the maps repeat
        visible_index (np.ndarray): [T, N'] ascending flat indices of retained cells
        strategy (str): Name of the generating strategy
        layers (int): Number of layers the schedule serves
    """
    maps: np.ndarray
    period: int
    visible_index: np.ndarray
    strategy: str = "repeat_window_shift"
    layers: int = 1
    grid: TokenGrid = field(default=None)

    @property
    def frames(self):
        return self.maps.shape[0]

    @property
    def n_visible(self):
        return self.visible_index.shape[1]

    def map_for(self, t, layer=0):
        if not 0 <= layer < max(self.layers, 1):
            raise ConfigurationError(f"layer {layer} outside schedule built for {self.layers} layers", key="layers")
        return self.maps[t]

    def to_json(self):
        return json.dumps({"period": int(self.period),
                           "maps": [[int(v) for v in row] for row in self.maps]})


def _window_layout(grid, win):
    """Window id and row-major in-window position for every flat cell index."""
    r = np.arange(grid.rows)[:, None]
    c = np.arange(grid.cols)[None, :]
    windows_per_row = grid.cols // win.w2
    window_id = (r // win.w1) * windows_per_row + (c // win.w2)
    position = (r % win.w1) * win.w2 + (c % win.w2)
    return window_id.reshape(-1), position.reshape(-1)


def _first_frame_pattern(strategy, grid, win, keep, rng):
    """[windows, cells] bool pattern of frame 0, indexed by in-window position."""
    n_windows = (grid.rows // win.w1) * (grid.cols // win.w2)
    pattern = np.zeros((n_windows, win.cells), dtype=bool)
    if strategy == "repeat_window_shift":
        pattern[:, :keep] = True
    elif strategy == "random_shift":
        pattern[:, rng.choice(win.cells, keep, replace=False)] = True
    elif strategy == "random_window_shift":
        for w in range(n_windows):
            pattern[w, rng.choice(win.cells, keep, replace=False)] = True
    elif strategy == "uniform_shift":
        n_prime = n_windows * keep
        flat = np.floor(np.arange(n_prime) * grid.n / n_prime).astype(np.int64)
        window_id, position = _window_layout(grid, win)
        pattern[window_id[flat], position[flat]] = True
    return pattern


def _minimal_period(maps, cells):
    frames = maps.shape[0]
    for p in range(1, cells + 1):
        if cells % p == 0 and all(np.array_equal(maps[t], maps[(t + p) % frames]) for t in range(frames)):
            return p
    return cells


def build_mask_schedule(grid, win, frames, layers=1, strategy="repeat_window_shift", seed=0):
    """
    Generate the retention maps for `frames` frames.

    For the shifting strategies, frame t (0-based) retains in-window cell c iff
    the frame-0 pattern retains cell (c - t) mod (w1*w2). With the default
    `repeat_window_shift` pattern that is ((c - t) mod (w1*w2)) < r*w1*w2 in
    every window.

    Args:
        grid (TokenGrid): Patch grid
        win (WindowSpec): Window and keep ratio
        frames (int): T
        layers (int): L; the same maps serve every layer
        strategy (str): One of MASK_STRATEGIES
        seed (int): Seed for the randomized strategies

    Returns:
        MaskSchedule

    Raises:
        ConfigurationError: On invalid window, ratio, frame count or strategy
    """
    if strategy not in MASK_STRATEGIES:
        raise ConfigurationError(f"unknown mask strategy '{strategy}'", key="mask_strategy")
    if frames < 1:
        raise ConfigurationError(f"frame count must be positive, got {frames}", key="frames")
    keep = win.validate(grid)
    rng = np.random.default_rng(seed)
    n_prime = visible_count(grid, win)

    if strategy == "random":
        maps = np.zeros((frames, grid.n), dtype=bool)
        for t in range(frames):
            maps[t, rng.choice(grid.n, n_prime, replace=False)] = True
        period = frames
    else:
        pattern = _first_frame_pattern(strategy, grid, win, keep, rng)
        window_id, position = _window_layout(grid, win)
        horizon = max(frames, win.cells)
        shifts = np.arange(horizon)[:, None]
        maps_full = pattern[window_id[None, :], (position[None, :] - shifts) % win.cells]
        period = _minimal_period(maps_full[:win.cells], win.cells)
        maps = maps_full[:frames]

    visible = np.stack([np.flatnonzero(row) for row in maps]).astype(np.int64)
    maps.setflags(write=False)
    visible.setflags(write=False)
    logger.debug("mask schedule %s: T=%d N=%d N'=%d period=%d", strategy, frames, grid.n, n_prime, period)
    return MaskSchedule(maps=maps, period=period, visible_index=visible,
                        strategy=strategy, layers=layers, grid=grid)


def apply_mask(z_t, map_t):
    """
    Select the retained patch rows of one frame's tokens (row 0 is CLS, never kept).

    Args:
        z_t (Tensor): [..., N+1, D]
        map_t (array-like): [N] visibility map

    Returns:
        tuple[Tensor, np.ndarray]: ([..., N', D] rows in ascending cell order, kept_idx)

    Raises:
        DimensionError: If the token rows do not match the map
    """
    map_t = np.asarray(map_t, dtype=bool)
    if z_t.shape[-2] != map_t.shape[0] + 1:
        raise DimensionError(f"apply_mask: {z_t.shape[-2]} token rows for a map of {map_t.shape[0]} cells")
    kept_idx = np.flatnonzero(map_t)
    return tn.gather_rows(z_t, kept_idx + 1), kept_idx


def apply_schedule(z, schedule):
    """
    Batched `apply_mask` over every frame of a clip.

    Args:
        z (Tensor): [..., T, N+1, D]
        schedule (MaskSchedule): Maps for the same T and N

    Returns:
        tuple[Tensor, np.ndarray]: ([..., T, N', D], kept_idx [T, N'])
    """
    if z.shape[-3] != schedule.frames or z.shape[-2] != schedule.maps.shape[1] + 1:
        raise DimensionError(
            f"apply_schedule: tokens {z.shape} do not fit a schedule of {schedule.maps.shape}")
    kept = schedule.visible_index
    return tn.gather_rows(z, kept + 1), kept
