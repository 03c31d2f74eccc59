"""
Randomized Circular Tiling
Rolls a frame so a random origin becomes (0, 0), cuts it into disjoint TxT tiles
and leaves the H%T / W%T band as an untouched margin for that schedule
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np

from errors import ContractError, UnsupportedSizeError
from tensor_core import Tensor

logger = logging.getLogger(__name__)

TileUpdate = Callable[[np.ndarray, Tuple[int, int]], np.ndarray]


@dataclass(frozen=True)
class TileSchedule:
    """One origin selection: tiles are disjoint TxT blocks in rolled coordinates"""

    origin: Tuple[int, int]
    tile_size: int
    grid: Tuple[int, int]
    margins: Tuple[int, int]
    seed_state: Optional[dict] = None

    @property
    def corners(self) -> List[Tuple[int, int]]:
        """Top-left corner of every tile in rolled coordinates, row-major"""
        rows, cols = self.grid
        size = self.tile_size
        return [(r * size, c * size) for r in range(rows) for c in range(cols)]


def frame_rng(seed: int, index: int) -> np.random.Generator:
    """PCG64 stream for frame `index`, split from the global seed"""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(index)])))


def _spatial(image):
    if isinstance(image, Tensor):
        return image.data, True
    return np.asarray(image), False


def roll(image, origin: Tuple[int, int]):
    """output[r][c] = input[(r + origin_row) mod H][(c + origin_col) mod W]"""
    data, is_tensor = _spatial(image)
    rolled = np.roll(data, shift=(-int(origin[0]), -int(origin[1])), axis=(0, 1))
    return Tensor(rolled) if is_tensor else rolled


def unroll(image, origin: Tuple[int, int]):
    """Exact inverse of roll"""
    data, is_tensor = _spatial(image)
    restored = np.roll(data, shift=(int(origin[0]), int(origin[1])), axis=(0, 1))
    return Tensor(restored) if is_tensor else restored


def make_schedule(height: int, width: int, tile_size: int, rng: np.random.Generator) -> TileSchedule:
    """Origin uniform over all H*W positions; grid floor(H/T) x floor(W/T)"""
    if tile_size <= 0 or tile_size > height or tile_size > width:
        raise UnsupportedSizeError(f"frame {height}x{width} is smaller than the {tile_size}x{tile_size} tile")
    state = rng.bit_generator.state
    origin = (int(rng.integers(height)), int(rng.integers(width)))
    logger.debug(f"tile origin {origin} on {height}x{width}, T={tile_size}")
    return TileSchedule(
        origin=origin,
        tile_size=tile_size,
        grid=(height // tile_size, width // tile_size),
        margins=(height % tile_size, width % tile_size),
        seed_state=state,
    )


def coverage_mask(schedule: TileSchedule, height: int, width: int) -> np.ndarray:
    """Pixels (original coordinates) that the schedule's tiles cover"""
    rows, cols = schedule.grid
    covered = np.zeros((height, width), dtype=bool)
    covered[: rows * schedule.tile_size, : cols * schedule.tile_size] = True
    return unroll(covered, schedule.origin)


def apply_tilewise(image, schedule: TileSchedule, update: TileUpdate, max_workers: int = 1):
    """
    Roll, replace every grid tile with update(tile, corner), unroll.
    Margin pixels are left untouched; tiles are disjoint so execution order
    does not change the result.
    """
    data, is_tensor = _spatial(image)
    rolled = roll(data, schedule.origin)
    size = schedule.tile_size

    def run(corner: Tuple[int, int]) -> Tuple[Tuple[int, int], np.ndarray]:
        row, col = corner
        tile = rolled[row : row + size, col : col + size].copy()
        updated = np.asarray(update(tile, corner))
        if updated.shape != tile.shape:
            raise ContractError(f"tile update changed shape {tile.shape} -> {updated.shape}")
        return corner, updated

    corners = schedule.corners
    if max_workers > 1 and len(corners) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            results = list(pool.map(run, corners))
    else:
        results = [run(corner) for corner in corners]

    for (row, col), updated in results:
        rolled[row : row + size, col : col + size] = updated
    restored = unroll(rolled, schedule.origin)
    return Tensor(restored) if is_tensor else restored
