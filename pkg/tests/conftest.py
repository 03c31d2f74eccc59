"""
Shared fixtures: micro networks, translating videos and relu-kink detection
for finite-difference checks
"""

from typing import List, Sequence, Tuple

import numpy as np
import pytest

from dreamnet import DreamNet, micro_spec, random_weights
from tensor_core import Tensor, float64_precision

# =============================================================================
# Environment
# =============================================================================


@pytest.fixture(autouse=True)
def no_log_files(monkeypatch):
    """Keep test runs from writing dated log files into the working tree"""
    monkeypatch.setenv("LUCID_LOG_DIR", "")
    monkeypatch.delenv("LUCID_CONFIG", raising=False)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


# =============================================================================
# Networks
# =============================================================================


def make_micro_net(seed: int = 0, scale: float = 1.0, tile_size: int = 32, class_count: int = 10) -> DreamNet:
    spec = micro_spec(tile_size=tile_size, class_count=class_count)
    return DreamNet(spec, random_weights(spec, seed=seed, scale=scale))


@pytest.fixture
def micro_net():
    return make_micro_net()


def relu_pattern(net: DreamNet, image: np.ndarray) -> Tuple[np.ndarray, ...]:
    """Which relu units are active; a change between x and x +- h means a kink was crossed"""
    with float64_precision():
        activations = net._forward(Tensor(image))
    return tuple(
        activation.data > 0
        for layer, activation in zip(net.spec.layers, activations)
        if layer.kind in ("conv", "dense") and layer.relu
    )


def smooth_indices(net: DreamNet, image: np.ndarray, count: int, rng, h: float = 1e-3) -> List[Tuple[int, ...]]:
    """Random pixel indices whose central-difference interval crosses no relu kink"""
    base = relu_pattern(net, image)
    chosen: List[Tuple[int, ...]] = []
    for _ in range(50 * count):
        index = tuple(int(rng.integers(dim)) for dim in image.shape)
        if index in chosen:
            continue
        stable = True
        for step in (h, -h):
            probe = np.array(image, dtype=np.float64)
            probe[index] += step
            if any(not np.array_equal(a, b) for a, b in zip(base, relu_pattern(net, probe))):
                stable = False
                break
        if stable:
            chosen.append(index)
        if len(chosen) == count:
            break
    return chosen


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, indices: Sequence[Tuple[int, ...]]) -> float:
    errors = []
    for index in indices:
        a, n = float(analytic[index]), float(numeric[index])
        errors.append(abs(a - n) / max(abs(a), abs(n), 1e-6))
    return max(errors)


# =============================================================================
# Videos
# =============================================================================


def translating_video(count: int, height: int, width: int, dx: int = 2, dy: int = 0, seed: int = 0) -> List[np.ndarray]:
    """
    Frames cut from one canvas, content moving by (dx, dy) pixels per frame, so
    the translation flows (dx, dy) / (-dx, -dy) warp frame i-1 onto frame i exactly
    """
    rng = np.random.default_rng(seed)
    coarse = rng.uniform(0.2, 0.8, size=((height + count * dy) // 4 + 2, (width + count * dx) // 4 + 2, 3))
    canvas = np.kron(coarse, np.ones((4, 4, 1)))[: height + count * dy, : width + count * dx].astype(np.float32)
    frames = []
    for i in range(1, count + 1):
        top = count * dy - (i - 1) * dy
        left = count * dx - (i - 1) * dx
        frames.append(canvas[top : top + height, left : left + width].copy())
    return frames
