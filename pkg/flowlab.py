"""
Optical Flow Lab
Middlebury .flo ingestion, backward warping, forward-backward consistency masks,
shot-change statistics and analytic flow fields for fixtures
"""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from dream_config import get_consistency_settings
from errors import (
    DimensionError,
    FormatError,
    MagicError,
    MissingInputError,
    ShapeError,
    TruncatedError,
    ValidationError,
)
from tensor_core import Tensor, as_tensor

logger = logging.getLogger(__name__)

FLO_MAGIC = 202021.25
FLO_HEADER_BYTES = 12


@dataclass
class FlowField:
    """Per-pixel (u, v) displacement from frame `source` to frame `target`"""

    uv: np.ndarray
    source: int = 0
    target: int = 1

    def __post_init__(self):
        self.uv = np.asarray(self.uv, dtype=np.float32)
        if self.uv.ndim != 3 or self.uv.shape[2] != 2:
            raise ShapeError(f"flow must be HxWx2, got {self.uv.shape}")
        if not np.all(np.isfinite(self.uv)):
            raise ValidationError("flow contains non-finite values")

    @property
    def height(self) -> int:
        return self.uv.shape[0]

    @property
    def width(self) -> int:
        return self.uv.shape[1]

    @property
    def u(self) -> np.ndarray:
        return self.uv[..., 0]

    @property
    def v(self) -> np.ndarray:
        return self.uv[..., 1]


@dataclass
class ConsistencyMask:
    """Boolean field c^(i-j,i); True marks a temporally consistent pixel"""

    valid: np.ndarray
    count: int = field(init=False)

    def __post_init__(self):
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.ndim != 2:
            raise ShapeError(f"consistency mask must be HxW, got {self.valid.shape}")
        self.count = int(np.count_nonzero(self.valid))

    @property
    def height(self) -> int:
        return self.valid.shape[0]

    @property
    def width(self) -> int:
        return self.valid.shape[1]

    @property
    def size(self) -> int:
        return int(self.valid.size)


@dataclass(frozen=True)
class ConsistencyThresholds:
    """Constants of the disagreement and motion-boundary inequalities"""

    disagreement_scale: float = 0.01
    disagreement_offset: float = 0.5
    motion_scale: float = 0.01
    motion_offset: float = 0.002

    @classmethod
    def from_settings(cls, settings: Optional[Dict[str, float]] = None) -> "ConsistencyThresholds":
        merged = get_consistency_settings()
        merged.update(settings or {})
        return cls(**{key: float(merged[key]) for key in cls.__dataclass_fields__})


# =============================================================================
# .FLO FORMAT
# =============================================================================


def parse_flo(payload: bytes, source: int = 0, target: int = 1) -> FlowField:
    """Decode little-endian Middlebury .flo bytes"""
    if len(payload) < 4:
        raise TruncatedError("flow file shorter than its magic number")
    (magic,) = struct.unpack_from("<f", payload, 0)
    if magic != np.float32(FLO_MAGIC):
        raise MagicError(f"Magic number incorrect: {magic} is not a .flo file")
    if len(payload) < FLO_HEADER_BYTES:
        raise TruncatedError("flow file ends inside its header")
    width, height = struct.unpack_from("<ii", payload, 4)
    if width <= 0 or height <= 0:
        raise DimensionError(f"nonpositive flow dimensions {width}x{height}")
    expected = FLO_HEADER_BYTES + 8 * width * height
    if len(payload) < expected:
        raise TruncatedError(f"flow payload has {len(payload)} bytes, header announces {expected}")
    if len(payload) > expected:
        raise FormatError(f"{len(payload) - expected} trailing bytes after the flow payload")
    data = np.frombuffer(payload, dtype="<f4", count=2 * width * height, offset=FLO_HEADER_BYTES)
    return FlowField(data.astype(np.float32).reshape(height, width, 2), source, target)


def write_flo(flow: FlowField) -> bytes:
    header = struct.pack("<fii", FLO_MAGIC, flow.width, flow.height)
    return header + np.ascontiguousarray(flow.uv, dtype="<f4").tobytes()


def read_flo(path: Union[str, Path], source: int = 0, target: int = 1) -> FlowField:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"Flow file not found: {path}", [str(path)])
    return parse_flo(path.read_bytes(), source, target)


def save_flo(path: Union[str, Path], flow: FlowField) -> None:
    Path(path).write_bytes(write_flo(flow))


# =============================================================================
# WARPING AND CONSISTENCY
# =============================================================================


def _sample_positions(flow: FlowField) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sample coordinates p + flow(p) and whether the bilinear footprint stays inside"""
    rows, cols = np.mgrid[0 : flow.height, 0 : flow.width]
    x = cols + flow.u.astype(np.float64)
    y = rows + flow.v.astype(np.float64)
    inside = (x >= 0) & (x <= flow.width - 1) & (y >= 0) & (y <= flow.height - 1)
    return x, y, inside


def _bilinear(values: np.ndarray, x: np.ndarray, y: np.ndarray, inside: np.ndarray) -> np.ndarray:
    """Bilinear samples of an HxWxC array; zero where the footprint leaves it"""
    height, width = values.shape[:2]
    xs = np.where(inside, x, 0.0)
    ys = np.where(inside, y, 0.0)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    ax = (xs - x0)[..., None]
    ay = (ys - y0)[..., None]
    source = values.astype(np.float64)
    top = (1.0 - ax) * source[y0, x0] + ax * source[y0, x1]
    bottom = (1.0 - ax) * source[y1, x0] + ax * source[y1, x1]
    sampled = (1.0 - ay) * top + ay * bottom
    return np.where(inside[..., None], sampled, 0.0)


def warp(image, flow: FlowField) -> Tuple[Tensor, ConsistencyMask]:
    """
    Backward-warp an HxWxC image with a current->previous flow:
    warped[p] = image(p + flow(p)). Out-of-image footprints are marked invalid
    and set to 0 instead of being clamped.
    """
    values = as_tensor(image).data
    if values.ndim != 3:
        raise ShapeError(f"warp expects HxWxC, got {values.shape}")
    if values.shape[:2] != (flow.height, flow.width):
        raise ShapeError(f"flow {flow.height}x{flow.width} does not match image {values.shape[:2]}")
    x, y, inside = _sample_positions(flow)
    warped = _bilinear(values, x, y, inside).astype(values.dtype)
    return Tensor(warped), ConsistencyMask(inside)


def consistency_mask(
    forward: FlowField,
    backward: FlowField,
    thresholds: Optional[ConsistencyThresholds] = None,
) -> ConsistencyMask:
    """
    c^(i-j,i) from the forward flow (i-j -> i) and backward flow (i -> i-j).
    A pixel is inconsistent when the forward flow sampled at p + backward(p)
    fails to cancel backward(p), when backward flow has a motion boundary at p,
    or when p + backward(p) leaves the image.
    """
    if (forward.height, forward.width) != (backward.height, backward.width):
        raise ShapeError(
            f"forward flow {forward.height}x{forward.width} and backward flow "
            f"{backward.height}x{backward.width} differ in size"
        )
    limits = thresholds or ConsistencyThresholds.from_settings()

    x, y, inside = _sample_positions(backward)
    w_hat = backward.uv.astype(np.float64)
    w_tilde = _bilinear(forward.uv, x, y, inside)

    disagreement = np.sum((w_tilde + w_hat) ** 2, axis=2)
    magnitude = np.sum(w_tilde ** 2, axis=2) + np.sum(w_hat ** 2, axis=2)
    occluded = disagreement > limits.disagreement_scale * magnitude + limits.disagreement_offset

    # central differences inside, one-sided at the borders; a length-1 axis has no gradient
    gradient_energy = np.zeros(w_hat.shape[:2])
    for axis in (0, 1):
        if w_hat.shape[axis] > 1:
            gradient_energy += np.sum(np.gradient(w_hat, axis=axis) ** 2, axis=2)
    boundary = gradient_energy > limits.motion_scale * np.sum(w_hat ** 2, axis=2) + limits.motion_offset

    return ConsistencyMask(inside & ~occluded & ~boundary)


def inconsistency_fraction(mask: ConsistencyMask) -> float:
    return 1.0 - mask.count / mask.size


# =============================================================================
# SYNTHETIC FLOWS AND FLOW SOURCES
# =============================================================================


def synth_flow(
    kind: str,
    params: Sequence[float],
    height: int,
    width: int,
    source: int = 0,
    target: int = 1,
) -> Tuple[FlowField, FlowField]:
    """
    Analytic (forward, backward) pair. translation params are (dx, dy), the
    content motion from source to target; rotation params are (theta,) in
    radians about the image center.
    """
    params = [float(p) for p in params]
    if not all(np.isfinite(params)):
        raise ValidationError(f"flow parameters must be finite, got {params}")

    if kind == "translation":
        dx, dy = (params + [0.0, 0.0])[:2]
        forward = np.empty((height, width, 2), dtype=np.float32)
        forward[..., 0], forward[..., 1] = dx, dy
        backward = -forward
    elif kind == "rotation":
        (theta,) = params[:1] or [0.0]
        rows, cols = np.mgrid[0:height, 0:width].astype(np.float64)
        cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
        forward = _rotation_field(cols - cx, rows - cy, theta)
        backward = _rotation_field(cols - cx, rows - cy, -theta)
    else:
        raise ValidationError(f"Unknown synthetic flow kind: {kind}")

    return (
        FlowField(forward, source=source, target=target),
        FlowField(backward, source=target, target=source),
    )


def _rotation_field(dx: np.ndarray, dy: np.ndarray, theta: float) -> np.ndarray:
    """R_theta(p - ctr) + ctr - p"""
    cos, sin = np.cos(theta), np.sin(theta)
    field = np.empty(dx.shape + (2,), dtype=np.float64)
    field[..., 0] = cos * dx - sin * dy - dx
    field[..., 1] = sin * dx + cos * dy - dy
    return field.astype(np.float32)


def forward_flow_name(i: int, j: int) -> str:
    return f"forward_{i - j}_{i}.flo"


def backward_flow_name(i: int, j: int) -> str:
    return f"backward_{i}_{i - j}.flo"


class FlowDirectory:
    """Flows on disk named forward_{i-j}_{i}.flo and backward_{i}_{i-j}.flo"""

    def __init__(self, directory: Union[str, Path]):
        self.directory = Path(directory)

    def paths(self, i: int, j: int) -> Tuple[Path, Path]:
        return self.directory / forward_flow_name(i, j), self.directory / backward_flow_name(i, j)

    def has_pair(self, i: int, j: int) -> bool:
        return all(path.exists() for path in self.paths(i, j))

    def missing(self, pairs: Sequence[Tuple[int, int]]) -> List[str]:
        names = []
        for i, j in pairs:
            for path in self.paths(i, j):
                if not path.exists():
                    names.append(path.name)
        return names

    def pair(self, i: int, j: int) -> Tuple[FlowField, FlowField]:
        forward_path, backward_path = self.paths(i, j)
        missing = [p.name for p in (forward_path, backward_path) if not p.exists()]
        if missing:
            raise MissingInputError(
                f"Missing flow files for frame pair ({i - j}, {i}): {', '.join(missing)}", missing
            )
        return read_flo(forward_path, i - j, i), read_flo(backward_path, i, i - j)


class SyntheticFlowSource:
    """Analytic flows for every pair; the displacement scales with the offset j"""

    def __init__(self, kind: str, params: Sequence[float], height: int, width: int):
        self.kind = kind
        self.params = [float(p) for p in params]
        self.height = height
        self.width = width

    def has_pair(self, i: int, j: int) -> bool:
        return i - j >= 1

    def missing(self, pairs: Sequence[Tuple[int, int]]) -> List[str]:
        return []

    def pair(self, i: int, j: int) -> Tuple[FlowField, FlowField]:
        scaled = [p * j for p in self.params]
        return synth_flow(self.kind, scaled, self.height, self.width, source=i - j, target=i)


class FlowMemory:
    """In-memory flow pairs keyed by (i, j)"""

    def __init__(self, pairs: Optional[Dict[Tuple[int, int], Tuple[FlowField, FlowField]]] = None):
        self.pairs = dict(pairs or {})

    def add(self, i: int, j: int, forward: FlowField, backward: FlowField) -> None:
        self.pairs[(i, j)] = (forward, backward)

    def has_pair(self, i: int, j: int) -> bool:
        return (i, j) in self.pairs

    def missing(self, pairs: Sequence[Tuple[int, int]]) -> List[str]:
        names = []
        for i, j in pairs:
            if (i, j) not in self.pairs:
                names.extend([forward_flow_name(i, j), backward_flow_name(i, j)])
        return names

    def pair(self, i: int, j: int) -> Tuple[FlowField, FlowField]:
        if (i, j) not in self.pairs:
            names = [forward_flow_name(i, j), backward_flow_name(i, j)]
            raise MissingInputError(f"Missing flows for frame pair ({i - j}, {i}): {', '.join(names)}", names)
        return self.pairs[(i, j)]
