"""
Image and Frame I/O
Binary PPM (P6, maxval 255) codec, [0,1] float conversion and frame discovery
"""

import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import List, Union

import numpy as np

from dream_config import RUN_DEFAULTS
from errors import DimensionError, FormatError, MagicError, MissingInputError, TruncatedError

logger = logging.getLogger(__name__)

FRAME_NAME = re.compile(r"^frame_(\d{4,})\.ppm$")


@dataclass
class PpmImage:
    """8-bit RGB samples, height x width x 3"""

    width: int
    height: int
    samples: np.ndarray

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.uint8)
        if self.samples.shape != (self.height, self.width, 3):
            raise DimensionError(f"samples {self.samples.shape} do not match {self.width}x{self.height} RGB")


def _header_tokens(payload: bytes, count: int):
    """Read whitespace-separated header tokens, skipping # comments"""
    tokens = []
    position = 0
    while len(tokens) < count:
        while position < len(payload) and payload[position : position + 1].isspace():
            position += 1
        if position >= len(payload):
            raise TruncatedError("PPM header ends early")
        if payload[position : position + 1] == b"#":
            end = payload.find(b"\n", position)
            if end < 0:
                raise TruncatedError("PPM header ends inside a comment")
            position = end + 1
            continue
        start = position
        while position < len(payload) and not payload[position : position + 1].isspace() and payload[position : position + 1] != b"#":
            position += 1
        tokens.append(payload[start:position])
    return tokens, position


def read_ppm(payload: bytes) -> PpmImage:
    """Decode a binary P6 image"""
    if payload[:2] != b"P6":
        raise MagicError(f"PPM magic {payload[:2]!r} is not P6")
    tokens, position = _header_tokens(payload, 4)
    if tokens[0] != b"P6":
        raise MagicError(f"PPM magic {tokens[0]!r} is not P6")
    try:
        width, height, maxval = (int(token) for token in tokens[1:])
    except ValueError as e:
        raise FormatError(f"PPM header is not numeric: {tokens}") from e
    if width <= 0 or height <= 0:
        raise DimensionError(f"nonpositive PPM size {width}x{height}")
    if maxval != 255:
        raise FormatError(f"PPM maxval must be 255, got {maxval}")
    # exactly one whitespace byte separates the header from the raster
    if position >= len(payload) or not payload[position : position + 1].isspace():
        raise TruncatedError("PPM header is not followed by whitespace")
    position += 1
    expected = 3 * width * height
    raster = payload[position : position + expected]
    if len(raster) < expected:
        raise TruncatedError(f"PPM raster has {len(raster)} bytes, expected {expected}")
    samples = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3)
    return PpmImage(width, height, samples.copy())


def write_ppm(image: PpmImage) -> bytes:
    header = f"P6\n{image.width} {image.height}\n255\n".encode("ascii")
    return header + np.ascontiguousarray(image.samples, dtype=np.uint8).tobytes()


def to_float(image: PpmImage) -> np.ndarray:
    """Samples / 255 as float32 HxWx3"""
    return image.samples.astype(np.float32) / np.float32(255.0)


def from_float(pixels: np.ndarray) -> PpmImage:
    """round(clamp(x) * 255)"""
    pixels = np.asarray(pixels, dtype=np.float32)
    samples = np.rint(np.clip(pixels, 0.0, 1.0) * np.float32(255.0)).astype(np.uint8)
    return PpmImage(width=pixels.shape[1], height=pixels.shape[0], samples=samples)


def load_image(path: Union[str, Path]) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"Image not found: {path}", [str(path)])
    return to_float(read_ppm(path.read_bytes()))


def save_image(path: Union[str, Path], pixels: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(write_ppm(from_float(pixels)))


def frame_path(directory: Union[str, Path], index: int) -> Path:
    return Path(directory) / RUN_DEFAULTS["frame_pattern"].format(index)


def discover_frames(directory: Union[str, Path]) -> List[Path]:
    """frame_0001.ppm, frame_0002.ppm, ... with no gaps"""
    directory = Path(directory)
    if not directory.is_dir():
        raise MissingInputError(f"Frames directory not found: {directory}", [str(directory)])
    indices = sorted(
        int(match.group(1)) for match in (FRAME_NAME.match(p.name) for p in directory.iterdir()) if match
    )
    if not indices:
        raise MissingInputError(f"No frame_NNNN.ppm files in {directory}", [str(frame_path(directory, 1))])
    missing = [frame_path(directory, i).name for i in range(1, indices[-1] + 1) if i not in set(indices)]
    if missing:
        raise MissingInputError(f"Missing frames in {directory}: {', '.join(missing)}", missing)
    logger.info(f"Found {len(indices)} frames in {directory}")
    return [frame_path(directory, i) for i in range(1, indices[-1] + 1)]


def load_frames(directory: Union[str, Path]) -> List[np.ndarray]:
    return [load_image(path) for path in discover_frames(directory)]
