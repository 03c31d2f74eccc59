"""
Dream Network
VGG-style network description, the LDW1 weights file format and the two feature
functions the losses read: one feature map F_{l,a}(I) and the pre-softmax logits F_c(I)
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import (
    ContractError,
    FormatError,
    IndexRangeError,
    MagicError,
    MissingInputError,
    ShapeError,
    TruncatedError,
    ValidationError,
    WeightsShapeError,
)
from tensor_core import Tensor, as_tensor, avg_pool2, conv2d, dense, mirror_pad, relu
from utils import load_json_file

logger = logging.getLogger(__name__)

WEIGHTS_MAGIC = b"LDW1"
ROLE_KERNEL = 0
ROLE_BIAS = 1
LAYER_KINDS = ("conv", "pool", "flatten", "dense")

# ImageNet channel means in [0,1] pixel units
IMAGENET_MEANS = (0.485, 0.456, 0.406)


@dataclass(frozen=True)
class LayerSpec:
    """One layer: conv | pool | flatten | dense"""

    kind: str
    filters: Optional[int] = None
    kernel_size: int = 3
    units: Optional[int] = None
    relu: bool = True

    @property
    def has_parameters(self) -> bool:
        return self.kind in ("conv", "dense")

    def to_dict(self) -> Dict[str, Any]:
        if self.kind == "conv":
            return {"kind": "conv", "filters": self.filters, "kernel_size": self.kernel_size, "relu": self.relu}
        if self.kind == "dense":
            return {"kind": "dense", "units": self.units, "relu": self.relu}
        return {"kind": self.kind}

    @classmethod
    def from_dict(cls, entry: Dict[str, Any]) -> "LayerSpec":
        kind = entry.get("kind")
        if kind not in LAYER_KINDS:
            raise ValidationError(f"Unknown layer kind: {kind!r}")
        if kind == "conv":
            return cls(
                kind="conv",
                filters=int(entry["filters"]),
                kernel_size=int(entry.get("kernel_size", 3)),
                relu=bool(entry.get("relu", True)),
            )
        if kind == "dense":
            return cls(kind="dense", units=int(entry["units"]), relu=bool(entry.get("relu", False)))
        return cls(kind=kind, relu=False)


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layers, the fixed TxTx3 input size, channel means and logit count"""

    layers: Tuple[LayerSpec, ...]
    input_size: Tuple[int, int, int]
    means: Tuple[float, ...] = IMAGENET_MEANS
    class_count: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_size", tuple(int(d) for d in self.input_size))
        object.__setattr__(self, "means", tuple(float(m) for m in self.means))
        shapes = self.infer_shapes()
        final = shapes[-1]
        if len(final) != 1:
            raise ValidationError("the final layer must produce a logit vector")
        if self.class_count is None:
            object.__setattr__(self, "class_count", final[0])
        elif final[0] != self.class_count:
            raise ValidationError(f"final layer width {final[0]} != class_count {self.class_count}")

    @property
    def tile_size(self) -> int:
        return self.input_size[0]

    def infer_shapes(self) -> List[Tuple[int, ...]]:
        """Output shape of every layer; raises on incompatible sequences"""
        height, width, channels = self.input_size
        if height != width or height <= 0:
            raise ValidationError(f"input_size must be (T, T, C), got {self.input_size}")
        if len(self.means) != channels:
            raise ValidationError(f"{len(self.means)} channel means for {channels} channels")
        if not self.layers:
            raise ValidationError("network has no layers")

        shape: Tuple[int, ...] = (height, width, channels)
        shapes: List[Tuple[int, ...]] = []
        flattened = False
        for index, layer in enumerate(self.layers):
            if layer.kind == "conv":
                if flattened:
                    raise ValidationError(f"layer {index}: conv after flatten")
                if layer.kernel_size % 2 == 0 or layer.kernel_size < 1:
                    raise ValidationError(f"layer {index}: conv kernel size must be odd")
                pad = (layer.kernel_size - 1) // 2
                if pad >= shape[0] or pad >= shape[1]:
                    raise ValidationError(f"layer {index}: padding {pad} too large for {shape}")
                if not layer.filters or layer.filters <= 0:
                    raise ValidationError(f"layer {index}: conv needs a positive filter count")
                shape = (shape[0], shape[1], layer.filters)
            elif layer.kind == "pool":
                if flattened:
                    raise ValidationError(f"layer {index}: pool after flatten")
                if shape[0] % 2 or shape[1] % 2:
                    raise ValidationError(f"layer {index}: pool needs even size, got {shape}")
                shape = (shape[0] // 2, shape[1] // 2, shape[2])
            elif layer.kind == "flatten":
                if flattened:
                    raise ValidationError(f"layer {index}: second flatten")
                flattened = True
                shape = (int(np.prod(shape)),)
            elif layer.kind == "dense":
                if not flattened:
                    raise ValidationError(f"layer {index}: dense before flatten")
                if not layer.units or layer.units <= 0:
                    raise ValidationError(f"layer {index}: dense needs positive units")
                shape = (layer.units,)
            shapes.append(shape)
        return shapes

    def parameter_shapes(self) -> Dict[int, Tuple[Tuple[int, ...], Tuple[int, ...]]]:
        """(kernel shape, bias shape) keyed by layer index"""
        shapes = self.infer_shapes()
        result = {}
        previous: Tuple[int, ...] = self.input_size
        for index, layer in enumerate(self.layers):
            if layer.kind == "conv":
                k = layer.kernel_size
                result[index] = ((k, k, previous[2], layer.filters), (layer.filters,))
            elif layer.kind == "dense":
                result[index] = ((previous[0], layer.units), (layer.units,))
            previous = shapes[index]
        return result

    def parameter_count(self) -> int:
        return sum(int(np.prod(k)) + int(np.prod(b)) for k, b in self.parameter_shapes().values())

    def to_dict(self) -> Dict[str, Any]:
        return {
            "input_size": list(self.input_size),
            "means": list(self.means),
            "class_count": self.class_count,
            "layers": [layer.to_dict() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "NetworkSpec":
        try:
            layers = tuple(LayerSpec.from_dict(entry) for entry in data["layers"])
            return cls(
                layers=layers,
                input_size=tuple(data["input_size"]),
                means=tuple(data.get("means", IMAGENET_MEANS)),
                class_count=data.get("class_count"),
            )
        except (KeyError, TypeError) as e:
            raise FormatError(f"Malformed network spec: {e}") from e


@dataclass
class Weights:
    """One kernel and one bias per parameterized layer, keyed by layer index"""

    kernels: Dict[int, np.ndarray] = field(default_factory=dict)
    biases: Dict[int, np.ndarray] = field(default_factory=dict)

    def check_against(self, spec: NetworkSpec) -> None:
        expected = spec.parameter_shapes()
        for index, (kernel_shape, bias_shape) in expected.items():
            kernel = self.kernels.get(index)
            bias = self.biases.get(index)
            if kernel is None or bias is None:
                raise WeightsShapeError(f"layer {index}: missing kernel or bias")
            if tuple(kernel.shape) != kernel_shape:
                raise WeightsShapeError(f"layer {index}: kernel {kernel.shape}, expected {kernel_shape}")
            if tuple(bias.shape) != bias_shape:
                raise WeightsShapeError(f"layer {index}: bias {bias.shape}, expected {bias_shape}")
        extra = (set(self.kernels) | set(self.biases)) - set(expected)
        if extra:
            raise WeightsShapeError(f"weights for layers without parameters: {sorted(extra)}")


# =============================================================================
# WEIGHTS FILE FORMAT
# =============================================================================


def serialize_weights(spec: NetworkSpec, weights: Weights) -> bytes:
    """LDW1 bytes, records ordered by layer index then role"""
    try:
        weights.check_against(spec)
    except WeightsShapeError as e:
        raise ContractError(f"refusing to save mismatched weights: {e}") from e

    records = []
    for index in sorted(weights.kernels):
        for role, tensor in ((ROLE_KERNEL, weights.kernels[index]), (ROLE_BIAS, weights.biases[index])):
            array = np.ascontiguousarray(tensor, dtype="<f4")
            header = struct.pack("<IBB", index, role, array.ndim)
            dims = struct.pack(f"<{array.ndim}I", *array.shape)
            records.append(header + dims + array.tobytes())
    return WEIGHTS_MAGIC + struct.pack("<I", len(records)) + b"".join(records)


def parse_weights(payload: bytes, spec: NetworkSpec) -> Weights:
    """Decode LDW1 bytes and shape-check them against spec"""
    if len(payload) < 4 or payload[:4] != WEIGHTS_MAGIC:
        raise MagicError(f"weights magic {payload[:4]!r} != {WEIGHTS_MAGIC!r}")
    if len(payload) < 8:
        raise TruncatedError("weights file ends inside the record count")
    (count,) = struct.unpack_from("<I", payload, 4)
    offset = 8
    weights = Weights()
    for record in range(count):
        if offset + 6 > len(payload):
            raise TruncatedError(f"record {record}: header truncated")
        index, role, rank = struct.unpack_from("<IBB", payload, offset)
        offset += 6
        if offset + 4 * rank > len(payload):
            raise TruncatedError(f"record {record}: dims truncated")
        dims = struct.unpack_from(f"<{rank}I", payload, offset)
        offset += 4 * rank
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        if offset + nbytes > len(payload):
            raise TruncatedError(f"record {record}: payload truncated")
        values = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=offset)
        offset += nbytes
        array = values.astype(np.float32).reshape(dims)
        if role == ROLE_KERNEL:
            target = weights.kernels
        elif role == ROLE_BIAS:
            target = weights.biases
        else:
            raise FormatError(f"record {record}: unknown tensor role {role}")
        if index in target:
            raise FormatError(f"record {record}: duplicate tensor for layer {index}")
        target[index] = array
    if offset != len(payload):
        raise FormatError(f"{len(payload) - offset} trailing bytes after {count} records")
    weights.check_against(spec)
    return weights


def load_spec(path: Union[str, Path]) -> NetworkSpec:
    return NetworkSpec.from_dict(load_json_file(str(path), "network spec"))


def save_spec(spec: NetworkSpec, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=2) + "\n")


def load_weights(path: Union[str, Path], spec_path: Union[str, Path]) -> Tuple[NetworkSpec, Weights]:
    """Read the spec file and the LDW1 weights file that goes with it"""
    spec = load_spec(spec_path)
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"Weights file not found: {path}", [str(path)])
    weights = parse_weights(path.read_bytes(), spec)
    logger.info(f"Loaded {spec.parameter_count()} parameters from {path}")
    return spec, weights


def save_weights(spec: NetworkSpec, weights: Weights, path: Union[str, Path]) -> None:
    Path(path).write_bytes(serialize_weights(spec, weights))


# =============================================================================
# NETWORK
# =============================================================================


class DreamNet:
    """Immutable spec + weights with differentiable forward paths"""

    def __init__(self, spec: NetworkSpec, weights: Weights):
        weights.check_against(spec)
        self.spec = spec
        self.weights = weights
        self._shapes = spec.infer_shapes()

    @property
    def tile_size(self) -> int:
        return self.spec.tile_size

    @property
    def class_count(self) -> int:
        return self.spec.class_count

    def _forward(self, image, stop_after: Optional[int] = None) -> List[Tensor]:
        x = as_tensor(image)
        if x.shape != self.spec.input_size:
            raise ShapeError(f"network input must be {self.spec.input_size}, got {x.shape}")
        x = x - np.asarray(self.spec.means)
        activations: List[Tensor] = []
        for index, layer in enumerate(self.spec.layers):
            if layer.kind == "conv":
                pad = (layer.kernel_size - 1) // 2
                x = conv2d(mirror_pad(x, pad, pad), self.weights.kernels[index], self.weights.biases[index])
                if layer.relu:
                    x = relu(x)
            elif layer.kind == "pool":
                x = avg_pool2(x)
            elif layer.kind == "flatten":
                x = x.flatten()
            elif layer.kind == "dense":
                x = dense(x, self.weights.kernels[index], self.weights.biases[index])
                if layer.relu:
                    x = relu(x)
            activations.append(x)
            if stop_after is not None and index >= stop_after:
                break
        return activations

    def _check_feature_index(self, layer: int, feature_map: int) -> None:
        if not 0 <= layer < len(self.spec.layers):
            raise IndexRangeError(f"layer index {layer} outside 0..{len(self.spec.layers) - 1}")
        if self.spec.layers[layer].kind not in ("conv", "pool"):
            raise IndexRangeError(f"layer {layer} is a {self.spec.layers[layer].kind} layer, not a feature map")
        channels = self._shapes[layer][2]
        if not 0 <= feature_map < channels:
            raise IndexRangeError(f"feature map {feature_map} outside 0..{channels - 1} at layer {layer}")

    def forward_features(self, image, layer: int, feature_map: int) -> Tensor:
        """Single 2-D feature map a of layer l"""
        self._check_feature_index(layer, feature_map)
        activations = self._forward(image, stop_after=layer)
        return activations[layer][:, :, feature_map]

    def forward_logits(self, image) -> Tensor:
        """Pre-softmax logits; no softmax is ever applied"""
        return self._forward(image)[-1]

    def features_and_logits(self, image, layer: int, feature_map: int) -> Tuple[Tensor, Tensor]:
        """Feature map and logits from one shared forward evaluation"""
        self._check_feature_index(layer, feature_map)
        activations = self._forward(image)
        return activations[layer][:, :, feature_map], activations[-1]


def load_network(spec_path: Union[str, Path], weights_path: Union[str, Path]) -> DreamNet:
    spec, weights = load_weights(weights_path, spec_path)
    return DreamNet(spec, weights)


# =============================================================================
# ARCHITECTURES
# =============================================================================


def vgg19_spec(class_count: int = 1000, tile_size: int = 224) -> NetworkSpec:
    """VGG-19 with average pooling; padding is mirror padding throughout"""
    blocks = [(64, 2), (128, 2), (256, 4), (512, 4), (512, 4)]
    layers: List[LayerSpec] = []
    for filters, repeats in blocks:
        layers.extend(LayerSpec(kind="conv", filters=filters) for _ in range(repeats))
        layers.append(LayerSpec(kind="pool", relu=False))
    layers.append(LayerSpec(kind="flatten", relu=False))
    layers.append(LayerSpec(kind="dense", units=4096, relu=True))
    layers.append(LayerSpec(kind="dense", units=4096, relu=True))
    layers.append(LayerSpec(kind="dense", units=class_count, relu=False))
    return NetworkSpec(layers=tuple(layers), input_size=(tile_size, tile_size, 3), means=IMAGENET_MEANS)


def micro_spec(tile_size: int = 32, class_count: int = 10, widths: Sequence[int] = (4, 4)) -> NetworkSpec:
    """Desk-scale network: one conv + pool block per width, then a dense head"""
    layers: List[LayerSpec] = []
    for filters in widths:
        layers.append(LayerSpec(kind="conv", filters=filters))
        layers.append(LayerSpec(kind="pool", relu=False))
    layers.append(LayerSpec(kind="flatten", relu=False))
    layers.append(LayerSpec(kind="dense", units=class_count, relu=False))
    return NetworkSpec(layers=tuple(layers), input_size=(tile_size, tile_size, 3), means=(0.5, 0.5, 0.5))


def random_weights(spec: NetworkSpec, seed: int = 0, scale: float = 1.0) -> Weights:
    """He-initialized kernels times scale, zero biases"""
    rng = np.random.default_rng(seed)
    weights = Weights()
    for index, (kernel_shape, bias_shape) in spec.parameter_shapes().items():
        fan_in = int(np.prod(kernel_shape[:-1]))
        std = scale * np.sqrt(2.0 / fan_in)
        weights.kernels[index] = (rng.standard_normal(kernel_shape) * std).astype(np.float32)
        weights.biases[index] = np.zeros(bias_shape, dtype=np.float32)
    return weights
