"""
Temporal Losses
The dream terms (feature-map energy, controlled logit), the short/long-term
temporal consistency terms, the flow-trail term and their weighted sum.
Every term is a scalar Tensor differentiable w.r.t. the output image x.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import ContractError, IndexRangeError, ShapeError, ValidationError
from flowlab import ConsistencyMask
from tensor_core import Tensor, as_tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    """alpha (dream), beta (short-term), gamma (long-term), delta (flow trail)"""

    alpha: float = 10000.0
    beta: float = 0.0
    gamma: float = 0.0
    delta: float = 0.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "delta"):
            value = float(getattr(self, name))
            if not math.isfinite(value) or value < 0:
                raise ValidationError(f"loss weight {name} must be finite and >= 0, got {value}")
            object.__setattr__(self, name, value)

    def scaled(self, factor: float) -> "LossWeights":
        return LossWeights(self.alpha * factor, self.beta * factor, self.gamma * factor, self.delta * factor)

    @property
    def uses_temporal(self) -> bool:
        return self.beta > 0 or self.gamma > 0 or self.delta > 0


def _mask_array(mask) -> np.ndarray:
    if isinstance(mask, ConsistencyMask):
        return mask.valid
    return np.asarray(mask)


@dataclass
class FrameContext:
    """
    Temporal inputs of frame i: offsets J, warped prior outputs w^(i-j,i) and
    masks c^(i-j,i) keyed by j. Optional precomputed long-term weights c_l.
    """

    offsets: Tuple[int, ...] = ()
    warped: Dict[int, np.ndarray] = field(default_factory=dict)
    masks: Dict[int, np.ndarray] = field(default_factory=dict)
    long_term: Optional[Dict[int, np.ndarray]] = None

    def __post_init__(self):
        self.offsets = tuple(int(j) for j in self.offsets)
        if any(j <= 0 for j in self.offsets) or list(self.offsets) != sorted(set(self.offsets)):
            raise ValidationError(f"offsets must be strictly increasing positive integers, got {self.offsets}")
        self.masks = {j: _mask_array(mask) for j, mask in self.masks.items()}
        shapes = {np.asarray(w).shape[:2] for w in self.warped.values()} | {m.shape for m in self.masks.values()}
        if len(shapes) > 1:
            raise ShapeError(f"warped priors and masks differ in size: {sorted(shapes)}")

    def __bool__(self) -> bool:
        return bool(self.offsets)

    def require_complete(self) -> None:
        missing = [j for j in self.offsets if j not in self.warped or j not in self.masks]
        if missing:
            raise ContractError(f"frame context lacks warped prior or mask for offsets {missing}")

    def restrict(self, offsets: Sequence[int]) -> "FrameContext":
        keep = tuple(j for j in self.offsets if j in set(offsets))
        return FrameContext(
            offsets=keep,
            warped={j: self.warped[j] for j in keep if j in self.warped},
            masks={j: self.masks[j] for j in keep if j in self.masks},
        )

    def with_long_term_weights(self) -> "FrameContext":
        self.require_complete()
        fields = long_term_weights([self.masks[j] for j in self.offsets])
        return replace(self, long_term=dict(zip(self.offsets, fields)))

    def _map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "FrameContext":
        return FrameContext(
            offsets=self.offsets,
            warped={j: fn(w) for j, w in self.warped.items()},
            masks={j: fn(m) for j, m in self.masks.items()},
            long_term=None if self.long_term is None else {j: fn(c) for j, c in self.long_term.items()},
        )

    def rolled(self, origin: Tuple[int, int]) -> "FrameContext":
        """Circularly roll every field so origin becomes (0, 0)"""
        row, col = origin
        return self._map(lambda a: np.roll(a, shift=(-row, -col), axis=(0, 1)))

    def crop(self, corner: Tuple[int, int], size: int) -> "FrameContext":
        row, col = corner
        return self._map(lambda a: a[row : row + size, col : col + size])


# =============================================================================
# DREAM TERMS
# =============================================================================


def layer_dream_loss(feature_map) -> Tensor:
    """L_{l,a} = -||F_{l,a}(I)||_F^2"""
    return -as_tensor(feature_map).square().sum()


def controlled_loss(logits, class_index: int) -> Tensor:
    """L_c = -F_c(I)^2 on the pre-softmax logits"""
    logits = as_tensor(logits)
    if logits.ndim != 1:
        raise ShapeError(f"logits must be a vector, got {logits.shape}")
    if not 0 <= class_index < logits.shape[0]:
        raise IndexRangeError(f"class index {class_index} outside 0..{logits.shape[0] - 1}")
    return -logits[class_index].square()


# =============================================================================
# TEMPORAL TERMS
# =============================================================================


def long_term_weights(masks: Sequence) -> List[np.ndarray]:
    """
    c_l for offsets in increasing order: each mask minus the sum of the masks
    of all nearer frames, floored at zero. The nearest offset keeps its mask.
    """
    arrays = [np.asarray(_mask_array(m), dtype=np.float32) for m in masks]
    if len({a.shape for a in arrays}) > 1:
        raise ShapeError(f"masks differ in size: {[a.shape for a in arrays]}")
    weights = []
    nearer = None
    for mask in arrays:
        weights.append(mask.copy() if nearer is None else np.maximum(mask - nearer, 0.0))
        nearer = mask.copy() if nearer is None else nearer + mask
    return weights


def _broadcast_pixels(field: np.ndarray, x: Tensor) -> np.ndarray:
    """HxW pixel field broadcast across channels of an HxWxC image"""
    field = np.asarray(field, dtype=x.data.dtype)
    if x.ndim == 3 and field.ndim == 2:
        field = field[..., None]
    if field.shape[:2] != x.shape[:2]:
        raise ShapeError(f"mask {field.shape[:2]} does not match image {x.shape[:2]}")
    return field


def temporal_loss(x, context: FrameContext, weights: Optional[Dict[int, np.ndarray]] = None) -> Tensor:
    """
    (1/D) sum_j sum_k c_l^(i-j,i)[k] (x[k] - w^(i-j,i)[k])^2 with D = x.size.
    Warped priors are constants. With context offsets {1} this is the short-term loss.
    """
    x = as_tensor(x)
    context.require_complete()
    if weights is None:
        weights = context.long_term
    if weights is None:
        weights = dict(zip(context.offsets, long_term_weights([context.masks[j] for j in context.offsets])))
    missing = [j for j in context.offsets if j not in weights]
    if missing:
        raise ContractError(f"no long-term weight field for offsets {missing}")

    loss = Tensor(0.0)
    for j in context.offsets:
        residual = x - context.warped[j]
        loss = loss + (residual.square() * _broadcast_pixels(weights[j], x)).sum()
    return loss * (1.0 / x.size)


def flow_trail_loss(x, warped, mask, masked: bool = False) -> Tensor:
    """
    L_f = ||x - w||_F^2 / (D * sum_k c[k]) with c broadcast across channels.
    An all-inconsistent mask carries no trail signal and yields 0.
    """
    x = as_tensor(x)
    field = _broadcast_pixels(_mask_array(mask), x)
    consistent = float(np.sum(np.broadcast_to(field, x.shape), dtype=np.float64))
    if consistent == 0.0:
        return Tensor(0.0)
    residual = (x - warped).square()
    if masked:
        residual = residual * field
    return residual.sum() * (1.0 / (x.size * consistent))


# =============================================================================
# COMBINED OBJECTIVE
# =============================================================================


def loss_terms(
    x,
    weights: LossWeights,
    context: Optional[FrameContext] = None,
    dream_term: Optional[Callable[[Tensor], Tensor]] = None,
    masked_trail: bool = False,
) -> Dict[str, Tensor]:
    """Unweighted component losses that the weights activate"""
    x = as_tensor(x)
    context = context if context is not None else FrameContext()
    terms: Dict[str, Tensor] = {}
    if weights.alpha > 0 and dream_term is not None:
        terms["dream"] = dream_term(x)
    if weights.beta > 0 and 1 in context.offsets:
        short = context.restrict((1,))
        terms["short_term"] = temporal_loss(x, short, {1: short.masks[1]})
    if weights.gamma > 0 and context.offsets:
        terms["long_term"] = temporal_loss(x, context)
    if weights.delta > 0 and context.offsets:
        nearest = context.offsets[0]
        terms["trail"] = flow_trail_loss(x, context.warped[nearest], context.masks[nearest], masked_trail)
    return terms


def total_loss(
    x,
    weights: LossWeights,
    context: Optional[FrameContext] = None,
    dream_term: Optional[Callable[[Tensor], Tensor]] = None,
    masked_trail: bool = False,
) -> Tensor:
    """alpha*L_dream + beta*L_st + gamma*L_lt + delta*L_f; zero-weight terms are skipped"""
    coefficients = {"dream": weights.alpha, "short_term": weights.beta, "long_term": weights.gamma, "trail": weights.delta}
    loss = Tensor(0.0)
    for name, term in loss_terms(x, weights, context, dream_term, masked_trail).items():
        loss = loss + term * coefficients[name]
    return loss
