"""
LucidDream Pipeline
Orchestrates presets, frame initialization, tiled Adam hallucination,
over-hallucination scheduling, shot-change handling and run manifests
"""

import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from dream_config import (
    INIT_POLICIES,
    OBJECTIVES,
    get_dream_settings,
    get_iteration_settings,
    get_optimizer_settings,
    get_preset_table,
    get_preset_values,
    get_run_defaults,
    get_shot_change_threshold,
)
from dreamnet import DreamNet
from errors import (
    ContractError,
    IndexRangeError,
    MissingInputError,
    ShapeError,
    UnknownPresetError,
    UnsupportedSizeError,
    ValidationError,
)
from flowlab import (
    ConsistencyMask,
    ConsistencyThresholds,
    FlowField,
    consistency_mask,
    inconsistency_fraction,
    warp,
)
from temporal_losses import FrameContext, LossWeights, controlled_loss, layer_dream_loss, temporal_loss, total_loss
from tensor_core import AdamState, Tensor, adam_step
from tiler import apply_tilewise, frame_rng, make_schedule
from utils import format_seconds, save_json_file

logger = logging.getLogger(__name__)

DreamTerm = Callable[[Tensor], Tensor]

# =============================================================================
# PRESETS
# =============================================================================


@dataclass(frozen=True)
class EffectPreset:
    """Loss weights, offsets J, initialization policy and iteration counts of one effect"""

    name: str
    weights: LossWeights
    offsets: Tuple[int, ...]
    init_policy: str
    k_base: int
    k_over: int

    def __post_init__(self):
        offsets = tuple(int(j) for j in self.offsets)
        if not offsets or any(j <= 0 for j in offsets) or list(offsets) != sorted(set(offsets)):
            raise ValidationError(f"offsets must be strictly increasing positive integers, got {list(self.offsets)}")
        object.__setattr__(self, "offsets", offsets)
        if self.init_policy not in INIT_POLICIES:
            raise ValidationError(f"init policy must be one of {INIT_POLICIES}, got {self.init_policy!r}")
        if self.k_base < 0 or self.k_over < 0:
            raise ValidationError(f"iteration counts must be >= 0, got k_base={self.k_base}, k_over={self.k_over}")
        if self.k_base > self.k_over:
            raise ValidationError(f"k_base ({self.k_base}) must not exceed k_over ({self.k_over})")

    def iterations(self, fresh_start: bool) -> int:
        """k_base for first and shot-change frames, k_over otherwise"""
        return self.k_base if fresh_start else self.k_over

    def with_overrides(self, **overrides) -> "EffectPreset":
        """Copy with weight (alpha..delta) and table (offsets, k_base, ...) overrides applied"""
        weight_keys = {"alpha", "beta", "gamma", "delta"}
        weights = {name: overrides.pop(name) for name in list(overrides) if name in weight_keys}
        unknown = set(overrides) - {"offsets", "init_policy", "k_base", "k_over"}
        if unknown:
            raise ValidationError(f"Unknown preset override(s): {sorted(unknown)}")
        return replace(self, weights=replace(self.weights, **weights), **overrides)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "alpha": self.weights.alpha,
            "beta": self.weights.beta,
            "gamma": self.weights.gamma,
            "delta": self.weights.delta,
            "offsets": list(self.offsets),
            "init_policy": self.init_policy,
            "k_base": self.k_base,
            "k_over": self.k_over,
        }


def resolve_preset(name: str) -> EffectPreset:
    """Look up a named effect in the preset table"""
    try:
        values = get_preset_values(name)
    except KeyError:
        raise UnknownPresetError(f"Unknown preset {name!r}; choose from {sorted(get_preset_table())}") from None
    return EffectPreset(
        name=name,
        weights=LossWeights(values["alpha"], values["beta"], values["gamma"], values["delta"]),
        offsets=tuple(values["offsets"]),
        init_policy=values["init_policy"],
        k_base=values["k_base"],
        k_over=values["k_over"],
    )


def preset_table() -> pd.DataFrame:
    """All presets as a table, one row per preset"""
    rows = [resolve_preset(name).to_dict() for name in get_preset_table()]
    table = pd.DataFrame(rows).set_index("name")
    table["offsets"] = table["offsets"].apply(lambda js: ",".join(str(j) for j in js))
    return table


# =============================================================================
# RUN SETTINGS
# =============================================================================


@dataclass(frozen=True)
class DreamSettings:
    """Objective, optimizer and scheduling knobs shared by every frame of a run"""

    objective: str = "logits"
    class_index: int = 0
    layer: int = 0
    feature_map: int = 0
    masked_trail: bool = False
    tile_workers: int = 1
    n_origins: Optional[int] = None
    n_steps: Optional[int] = None
    learning_rate: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    shot_threshold: float = 0.85
    thresholds: ConsistencyThresholds = field(default_factory=ConsistencyThresholds)
    seed: int = 0
    record_timing: bool = False

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValidationError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.class_index < 0:
            raise IndexRangeError(f"class index must be >= 0, got {self.class_index}")
        if self.tile_workers < 1:
            raise ValidationError(f"tile_workers must be >= 1, got {self.tile_workers}")
        for name in ("n_origins", "n_steps"):
            value = getattr(self, name)
            if value is not None and value < 0:
                raise ValidationError(f"{name} must be >= 0, got {value}")
        if not self.learning_rate > 0:
            raise ValidationError(f"learning rate must be positive, got {self.learning_rate}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.epsilon > 0):
            raise ValidationError("Adam betas must lie in [0, 1) and epsilon must be positive")
        if not 0.0 <= self.shot_threshold <= 1.0:
            raise ValidationError(f"shot threshold must lie in [0, 1], got {self.shot_threshold}")

    @classmethod
    def defaults(cls, **overrides) -> "DreamSettings":
        """Settings from dream_config with keyword overrides"""
        dream = get_dream_settings()
        optimizer = get_optimizer_settings()
        values = {
            **{key: dream[key] for key in ("objective", "class_index", "layer", "feature_map", "masked_trail", "tile_workers")},
            **get_iteration_settings(),
            "learning_rate": optimizer["learning_rate"],
            "beta1": optimizer["beta1"],
            "beta2": optimizer["beta2"],
            "epsilon": optimizer["epsilon"],
            "shot_threshold": get_shot_change_threshold(),
            "thresholds": ConsistencyThresholds.from_settings(),
            "seed": get_run_defaults()["seed"],
            "record_timing": get_run_defaults()["record_timing"],
        }
        values.update(overrides)
        return cls(**values)


# =============================================================================
# FRAME JOBS AND MANIFEST
# =============================================================================


@dataclass
class FrameJob:
    """Everything frame i needs: its content, prior outputs, flows and masks per offset j"""

    index: int
    frame: np.ndarray
    priors: Dict[int, np.ndarray] = field(default_factory=dict)
    flows: Dict[int, Tuple[FlowField, FlowField]] = field(default_factory=dict)
    masks: Dict[int, ConsistencyMask] = field(default_factory=dict)
    is_shot_change: bool = False
    iterations: int = 0
    inconsistency: Optional[float] = None

    def __post_init__(self):
        if self.index < 1:
            raise ValidationError(f"frame indices start at 1, got {self.index}")
        for j in set(self.priors) | set(self.flows) | set(self.masks):
            if j < 1 or self.index - j < 1:
                raise ContractError(f"frame {self.index} cannot reference offset {j}")

    @property
    def is_first(self) -> bool:
        return self.index == 1

    @property
    def fresh_start(self) -> bool:
        return self.is_first or self.is_shot_change

    @property
    def status(self) -> str:
        if self.is_first:
            return "first"
        return "shot_change" if self.is_shot_change else "normal"


@dataclass
class FrameRecord:
    index: int
    status: str
    iterations: int
    offsets: List[int]
    inconsistency: Optional[float]
    final_loss: Optional[float]
    seconds: Optional[float] = None

    @property
    def is_shot_change(self) -> bool:
        return self.status == "shot_change"

    def to_dict(self) -> Dict[str, Any]:
        entry = {
            "index": self.index,
            "status": self.status,
            "shot_change": self.is_shot_change,
            "iterations": self.iterations,
            "offsets": list(self.offsets),
            "inconsistency": self.inconsistency,
            "final_loss": self.final_loss,
        }
        if self.seconds is not None:
            entry["seconds"] = self.seconds
        return entry


@dataclass
class RunManifest:
    """Per-run record: preset, seed, effective config and one entry per frame"""

    preset: str
    seed: int
    config: Dict[str, Any] = field(default_factory=dict)
    frames: List[FrameRecord] = field(default_factory=list)
    flicker: Optional[float] = None
    timing: Optional[Dict[str, float]] = None

    @property
    def shot_change_flags(self) -> List[bool]:
        return [record.is_shot_change for record in self.frames]

    @property
    def statuses(self) -> List[str]:
        return [record.status for record in self.frames]

    @property
    def iteration_counts(self) -> List[int]:
        return [record.iterations for record in self.frames]

    def to_dict(self) -> Dict[str, Any]:
        data = {
            "preset": self.preset,
            "seed": self.seed,
            "config": self.config,
            "frames": [record.to_dict() for record in self.frames],
            "shot_changes": sum(self.shot_change_flags),
            "flicker": self.flicker,
        }
        if self.timing is not None:
            data["timing"] = self.timing
        return data

    def to_frame(self) -> pd.DataFrame:
        """Per-frame table"""
        table = pd.DataFrame([record.to_dict() for record in self.frames])
        if not table.empty:
            table["offsets"] = table["offsets"].apply(lambda js: ";".join(str(j) for j in js))
        return table

    def save(self, directory: Union[str, Path]) -> bool:
        """Write manifest.json and frames.csv; failures are logged, not raised"""
        defaults = get_run_defaults()
        directory = Path(directory)
        saved = save_json_file(self.to_dict(), str(directory / defaults["manifest_name"]))
        try:
            self.to_frame().to_csv(directory / defaults["frame_table_name"], index=False)
        except OSError as e:
            logger.error(f"Error saving frame table to {directory}: {e}")
            saved = False
        if not saved:
            logger.warning(f"Run manifest for {directory} is incomplete")
        return saved


# =============================================================================
# FRAME-LEVEL DECISIONS
# =============================================================================


def detect_shot_change(mask: ConsistencyMask, threshold: Optional[float] = None) -> bool:
    """True when at least `threshold` (default 0.85) of the j=1 pixels are inconsistent"""
    threshold = get_shot_change_threshold() if threshold is None else threshold
    return inconsistency_fraction(mask) >= threshold


def init_frame(job: FrameJob, preset: EffectPreset) -> np.ndarray:
    """
    Original content, or the previous output warped into frame i. Pixels the
    j=1 mask marks inconsistent (de-occlusions) start from original content.
    """
    original = np.array(job.frame, dtype=np.float32)
    if job.fresh_start or preset.init_policy == "original_content":
        return original
    if 1 not in job.priors or 1 not in job.flows:
        raise ContractError(f"frame {job.index} needs the previous output and its flow for warped initialization")

    _, backward = job.flows[1]
    warped, _ = warp(job.priors[1], backward)
    mask = job.masks[1] if 1 in job.masks else consistency_mask(*job.flows[1])
    return np.where(mask.valid[..., None], warped.data, original).astype(np.float32)


def build_context(job: FrameJob, offsets: Sequence[int]) -> FrameContext:
    """Warped prior outputs and masks for the offsets frame i may use"""
    warped = {}
    for j in offsets:
        _, backward = job.flows[j]
        warped[j] = warp(job.priors[j], backward)[0].data
    context = FrameContext(offsets=tuple(offsets), warped=warped, masks={j: job.masks[j] for j in offsets})
    return context.with_long_term_weights() if context else context


def flicker_metric(
    outputs: Sequence[np.ndarray],
    flows: Sequence[FlowField],
    masks: Sequence[ConsistencyMask],
) -> float:
    """
    Mean over consecutive pairs of the short-term loss between x^(i) and the
    warped x^(i-1). flows[n] and masks[n] belong to the pair (n+1, n+2):
    backward flows from frame n+2 to frame n+1.
    """
    if len(outputs) < 2:
        raise ContractError(f"flicker needs at least two frames, got {len(outputs)}")
    if len(flows) != len(outputs) - 1 or len(masks) != len(outputs) - 1:
        raise ContractError("flicker needs one flow and one mask per consecutive frame pair")

    values = []
    for previous, current, backward, mask in zip(outputs[:-1], outputs[1:], flows, masks):
        warped, _ = warp(previous, backward)
        context = FrameContext(offsets=(1,), warped={1: warped.data}, masks={1: mask})
        values.append(temporal_loss(Tensor(current), context).item())
    return float(np.mean(values))


def flicker_from_source(outputs: Sequence[np.ndarray], flow_source, thresholds: Optional[ConsistencyThresholds] = None) -> float:
    """Flicker of a rendered sequence using the j=1 flows of a flow source"""
    flows, masks = [], []
    for i in range(2, len(outputs) + 1):
        forward, backward = flow_source.pair(i, 1)
        flows.append(backward)
        masks.append(consistency_mask(forward, backward, thresholds))
    return flicker_metric(outputs, flows, masks)


# =============================================================================
# PIPELINE
# =============================================================================


class LucidDreamPipeline:
    """Frame-by-frame hallucination with a fixed network, settings and seed"""

    def __init__(self, network: DreamNet, settings: Optional[DreamSettings] = None):
        self.network = network
        self.settings = settings or DreamSettings.defaults()
        if self.settings.objective == "logits" and self.settings.class_index >= network.class_count:
            raise IndexRangeError(
                f"class index {self.settings.class_index} outside 0..{network.class_count - 1}"
            )
        if self.settings.objective == "features":
            # raises on a bad layer / feature map before any frame is touched
            self.network._check_feature_index(self.settings.layer, self.settings.feature_map)

    def dream_term(self, class_index: Optional[int] = None) -> DreamTerm:
        """L_c on the logits, or L_{l,a} on a feature map, as a function of one tile"""
        settings = self.settings
        if settings.objective == "features":
            return lambda x: layer_dream_loss(self.network.forward_features(x, settings.layer, settings.feature_map))
        index = settings.class_index if class_index is None else class_index
        if not 0 <= index < self.network.class_count:
            raise IndexRangeError(f"class index {index} outside 0..{self.network.class_count - 1}")
        return lambda x: controlled_loss(self.network.forward_logits(x), index)

    def _optimize_tile(
        self,
        tile: np.ndarray,
        weights: LossWeights,
        context: Optional[FrameContext],
        dream_term: DreamTerm,
        n_steps: int,
    ) -> Tuple[np.ndarray, Optional[float]]:
        """n_steps Adam steps on one tile with fresh optimizer state; clamps to [0, 1] after every step"""
        settings = self.settings
        param = Tensor(tile, requires_grad=True)
        state = AdamState.for_param(param, settings.learning_rate, settings.beta1, settings.beta2, settings.epsilon)
        last_loss = None
        stepped = False
        for _ in range(n_steps):
            param.zero_grad()
            loss = total_loss(param, weights, context, dream_term, settings.masked_trail)
            last_loss = loss.item()
            if not loss.requires_grad:
                break  # constant objective: no gradient, nothing moves
            loss.backward()
            adam_step(param, state)
            param.clamp_(0.0, 1.0)
            stepped = True
        if stepped:
            # loss of the tile that is returned, after the last step
            last_loss = total_loss(Tensor(param.numpy()), weights, context, dream_term, settings.masked_trail).item()
        return param.numpy(), last_loss

    def _hallucinate(
        self,
        x0,
        preset: EffectPreset,
        context: Optional[FrameContext],
        iterations: int,
        rng: np.random.Generator,
        class_index: Optional[int] = None,
    ) -> Tuple[np.ndarray, Optional[float]]:
        image = np.array(x0.data if isinstance(x0, Tensor) else x0, dtype=np.float32)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ShapeError(f"frames must be HxWx3, got {image.shape}")
        height, width = image.shape[:2]
        tile_size = self.network.tile_size
        if tile_size > height or tile_size > width:
            raise UnsupportedSizeError(f"frame {height}x{width} is smaller than the {tile_size}x{tile_size} tile")
        dream_term = self.dream_term(class_index)
        if iterations == 0:
            return image, None

        settings = self.settings
        n_origins = iterations if settings.n_origins is None else settings.n_origins
        n_steps = iterations if settings.n_steps is None else settings.n_steps
        weights = preset.weights
        if context is not None and not context:
            context = None
        if weights.alpha == 0 and (context is None or not weights.uses_temporal):
            logger.debug("All active loss weights are zero; frame left unchanged")
            return image, 0.0

        final_loss = None
        for origin_number in range(n_origins):
            schedule = make_schedule(height, width, tile_size, rng)
            local = context.rolled(schedule.origin) if context is not None else None
            tile_losses: Dict[Tuple[int, int], Optional[float]] = {}

            def update(tile: np.ndarray, corner: Tuple[int, int]) -> np.ndarray:
                tile_context = local.crop(corner, tile_size) if local is not None else None
                updated, tile_losses[corner] = self._optimize_tile(tile, weights, tile_context, dream_term, n_steps)
                return updated

            image = apply_tilewise(image, schedule, update, settings.tile_workers)
            losses = [tile_losses[corner] for corner in schedule.corners if tile_losses.get(corner) is not None]
            final_loss = float(np.mean(losses)) if losses else final_loss
            logger.debug(
                f"Origin {origin_number + 1}/{n_origins} at {schedule.origin}: "
                f"{len(schedule.corners)} tiles, mean tile loss {final_loss}"
            )
        return image, final_loss

    def hallucinate(
        self,
        x0,
        preset: EffectPreset,
        context: Optional[FrameContext] = None,
        iterations: Optional[int] = None,
        rng: Optional[np.random.Generator] = None,
        class_index: Optional[int] = None,
    ) -> Tensor:
        """
        k origin selections, each followed by k Adam steps on every tile of the
        schedule against the total loss restricted to that tile. k defaults to
        k_base; n_origins / n_steps in the settings override the two counts.
        """
        iterations = preset.k_base if iterations is None else iterations
        rng = rng if rng is not None else frame_rng(self.settings.seed, 1)
        image, _ = self._hallucinate(x0, preset, context, iterations, rng, class_index)
        return Tensor(image)

    def dream_image(self, image: np.ndarray, preset: EffectPreset) -> Tuple[np.ndarray, RunManifest]:
        """Single-image dreaming: a one-frame video with k_base and no temporal terms"""
        outputs, manifest = self.process_video([image], None, preset)
        return outputs[0], manifest

    def process_video(
        self,
        frames: Sequence[np.ndarray],
        flow_source,
        preset: EffectPreset,
        config: Optional[Dict[str, Any]] = None,
    ) -> Tuple[List[np.ndarray], RunManifest]:
        """Hallucinate frames in order; frame i sees finalized outputs of frames i-j"""
        settings = self.settings
        frames = [np.asarray(frame, dtype=np.float32) for frame in frames]
        if not frames:
            raise ValidationError("no frames to process")
        size = frames[0].shape
        drift = [i + 1 for i, frame in enumerate(frames) if frame.shape != size]
        if drift:
            raise ShapeError(f"frames {drift} differ in size from frame 1 {size}")

        # Step 1: make sure every flow the run will read exists
        required = sorted({(i, j) for i in range(2, len(frames) + 1) for j in set(preset.offsets) | {1} if i - j >= 1})
        if required:
            if flow_source is None:
                raise ContractError(f"{len(frames)} frames need a flow source")
            missing = flow_source.missing(required)
            if missing:
                raise MissingInputError(f"Missing flow files: {', '.join(missing)}", missing)

        logger.info(f"Step 1: Hallucinating {len(frames)} frame(s) with preset {preset.name}")
        manifest = RunManifest(preset=preset.name, seed=settings.seed, config=dict(config or {}))
        outputs: List[np.ndarray] = []
        scene_start = 1
        run_started = time.perf_counter()

        for i, frame in enumerate(frames, start=1):
            frame_started = time.perf_counter()
            job = self._frame_job(i, frame, outputs, flow_source, preset)
            if job.is_shot_change:
                scene_start = i
            usable = [j for j in sorted(job.masks) if j in preset.offsets and i - j >= scene_start]
            context = build_context(job, usable) if not job.fresh_start and usable else None

            x0 = init_frame(job, preset)
            output, final_loss = self._hallucinate(x0, preset, context, job.iterations, frame_rng(settings.seed, i))
            outputs.append(output)

            seconds = time.perf_counter() - frame_started
            manifest.frames.append(
                FrameRecord(
                    index=i,
                    status=job.status,
                    iterations=job.iterations,
                    offsets=list(context.offsets) if context is not None else [],
                    inconsistency=job.inconsistency,
                    final_loss=final_loss,
                    seconds=round(seconds, 3) if settings.record_timing else None,
                )
            )
            logger.info(
                f"Frame {i}/{len(frames)}: {job.status}, k={job.iterations}, "
                f"offsets={manifest.frames[-1].offsets}, took {format_seconds(seconds)}"
            )

        # Step 2: flicker of the finished sequence
        if len(outputs) > 1:
            logger.info("Step 2: Measuring flicker")
            manifest.flicker = flicker_from_source(outputs, flow_source, settings.thresholds)
        if settings.record_timing:
            manifest.timing = {"total_seconds": round(time.perf_counter() - run_started, 3)}

        logger.info(f"Pipeline finished: {sum(manifest.shot_change_flags)} shot change(s)")
        return outputs, manifest

    def _frame_job(
        self,
        i: int,
        frame: np.ndarray,
        outputs: List[np.ndarray],
        flow_source,
        preset: EffectPreset,
    ) -> FrameJob:
        if i == 1:
            return FrameJob(index=1, frame=frame, iterations=preset.iterations(True))

        offsets = sorted(j for j in set(preset.offsets) | {1} if i - j >= 1)
        flows = {j: flow_source.pair(i, j) for j in offsets}
        for j, (forward, backward) in flows.items():
            if (backward.height, backward.width) != frame.shape[:2]:
                raise ShapeError(f"flows for pair ({i - j}, {i}) are {backward.height}x{backward.width}, frame is {frame.shape[:2]}")
        masks = {j: consistency_mask(*flows[j], self.settings.thresholds) for j in offsets}
        fraction = inconsistency_fraction(masks[1])
        shot_change = detect_shot_change(masks[1], self.settings.shot_threshold)
        if shot_change:
            logger.info(f"Frame {i}: shot change ({fraction:.1%} of pixels inconsistent)")
        return FrameJob(
            index=i,
            frame=frame,
            priors={j: outputs[i - j - 1] for j in offsets},
            flows=flows,
            masks=masks,
            is_shot_change=shot_change,
            iterations=preset.iterations(shot_change),
            inconsistency=fraction,
        )
