"""
Tests for presets, frame initialization, shot changes, hallucination and the
frame-by-frame video pipeline
"""

import json

import numpy as np
import pytest

from conftest import make_micro_net, translating_video
from errors import ContractError, IndexRangeError, MissingInputError, ShapeError, UnknownPresetError, UnsupportedSizeError, ValidationError
from flowlab import ConsistencyMask, FlowMemory, SyntheticFlowSource, synth_flow
from pipeline import (
    DreamSettings,
    FrameJob,
    LucidDreamPipeline,
    build_context,
    detect_shot_change,
    flicker_from_source,
    flicker_metric,
    init_frame,
    preset_table,
    resolve_preset,
)
from temporal_losses import total_loss
from tensor_core import Tensor
from tiler import frame_rng

FAST = {"n_origins": 1, "n_steps": 2}


def fast_pipeline(net, **overrides) -> LucidDreamPipeline:
    return LucidDreamPipeline(net, DreamSettings.defaults(**{**FAST, **overrides}))


def zero_pair(height: int, width: int):
    return synth_flow("translation", (0, 0), height, width)


def scene_cut_pair(height: int, width: int):
    """Backward flow pointing far outside the frame: every pixel inconsistent"""
    forward, backward = zero_pair(height, width)
    backward.uv[..., 0] = 1000.0
    return forward, backward


@pytest.fixture
def frames(rng):
    return [rng.uniform(0.2, 0.8, size=(32, 40, 3)).astype(np.float32) for _ in range(4)]


# =============================================================================
# Presets
# =============================================================================


class TestPresets:
    @pytest.mark.parametrize(
        "name,alpha,beta,gamma,delta,offsets,init_policy",
        [
            ("per_frame", 10000, 0, 0, 0, (1,), "original_content"),
            ("short_term", 10000, 300, 0, 0, (1,), "original_content"),
            ("long_term", 10000, 0, 1000, 0, (1, 2, 4, 8, 16, 32), "original_content"),
            ("trail", 10000, 1, 0, 500, (1,), "warped_previous"),
            ("decay", 10000, 3, 0, 0, (1,), "original_content"),
            ("trail_decay", 10000, 3, 0, 0, (1,), "warped_previous"),
        ],
    )
    def test_preset_constants(self, name, alpha, beta, gamma, delta, offsets, init_policy):
        preset = resolve_preset(name)
        weights = preset.weights
        assert (weights.alpha, weights.beta, weights.gamma, weights.delta) == (alpha, beta, gamma, delta)
        assert preset.offsets == offsets
        assert preset.init_policy == init_policy
        assert preset.k_base == 12

    def test_over_hallucination_counts(self):
        assert resolve_preset("short_term").iterations(fresh_start=True) == 12
        assert resolve_preset("short_term").iterations(fresh_start=False) == 30

    def test_unknown_preset(self):
        with pytest.raises(UnknownPresetError):
            resolve_preset("vaporwave")

    def test_overrides(self):
        preset = resolve_preset("short_term").with_overrides(beta=3.0, k_over=20)
        assert preset.weights.beta == 3.0
        assert preset.weights.alpha == 10000.0
        assert preset.k_over == 20

    def test_unknown_override(self):
        with pytest.raises(ValidationError):
            resolve_preset("short_term").with_overrides(zeta=1.0)

    def test_k_base_above_k_over(self):
        with pytest.raises(ValidationError):
            resolve_preset("short_term").with_overrides(k_base=40)

    def test_table_lists_every_preset(self):
        table = preset_table()
        assert set(table.index) == {"per_frame", "short_term", "long_term", "trail", "decay", "trail_decay"}
        assert table.loc["long_term", "offsets"] == "1,2,4,8,16,32"


# =============================================================================
# Frame-level decisions
# =============================================================================


class TestDetectShotChange:
    def mask_with_fraction(self, consistent: int) -> ConsistencyMask:
        valid = np.zeros(100, dtype=bool)
        valid[:consistent] = True
        return ConsistencyMask(valid.reshape(10, 10))

    def test_mostly_inconsistent(self):
        assert detect_shot_change(self.mask_with_fraction(10))

    def test_fully_consistent(self):
        assert not detect_shot_change(self.mask_with_fraction(100))

    def test_threshold_is_inclusive(self):
        assert detect_shot_change(self.mask_with_fraction(15))
        assert not detect_shot_change(self.mask_with_fraction(16))

    def test_custom_threshold(self):
        assert not detect_shot_change(self.mask_with_fraction(10), threshold=0.95)


class TestInitFrame:
    def test_first_frame_is_original(self, frames):
        for name in ("per_frame", "trail"):
            np.testing.assert_array_equal(init_frame(FrameJob(index=1, frame=frames[0]), resolve_preset(name)), frames[0])

    def test_trail_with_zero_flow_copies_previous_output(self, frames):
        job = FrameJob(index=2, frame=frames[1], priors={1: frames[0]}, flows={1: zero_pair(32, 40)})
        np.testing.assert_array_equal(init_frame(job, resolve_preset("trail")), frames[0])

    def test_decay_starts_from_original(self, frames):
        job = FrameJob(index=7, frame=frames[3])
        np.testing.assert_array_equal(init_frame(job, resolve_preset("decay")), frames[3])

    def test_deoccluded_pixels_use_original(self, frames):
        # backward flow u=-1: column 0 samples outside the previous frame
        pair = synth_flow("translation", (1, 0), 32, 40)
        job = FrameJob(index=2, frame=frames[1], priors={1: frames[0]}, flows={1: pair})
        x0 = init_frame(job, resolve_preset("trail"))
        np.testing.assert_array_equal(x0[:, 0], frames[1][:, 0])
        np.testing.assert_array_equal(x0[:, 1:], frames[0][:, :-1])

    def test_shot_change_restarts_from_original(self, frames):
        job = FrameJob(index=2, frame=frames[1], priors={1: frames[0]}, flows={1: zero_pair(32, 40)}, is_shot_change=True)
        np.testing.assert_array_equal(init_frame(job, resolve_preset("trail")), frames[1])

    def test_warped_init_needs_previous_output(self, frames):
        with pytest.raises(ContractError):
            init_frame(FrameJob(index=3, frame=frames[2]), resolve_preset("trail_decay"))

    def test_offset_before_first_frame(self, frames):
        with pytest.raises(ContractError):
            FrameJob(index=2, frame=frames[1], priors={2: frames[0]})


class TestBuildContext:
    def test_long_term_weights_attached(self, frames):
        flows = {1: zero_pair(32, 40), 2: zero_pair(32, 40)}
        masks = {1: ConsistencyMask(np.eye(32, 40)), 2: ConsistencyMask(np.ones((32, 40)))}
        job = FrameJob(index=3, frame=frames[2], priors={1: frames[1], 2: frames[0]}, flows=flows, masks=masks)
        context = build_context(job, [1, 2])
        np.testing.assert_array_equal(context.warped[2], frames[0])
        np.testing.assert_array_equal(context.long_term[2], 1 - np.eye(32, 40))


# =============================================================================
# Hallucination
# =============================================================================


class TestHallucinate:
    def test_zero_iterations_leave_image(self, micro_net, frames):
        output = fast_pipeline(micro_net).hallucinate(frames[0], resolve_preset("per_frame"), iterations=0)
        np.testing.assert_array_equal(output.data, frames[0])

    def test_zero_weights_leave_image(self, micro_net, frames):
        preset = resolve_preset("per_frame").with_overrides(alpha=0.0)
        output = fast_pipeline(micro_net).hallucinate(frames[0], preset)
        np.testing.assert_array_equal(output.data, frames[0])

    def test_steps_lower_the_tile_loss(self, micro_net, rng):
        pipeline = fast_pipeline(micro_net)
        preset = resolve_preset("per_frame")
        dream = pipeline.dream_term()
        tile = rng.uniform(0.3, 0.7, size=(32, 32, 3)).astype(np.float32)
        updated, _ = pipeline._optimize_tile(tile, preset.weights, None, dream, 5)
        assert dream(Tensor(updated)).item() < dream(Tensor(tile)).item()
        assert updated.min() >= 0.0 and updated.max() <= 1.0

    def test_reported_loss_is_after_last_step(self, micro_net, rng):
        pipeline = fast_pipeline(micro_net)
        preset = resolve_preset("per_frame")
        dream = pipeline.dream_term()
        tile = rng.uniform(0.3, 0.7, size=(32, 32, 3)).astype(np.float32)
        updated, loss = pipeline._optimize_tile(tile, preset.weights, None, dream, 3)
        assert loss == total_loss(Tensor(updated), preset.weights, None, dream).item()
        assert loss < total_loss(Tensor(tile), preset.weights, None, dream).item()

    def test_changes_pixels(self, micro_net, frames):
        output = fast_pipeline(micro_net).hallucinate(frames[0], resolve_preset("per_frame"))
        assert not np.array_equal(output.data, frames[0])

    def test_same_stream_same_result(self, micro_net, frames):
        pipeline = fast_pipeline(micro_net)
        preset = resolve_preset("per_frame")
        first = pipeline.hallucinate(frames[0], preset, rng=frame_rng(5, 1)).data
        second = pipeline.hallucinate(frames[0], preset, rng=frame_rng(5, 1)).data
        np.testing.assert_array_equal(first, second)

    def test_thread_pool_matches_serial(self, micro_net, rng):
        image = rng.uniform(size=(64, 64, 3)).astype(np.float32)
        preset = resolve_preset("per_frame")
        serial = fast_pipeline(micro_net).hallucinate(image, preset, rng=frame_rng(0, 1)).data
        threaded = fast_pipeline(micro_net, tile_workers=4).hallucinate(image, preset, rng=frame_rng(0, 1)).data
        np.testing.assert_array_equal(serial, threaded)

    def test_frame_smaller_than_tile(self, micro_net):
        with pytest.raises(UnsupportedSizeError):
            fast_pipeline(micro_net).hallucinate(np.zeros((16, 40, 3)), resolve_preset("per_frame"))

    def test_class_out_of_range(self, micro_net):
        with pytest.raises(IndexRangeError):
            fast_pipeline(micro_net, class_index=10)

    def test_feature_objective(self, micro_net, frames):
        pipeline = fast_pipeline(micro_net, objective="features", layer=2, feature_map=1)
        output = pipeline.hallucinate(frames[0], resolve_preset("per_frame"))
        assert not np.array_equal(output.data, frames[0])

    def test_feature_objective_bad_map(self, micro_net):
        with pytest.raises(IndexRangeError):
            fast_pipeline(micro_net, objective="features", layer=2, feature_map=9)


# =============================================================================
# Video pipeline
# =============================================================================


class TestProcessVideo:
    def test_single_frame_matches_image_dreaming(self, micro_net, frames):
        pipeline = fast_pipeline(micro_net)
        preset = resolve_preset("short_term")
        outputs, manifest = pipeline.process_video(frames[:1], None, preset)
        image, _ = pipeline.dream_image(frames[0], preset)
        direct = pipeline.hallucinate(frames[0], preset, rng=frame_rng(0, 1)).data
        np.testing.assert_array_equal(outputs[0], image)
        np.testing.assert_array_equal(outputs[0], direct)
        assert manifest.statuses == ["first"]
        assert manifest.flicker is None

    def test_inserted_unrelated_frame_is_a_shot_change(self, micro_net, frames):
        flows = FlowMemory({(2, 1): scene_cut_pair(32, 40), (3, 1): zero_pair(32, 40)})
        _, manifest = fast_pipeline(micro_net).process_video(frames[:3], flows, resolve_preset("short_term"))
        assert manifest.statuses == ["first", "shot_change", "normal"]
        assert manifest.iteration_counts == [12, 12, 30]
        assert manifest.shot_change_flags == [False, True, False]
        assert manifest.frames[1].inconsistency == 1.0
        assert manifest.frames[2].offsets == [1]

    def test_long_term_offsets_respect_first_frame(self, micro_net, frames):
        source = SyntheticFlowSource("translation", (0, 0), 32, 40)
        _, manifest = fast_pipeline(micro_net).process_video(frames, source, resolve_preset("long_term"))
        assert [record.offsets for record in manifest.frames] == [[], [1], [1, 2], [1, 2]]

    def test_offsets_do_not_reach_across_a_shot_change(self, micro_net, frames):
        flows = FlowMemory(
            {
                (2, 1): zero_pair(32, 40),
                (3, 1): scene_cut_pair(32, 40),
                (3, 2): zero_pair(32, 40),
                (4, 1): zero_pair(32, 40),
                (4, 2): zero_pair(32, 40),
            }
        )
        _, manifest = fast_pipeline(micro_net).process_video(frames, flows, resolve_preset("long_term"))
        assert manifest.statuses == ["first", "normal", "shot_change", "normal"]
        assert [record.offsets for record in manifest.frames] == [[], [1], [], [1]]

    def test_missing_flow_pair(self, micro_net, frames):
        flows = FlowMemory({(2, 1): zero_pair(32, 40)})
        with pytest.raises(MissingInputError) as excinfo:
            fast_pipeline(micro_net).process_video(frames[:3], flows, resolve_preset("short_term"))
        assert excinfo.value.missing == ["forward_2_3.flo", "backward_3_2.flo"]

    def test_video_without_flows(self, micro_net, frames):
        with pytest.raises(ContractError):
            fast_pipeline(micro_net).process_video(frames[:2], None, resolve_preset("short_term"))

    def test_frames_change_size(self, micro_net, frames):
        resized = [frames[0], frames[1][:, :36]]
        with pytest.raises(ShapeError):
            fast_pipeline(micro_net).process_video(resized, SyntheticFlowSource("translation", (0, 0), 32, 40), resolve_preset("short_term"))

    def test_flow_size_mismatch(self, micro_net, frames):
        flows = FlowMemory({(2, 1): zero_pair(32, 36)})
        with pytest.raises(ShapeError):
            fast_pipeline(micro_net).process_video(frames[:2], flows, resolve_preset("short_term"))

    def test_reruns_are_identical(self, micro_net, frames):
        source = SyntheticFlowSource("translation", (1, 0), 32, 40)
        preset = resolve_preset("trail")
        first_outputs, first = fast_pipeline(micro_net).process_video(frames[:3], source, preset)
        second_outputs, second = fast_pipeline(micro_net).process_video(frames[:3], source, preset)
        for a, b in zip(first_outputs, second_outputs):
            np.testing.assert_array_equal(a, b)
        assert first.to_dict() == second.to_dict()

    def test_timing_only_when_requested(self, micro_net, frames):
        source = SyntheticFlowSource("translation", (0, 0), 32, 40)
        _, plain = fast_pipeline(micro_net).process_video(frames[:2], source, resolve_preset("per_frame"))
        _, timed = fast_pipeline(micro_net, record_timing=True).process_video(frames[:2], source, resolve_preset("per_frame"))
        assert "timing" not in plain.to_dict()
        assert "seconds" not in plain.to_dict()["frames"][0]
        assert timed.timing["total_seconds"] >= 0
        assert all(record.seconds is not None for record in timed.frames)

    def test_manifest_files(self, micro_net, frames, tmp_path):
        source = SyntheticFlowSource("translation", (0, 0), 32, 40)
        _, manifest = fast_pipeline(micro_net).process_video(frames[:3], source, resolve_preset("short_term"), {"seed": 0})
        assert manifest.save(tmp_path)
        data = json.loads((tmp_path / "manifest.json").read_text())
        assert data["preset"] == "short_term"
        assert data["shot_changes"] == 0
        assert [entry["iterations"] for entry in data["frames"]] == [12, 30, 30]
        assert len((tmp_path / "frames.csv").read_text().strip().splitlines()) == 4

        first_bytes = (tmp_path / "manifest.json").read_bytes()
        manifest.save(tmp_path)
        assert (tmp_path / "manifest.json").read_bytes() == first_bytes


# =============================================================================
# Flicker
# =============================================================================


class TestFlicker:
    def test_static_video(self, rng):
        frame = rng.uniform(size=(4, 4, 3))
        flows = [zero_pair(4, 4)[1]] * 2
        masks = [ConsistencyMask(np.ones((4, 4)))] * 2
        assert flicker_metric([frame, frame, frame], flows, masks) == 0.0

    def test_hand_built_pair(self):
        previous = np.zeros((1, 4, 1))
        current = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1)
        mask = ConsistencyMask(np.array([[1, 1, 0, 0]]))
        assert flicker_metric([previous, current], [zero_pair(1, 4)[1]], [mask]) == pytest.approx(1.25)

    def test_outputs_following_the_flow(self):
        frames = translating_video(3, 16, 20, dx=2)
        source = SyntheticFlowSource("translation", (2, 0), 16, 20)
        assert flicker_from_source(frames, source) == pytest.approx(0.0, abs=1e-12)

    def test_needs_two_frames(self, rng):
        with pytest.raises(ContractError):
            flicker_metric([rng.uniform(size=(2, 2, 3))], [], [])

    @pytest.mark.slow
    def test_short_term_consistency_reduces_flicker(self):
        net = make_micro_net(seed=1, scale=0.1)
        frames = translating_video(8, 48, 64, dx=2)
        source = SyntheticFlowSource("translation", (2, 0), 48, 64)
        settings = DreamSettings.defaults(n_origins=3, n_steps=10)
        _, baseline = LucidDreamPipeline(net, settings).process_video(frames, source, resolve_preset("per_frame"))
        _, consistent = LucidDreamPipeline(net, settings).process_video(frames, source, resolve_preset("short_term"))
        assert consistent.flicker <= 0.7 * baseline.flicker
