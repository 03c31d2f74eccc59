"""
LucidDream Configuration
Centralized, human-readable configuration for every hallucination parameter
"""

import copy

# =============================================================================
# EFFECT PRESETS
# =============================================================================

EFFECT_PRESETS = {
    "per_frame": {
        "alpha": 10000.0,
        "beta": 0.0,
        "gamma": 0.0,
        "delta": 0.0,
        "offsets": [1],
        "init_policy": "original_content",
        "k_base": 12,
        "k_over": 12,  # no over-hallucination for the flickering baseline
    },
    "short_term": {
        "alpha": 10000.0,
        "beta": 300.0,
        "gamma": 0.0,
        "delta": 0.0,
        "offsets": [1],
        "init_policy": "original_content",
        "k_base": 12,
        "k_over": 30,
    },
    "long_term": {
        "alpha": 10000.0,
        "beta": 0.0,
        "gamma": 1000.0,
        "delta": 0.0,
        "offsets": [1, 2, 4, 8, 16, 32],
        "init_policy": "original_content",
        "k_base": 12,
        "k_over": 30,
    },
    "trail": {
        "alpha": 10000.0,
        "beta": 1.0,
        "gamma": 0.0,
        "delta": 500.0,
        "offsets": [1],
        "init_policy": "warped_previous",
        "k_base": 12,
        "k_over": 30,
    },
    "decay": {
        "alpha": 10000.0,
        "beta": 3.0,
        "gamma": 0.0,
        "delta": 0.0,
        "offsets": [1],
        "init_policy": "original_content",
        "k_base": 12,
        "k_over": 30,
    },
    # delta stays 0 here: only the trail preset carries the flow-trail term
    "trail_decay": {
        "alpha": 10000.0,
        "beta": 3.0,
        "gamma": 0.0,
        "delta": 0.0,
        "offsets": [1],
        "init_policy": "warped_previous",
        "k_base": 12,
        "k_over": 30,
    },
}

INIT_POLICIES = ("original_content", "warped_previous")

# =============================================================================
# ITERATIONS
# =============================================================================

ITERATION_SETTINGS = {
    "n_origins": None,  # None = k origin selections
    "n_steps": None,  # None = k Adam steps per tile
}

# =============================================================================
# OPTIMIZER
# =============================================================================

OPTIMIZER_SETTINGS = {
    "learning_rate": 0.02,  # pixels in [0,1]
    "beta1": 0.9,
    "beta2": 0.999,
    "epsilon": 1e-8,
}

# =============================================================================
# TEMPORAL CONSISTENCY
# =============================================================================

CONSISTENCY_SETTINGS = {
    "disagreement_scale": 0.01,
    "disagreement_offset": 0.5,
    "motion_scale": 0.01,
    "motion_offset": 0.002,
}

SHOT_CHANGE_SETTINGS = {
    "threshold": 0.85,  # inclusive
}

# =============================================================================
# DREAM OBJECTIVE
# =============================================================================

DREAM_SETTINGS = {
    "objective": "logits",  # logits | features
    "class_index": 0,
    "layer": 0,  # features objective only
    "feature_map": 0,
    "masked_trail": False,
    "tile_workers": 1,
}

OBJECTIVES = ("logits", "features")

# =============================================================================
# RUN DEFAULTS
# =============================================================================

RUN_DEFAULTS = {
    "preset": "short_term",
    "seed": 0,
    "record_timing": False,
    "frame_pattern": "frame_{:04d}.ppm",
    "manifest_name": "manifest.json",
    "frame_table_name": "frames.csv",
}

# =============================================================================
# HELPER FUNCTIONS
# =============================================================================


def get_preset_table():
    """Get a copy of the effect preset table"""
    return copy.deepcopy(EFFECT_PRESETS)


def get_preset_values(name):
    """Get the constants of one preset"""
    if name not in EFFECT_PRESETS:
        raise KeyError(name)
    return copy.deepcopy(EFFECT_PRESETS[name])


def get_iteration_settings():
    return ITERATION_SETTINGS.copy()


def get_optimizer_settings():
    """Get the current Adam settings"""
    return OPTIMIZER_SETTINGS.copy()


def get_consistency_settings():
    """Get the current consistency-test constants"""
    return CONSISTENCY_SETTINGS.copy()


def get_shot_change_threshold():
    return SHOT_CHANGE_SETTINGS["threshold"]


def get_dream_settings():
    return DREAM_SETTINGS.copy()


def get_run_defaults():
    return RUN_DEFAULTS.copy()

