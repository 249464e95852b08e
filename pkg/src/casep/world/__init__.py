"""Synthetic background/target worlds with oracle ground truth."""

from casep.world.generate import (
    STREAMS,
    X,
    Y,
    ConfigError,
    GroundTruth,
    LabeledDataset,
    World,
    WorldConfig,
    build_world,
    clean_observation,
    make_splits,
    oracle_swap,
    oracle_swap_batch,
    oracle_truths,
    sample_background,
    sample_multi_salient,
    sample_target,
)

__all__ = [
    "STREAMS", "X", "Y", "ConfigError", "GroundTruth", "LabeledDataset", "World", "WorldConfig",
    "build_world", "clean_observation", "make_splits", "oracle_swap", "oracle_swap_batch",
    "oracle_truths", "sample_background", "sample_multi_salient", "sample_target",
]
