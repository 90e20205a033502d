"""Multi-task electrode detection / catheter segmentation on synthetic fluoroscopy.

Thin wrapper over the compiled ``_core`` extension. Dict-style configs are
accepted wherever the core expects a JSON string.
"""

import json as _json

from ._core import (
    KpiTracker,
    average_precision,
    decode,
    dice,
    evaluate_checkpoint,
    generate,
    localization_errors,
    region_similarity,
    skeletonize,
    targets,
)
from ._core import gen_data as _gen_data
from ._core import select_samples as _select_samples
from ._core import train_config as _train_config
from ._core import train_json as _train_json

__all__ = [
    "KpiTracker",
    "average_precision",
    "decode",
    "dice",
    "evaluate_checkpoint",
    "gen_data",
    "generate",
    "localization_errors",
    "region_similarity",
    "select_samples",
    "skeletonize",
    "targets",
    "train",
]


def _as_json(cfg):
    if isinstance(cfg, str):
        return cfg
    return _json.dumps(cfg)


def train(config):
    """Run training; ``config`` is a config-file path or a config dict."""
    if isinstance(config, dict):
        return _train_json(_json.dumps(config))
    return _train_config(str(config))


def gen_data(out_dir, n, seed, force=False, generator=None):
    """Write a synthetic dataset; ``generator`` optionally overrides defaults."""
    _gen_data(str(out_dir), int(n), int(seed), bool(force), _as_json(generator or {}))


def select_samples(difficulty, available, policy):
    """Selection weights; ``policy`` is a policy dict or JSON string."""
    return _select_samples(list(difficulty), list(available), _as_json(policy))
