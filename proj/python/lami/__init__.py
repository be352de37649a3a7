"""Desk-scale imagination-augmented language model."""

import json

from . import _lami
from ._lami import (
    ArgumentError,
    ConfigError,
    DataError,
    Error,
    FormatError,
    aggregate,
    render,
    strategies,
    world,
)

__all__ = [
    "ArgumentError",
    "ConfigError",
    "DataError",
    "Error",
    "FormatError",
    "Pipeline",
    "aggregate",
    "default_config",
    "normalize_config",
    "render",
    "rows_csv",
    "strategies",
    "world",
]


def default_config():
    return json.loads(_lami.default_config())


def normalize_config(config):
    return json.loads(_lami.normalize_config(json.dumps(config)))


def rows_csv(rows):
    return _lami.rows_csv(json.dumps(rows))


class Pipeline:
    """Trained world, language model, dual encoder and fusion layers for one seed."""

    def __init__(self, config=None, seed=0, placements=("late",), cache_dir=""):
        cfg = json.dumps(config if config is not None else {})
        self._p = _lami.Pipeline(cfg, seed, list(placements), str(cache_dir))

    def infer(self, prompt, **kwargs):
        return json.loads(self._p.infer(prompt, **kwargs))

    def evaluate(self, task, **kwargs):
        return self._p.evaluate(task, **kwargs)

    def score(self, prompt, candidates):
        return self._p.score(prompt, list(candidates))

    def objects(self):
        return self._p.objects()

    def save(self, directory):
        self._p.save(str(directory))

    @property
    def calibration(self):
        return self._p.calibration

    @property
    def seed(self):
        return self._p.seed

    @property
    def lm_hash(self):
        return self._p.lm_hash

    @property
    def vision_hash(self):
        return self._p.vision_hash
