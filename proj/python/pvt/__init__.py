# Copyright 2026 The pvt Authors
# SPDX-License-Identifier: Apache-2.0
"""Interventions on toy neural models.

Configs, unit locations and subspaces are passed as plain Python values
(dicts, lists, ints) and converted to the JSON documents the core reads.
"""

import json

from . import _pvt
from ._pvt import (
    Model,
    PvtError,
    greedy_decode,
    load_bundle,
    make_dataset,
    trace_window,
)

__all__ = [
    "IntervenableModel",
    "Model",
    "PvtError",
    "build_model",
    "check_config",
    "greedy_decode",
    "load_bundle",
    "make_dataset",
    "trace_window",
]


def _doc(value):
    if value is None:
        return ""
    return value if isinstance(value, str) else json.dumps(value)


def build_model(schema, seed=0, tokens=None):
    return Model.build(_doc(schema), seed, tokens)


def check_config(config, model):
    _pvt.check_config(_doc(config), model)


class IntervenableModel:
    def __init__(self, model, config, seed=0):
        self._impl = _pvt.IntervenableModel(model, _doc(config), seed)

    @property
    def config(self):
        return json.loads(self._impl.config_json)

    @property
    def model(self):
        return self._impl.model

    def num_trainable_scalars(self):
        return self._impl.num_trainable_scalars()

    def __call__(self, base, sources=(), unit_locations=None, subspaces=None,
                 source_representations=None, output_original=False):
        return self._impl.run(
            base,
            list(sources),
            _doc(unit_locations),
            _doc(subspaces),
            dict(source_representations or {}),
            output_original,
        )

    def generate(self, prompt, steps=1, step_selector=None):
        return self._impl.generate(prompt, steps, step_selector)

    def save(self, path, include_model_weights=False):
        self._impl.save(str(path), include_model_weights)

    @classmethod
    def load(cls, path, model=None):
        out = cls.__new__(cls)
        out._impl = load_bundle(str(path), model)
        return out
