"""Run configuration: one JSON document with a section per pipeline stage.

Example::

    {"synth": {"classes": {"walk": 10}},
     "prior": {"steps": 800, "model": {"d_model": 64}},
     "sparse": {"steps": 400},
     "sequence": {"steps": 600, "model": {"hidden": 96}},
     "eval": {"window_stride": 5}}

Missing sections take their defaults; unknown sections or keys raise
ConfigError naming the offending key.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict
from pathlib import Path

from .dataio import SynthConfig
from .errors import ConfigError
from .prior import PriorConfig, TrainConfig
from .sequence import SequenceConfig, SequenceTrainConfig

SECTIONS = ("synth", "prior", "sparse", "sequence", "eval")
EVAL_KEYS = {"window_stride": 1, "exact": False}


def load_run_config(path=None, overrides=()):
    """Read ``path`` (or start empty), apply ``section.key=value`` overrides, validate."""
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{p}: top level must be an object")
    raw = copy.deepcopy(raw)
    for item in overrides:
        apply_override(raw, item)
    return resolve(raw)


def apply_override(raw, item):
    """``section.key[.subkey]=json-value``; bare strings are accepted as values."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like section.key=value")
    key, value = item.split("=", 1)
    try:
        value = json.loads(value)
    except json.JSONDecodeError:
        pass
    parts = key.split(".")
    if len(parts) < 2:
        raise ConfigError(f"override key {key!r} needs a section prefix, e.g. prior.steps")
    node = raw
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a non-object")
    node[parts[-1]] = value


def resolve(raw):
    """Validated, fully populated config dict (suitable for a snapshot)."""
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    out = {}
    out["synth"] = asdict(SynthConfig.from_dict(raw.get("synth", {})))
    for name in ("prior", "sparse"):
        cfg = TrainConfig.from_dict(raw.get(name, {}))
        cfg.model = asdict(PriorConfig.from_dict(cfg.model))
        out[name] = asdict(cfg)
    seq = SequenceTrainConfig.from_dict(raw.get("sequence", {}))
    seq.model = asdict(SequenceConfig.from_dict(seq.model))
    out["sequence"] = asdict(seq)
    ev = dict(raw.get("eval", {}))
    bad = set(ev) - set(EVAL_KEYS)
    if bad:
        raise ConfigError(f"unknown eval key(s): {sorted(bad)}")
    out["eval"] = {**EVAL_KEYS, **ev}
    if int(out["eval"]["window_stride"]) < 1:
        raise ConfigError("eval.window_stride must be >= 1")
    return out
