"""Run configuration: JSON files layered over a toy or full-scale profile."""
from __future__ import annotations

import copy
import json
import os
from typing import Any, Dict, Optional

from .encoder import EncoderConfig
from .metrics import DecodeThresholds
from .model import MODES, LossWeights, ModelConfig
from .synth import SynthSpec
from .train import TrainConfig


class ConfigError(ValueError):
    pass


# Batch size, max length, learning rate, epochs and parameter count reported
# for each dataset at BERT-base scale.
FULL_SCALE = {
    "ace2004": {"bert_mrc": dict(batch_size=2, max_len=128, lr=3e-5, epochs=14, params="112M"),
                "multi_ner": dict(batch_size=2, max_len=128, lr=2e-5, epochs=19, params="133M")},
    "ace2005": {"bert_mrc": dict(batch_size=2, max_len=128, lr=2e-5, epochs=11, params="112M"),
                "multi_ner": dict(batch_size=2, max_len=128, lr=2e-5, epochs=16, params="133M")},
    "genia": {"bert_mrc": dict(batch_size=2, max_len=180, lr=2e-5, epochs=9, params="112M"),
              "multi_ner": dict(batch_size=2, max_len=128, lr=2e-5, epochs=15, params="125M")},
    "conll2003": {"bert_mrc": dict(batch_size=2, max_len=200, lr=3e-5, epochs=8, params="112M"),
                  "multi_ner": dict(batch_size=1, max_len=200, lr=2e-5, epochs=18, params="123M")},
}

TOY = {
    "profile": "toy",
    "data": {},
    "types": None,
    "questions": None,
    "encoder": {"d_model": 64, "n_layers": 2, "n_heads": 4, "d_ff": 128,
                "max_positions": 128, "dropout": 0.1},
    "cross_heads": 4,
    "mode": "full",
    "loss_weights": {"alpha": 1.0, "beta": 1.0, "gamma": 1.0},
    "thresholds": {"start": 0.5, "end": 0.5, "span": 0.5},
    "optimizer": {"lr": 1e-3, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
    "batch_size": 8,
    "max_len": 128,
    "epochs": 50,
    "patience": 10,
    "target_f1": None,
    "min_freq": 1,
    "seed": None,
    "precision": "float64",
    "out_dir": "runs/default",
    "synth": SynthSpec().to_dict(),
}


def _full_profile(dataset: str = "ace2004") -> Dict[str, Any]:
    row = FULL_SCALE[dataset]["multi_ner"]
    cfg = copy.deepcopy(TOY)
    cfg.update(profile="full", dataset=dataset, batch_size=row["batch_size"],
               max_len=row["max_len"], epochs=row["epochs"])
    cfg["encoder"] = {"d_model": 768, "n_layers": 12, "n_heads": 12, "d_ff": 3072,
                      "max_positions": 512, "dropout": 0.1}
    cfg["cross_heads"] = 12
    cfg["optimizer"]["lr"] = row["lr"]
    return cfg


def profile(name: str) -> Dict[str, Any]:
    if name == "toy":
        return copy.deepcopy(TOY)
    if name == "full":
        return _full_profile()
    if name.startswith("full:"):
        ds = name.split(":", 1)[1]
        if ds not in FULL_SCALE:
            raise ConfigError(f"unknown dataset {ds!r}; choose from {sorted(FULL_SCALE)}")
        return _full_profile(ds)
    raise ConfigError(f"unknown profile {name!r}")


def _merge(base: Dict, over: Dict) -> Dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("questions",):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None,
                check_files: bool = True) -> Dict[str, Any]:
    """Resolve a run config: profile defaults, then the file, then overrides.

    A run manifest is accepted too; its stored config snapshot is used.
    """
    raw: Dict[str, Any] = {}
    base_dir = "."
    if path is not None:
        try:
            with open(path, encoding="utf-8") as f:
                raw = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if "manifest_version" in raw:
            raw = raw["config"]
        base_dir = os.path.dirname(os.path.abspath(path))
    cfg = _merge(profile(raw.get("profile", "toy")), raw)
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg[k] = v
    # relative data paths resolve against the config file's directory
    data = {}
    for k, v in (cfg.get("data") or {}).items():
        data[k] = v if v is None or os.path.isabs(v) else os.path.normpath(os.path.join(base_dir, v))
    cfg["data"] = data
    if isinstance(cfg.get("questions"), str) and not os.path.isabs(cfg["questions"]):
        cfg["questions"] = os.path.normpath(os.path.join(base_dir, cfg["questions"]))
    validate(cfg, check_files)
    return cfg


def validate(cfg: Dict[str, Any], check_files: bool = True) -> None:
    if cfg.get("seed") is None:
        raise ConfigError("a seed is required (config 'seed' or --seed)")
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a nonnegative integer")
    if cfg["mode"] not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    if cfg["precision"] not in ("float64", "float32"):
        raise ConfigError("precision must be float64 or float32")
    try:
        LossWeights(**cfg["loss_weights"])
        DecodeThresholds(**cfg["thresholds"])
        SynthSpec.from_dict(cfg["synth"]).validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if check_files:
        refs = list((cfg.get("data") or {}).values())
        if isinstance(cfg.get("questions"), str):
            refs.append(cfg["questions"])
        for p in refs:
            if p is not None and not os.path.exists(p):
                raise ConfigError(f"referenced file does not exist: {p}")


def train_config(cfg: Dict[str, Any]) -> TrainConfig:
    o = cfg["optimizer"]
    return TrainConfig(lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"],
                       batch_size=cfg["batch_size"], epochs=cfg["epochs"],
                       patience=cfg["patience"], max_len=cfg["max_len"], seed=cfg["seed"],
                       weights=LossWeights(**cfg["loss_weights"]),
                       thresholds=DecodeThresholds(**cfg["thresholds"]),
                       target_f1=cfg.get("target_f1"))


def model_config(cfg: Dict[str, Any], vocab_size: int, types) -> ModelConfig:
    enc = EncoderConfig(vocab_size=vocab_size, **cfg["encoder"])
    return ModelConfig(enc, list(types), cfg["mode"], cfg["cross_heads"], cfg["seed"],
                       cfg["precision"])
