"""Flat ``key = value`` run configuration.

One setting per line, ``#`` starts a comment. Unknown keys are rejected. ``seed`` has no
default and must be given. The config hash covers every resolved key except ``seed``, so
runs that differ only by seed aggregate together.
"""
from __future__ import annotations

import hashlib
from pathlib import Path

from .data import SynthConfig
from .errors import ConfigError
from .model import ModelConfig
from .objective import CurseConfig, LossWeights
from .structure import StructureConfig

DEFAULTS: dict[str, object] = {
    # model and optimiser
    "d": 5,
    "lr": 0.001,
    "beta1": 0.9,
    "beta2": 0.999,
    "adam_eps": 1e-8,
    "batch": 2000,
    "epochs": 10,
    "l2": 1e-6,
    "tower_dims": (128, 64, 32),
    "dropout": (0.1, 0.3, 0.3),
    "d_out": 32,
    "emb_std": 0.01,
    "dtype": "float32",
    "stop_grad_gate": False,
    "pretrain_epochs": 10,
    "patience": 2,
    # structure mining / migration
    "K": 8,
    "L": 1,
    "alpha": 0.3,
    "block_size": 1024,
    # sample reweighting
    "gamma": 3.0,
    "cap": 4.0,
    "pos_pct": 99.0,
    "neg_pct": 10.0,
    "window": 10000,
    "warmup_min": 1000,
    # loss weights
    "w1": 1.0,
    "w2": 1.0,
    "w3": 0.6,
    # data handling
    "min_freq": 10,
    "val_fraction": 0.1,
    "max_errors": 100,
    # synthetic generator
    "n_users": 2000,
    "n_items": 1000,
    "n_user_clusters": 20,
    "n_item_clusters": 20,
    "latent_dim": 8,
    "base_click_rate": 0.05,
    "base_conv_rate_given_click": 0.06,
    "contradictory_fraction": 0.25,
    "contradiction_click": 2.0,
    "contradiction_conv": 2.0,
    "latent_share": 0.5,
    "affinity_scale": 1.5,
    "entity_noise": 0.5,
    "popularity_std": 0.5,
    "n_context": 20,
    "n_train": 200000,
    "n_val": 20000,
    "n_test": 50000,
}
REQUIRED = ("seed",)


def _parse_value(key: str, text: str):
    default = DEFAULTS.get(key)
    text = text.strip()
    try:
        if key == "seed":
            return int(text)
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0"):
                raise ValueError(text)
            return low in ("true", "1")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            kind = type(default[0])
            return tuple(kind(p) for p in text.split(",") if p.strip())
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


class RunConfig:
    def __init__(self, values: dict[str, object]):
        unknown = sorted(set(values) - set(DEFAULTS) - set(REQUIRED))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        missing = [k for k in REQUIRED if k not in values]
        if missing:
            raise ConfigError(f"missing required config keys: {', '.join(missing)}")
        self.values = {**DEFAULTS, **values}

    @classmethod
    def parse(cls, text: str, overrides: dict[str, str] | None = None) -> "RunConfig":
        raw: dict[str, str] = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"config line {n}: expected 'key = value', got {line!r}")
            k, v = (s.strip() for s in line.split("=", 1))
            if k in raw:
                raise ConfigError(f"config line {n}: duplicate key {k!r}")
            raw[k] = v
        raw.update(overrides or {})
        unknown = sorted(set(raw) - set(DEFAULTS) - set(REQUIRED))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls({k: _parse_value(k, v) for k, v in raw.items()})

    @classmethod
    def load(cls, path: str | Path | None, overrides: dict[str, str] | None = None) -> "RunConfig":
        text = Path(path).read_text() if path is not None else ""
        return cls.parse(text, overrides)

    def __getitem__(self, key: str):
        return self.values[key]

    def with_seed(self, seed: int) -> "RunConfig":
        return RunConfig({**self.values, "seed": int(seed)})

    def dump(self) -> str:
        return "".join(f"{k} = {_format_value(self.values[k])}\n" for k in sorted(self.values))

    def config_hash(self) -> str:
        body = "".join(f"{k} = {_format_value(self.values[k])}\n" for k in sorted(self.values) if k != "seed")
        return hashlib.sha256(body.encode()).hexdigest()[:16]

    def model_config(self, ablation: str = "full") -> ModelConfig:
        v = self.values
        return ModelConfig.for_ablation(
            ablation,
            stop_grad_gate=v["stop_grad_gate"], d=v["d"], tower_dims=tuple(v["tower_dims"]),
            dropout=tuple(v["dropout"]), d_out=v["d_out"], lr=v["lr"], beta1=v["beta1"], beta2=v["beta2"],
            adam_eps=v["adam_eps"], l2=v["l2"], batch=v["batch"], epochs=v["epochs"],
            pretrain_epochs=v["pretrain_epochs"], patience=v["patience"], emb_std=v["emb_std"],
            dtype=v["dtype"], seed=v["seed"],
            structure=StructureConfig(v["K"], v["L"], v["alpha"]),
            curse=CurseConfig(v["gamma"], v["cap"], True, v["pos_pct"], v["neg_pct"], v["window"], v["warmup_min"]),
            weights=LossWeights(v["w1"], v["w2"], v["w3"]),
        )

    def synth_config(self) -> SynthConfig:
        names = SynthConfig.__dataclass_fields__
        return SynthConfig(**{k: self.values[k] for k in names})
