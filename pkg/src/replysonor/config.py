"""Configuration management for ReplySonor.

Settings are resolved with the priority: explicit override (command-line flag)
> environment variable (``REPLYSONOR_<KEY>``, ``.env`` honoured) > config file
> preset default.
"""

import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import yaml
from dotenv import load_dotenv

from .errors import InvariantViolation

ENV_PREFIX = "REPLYSONOR_"


@dataclass(frozen=True)
class FeaturizerConfig:
    """N-gram extraction and vocabulary settings."""

    max_n: int = 2
    size_cap: int = 200_000
    min_count: int = 2
    features: Tuple[str, ...] = ("body", "subject")


@dataclass(frozen=True)
class ModelConfig:
    """Scorer architecture. ``towers`` sizes every per-feature subnetwork."""

    kind: str = "dot"  # dot | joint
    d: int = 64
    towers: Tuple[int, ...] = (64, 64, 64)
    fusion: Optional[Tuple[int, ...]] = None  # defaults to two layers of the final size
    seed: int = 0

    def fusion_sizes(self) -> Tuple[int, ...]:
        if self.fusion is not None:
            return tuple(self.fusion)
        return (self.towers[-1], self.towers[-1])


@dataclass(frozen=True)
class TrainConfig:
    """SGD settings for the trainer."""

    k: int = 32
    epochs: int = 10
    lr: float = 0.01
    lr_decay_step: int = 10_000
    lr_decayed: float = 0.001
    seed: int = 0
    loss: str = "multiple_negatives"  # multiple_negatives | sigmoid
    log_every: int = 100


@dataclass(frozen=True)
class BiasConfig:
    """Response-bias weight and language-model smoothing."""

    alpha: float = 0.25
    lm_k: float = 0.1

    def __post_init__(self):
        if self.alpha < 0:
            raise InvariantViolation(f"alpha must be >= 0, got {self.alpha}")
        if self.lm_k <= 0:
            raise InvariantViolation(f"lm_k must be > 0, got {self.lm_k}")


@dataclass(frozen=True)
class HQConfig:
    """Hierarchical quantization settings."""

    d: int = 64
    vq_size: int = 256
    num_subspaces: int = 8
    pq_size: int = 256
    mode: str = "alternating"  # alternating | sgd
    retrieve_m: int = 100
    rerank: bool = True
    iterations: int = 8
    sgd_steps: int = 2000
    sgd_batch: int = 256
    sgd_lr: float = 0.05
    vq_probe: int = 8  # VQ centers tried per response when the index encodes

    def __post_init__(self):
        if self.d % self.num_subspaces != 0:
            raise InvariantViolation(
                f"num_subspaces ({self.num_subspaces}) must divide d ({self.d})"
            )
        if self.vq_size < 1 or self.pq_size < 1:
            raise InvariantViolation("vq_size and pq_size must be >= 1")
        if self.mode not in ("alternating", "sgd"):
            raise InvariantViolation(f"unknown HQ training mode: {self.mode}")
        if self.vq_probe < 1:
            raise InvariantViolation(f"vq_probe must be >= 1, got {self.vq_probe}")

    @property
    def sub_dim(self) -> int:
        return self.d // self.num_subspaces


@dataclass(frozen=True)
class EvalConfig:
    """Offline evaluation protocol."""

    num_candidates: int = 100
    trials: int = 1
    seed: int = 0
    split: float = 0.95

    def __post_init__(self):
        if self.num_candidates < 2:
            raise InvariantViolation("num_candidates must be >= 2")
        if not 0.0 <= self.split <= 1.0:
            raise InvariantViolation(f"split ratio must lie in [0, 1], got {self.split}")


# Flat config-file key -> (section class, field name)
KEY_MAP: Dict[str, Tuple[type, str]] = {
    "max_n": (FeaturizerConfig, "max_n"),
    "size_cap": (FeaturizerConfig, "size_cap"),
    "min_count": (FeaturizerConfig, "min_count"),
    "features": (FeaturizerConfig, "features"),
    "model": (ModelConfig, "kind"),
    "dims": (ModelConfig, "d"),
    "towers": (ModelConfig, "towers"),
    "fusion": (ModelConfig, "fusion"),
    "k": (TrainConfig, "k"),
    "epochs": (TrainConfig, "epochs"),
    "lr": (TrainConfig, "lr"),
    "lr_decay_step": (TrainConfig, "lr_decay_step"),
    "lr_decayed": (TrainConfig, "lr_decayed"),
    "loss": (TrainConfig, "loss"),
    "log_every": (TrainConfig, "log_every"),
    "alpha": (BiasConfig, "alpha"),
    "lm_k": (BiasConfig, "lm_k"),
    "vq_size": (HQConfig, "vq_size"),
    "num_subspaces": (HQConfig, "num_subspaces"),
    "pq_size": (HQConfig, "pq_size"),
    "hq_mode": (HQConfig, "mode"),
    "retrieve_m": (HQConfig, "retrieve_m"),
    "rerank": (HQConfig, "rerank"),
    "hq_iterations": (HQConfig, "iterations"),
    "vq_probe": (HQConfig, "vq_probe"),
    "num_candidates": (EvalConfig, "num_candidates"),
    "trials": (EvalConfig, "trials"),
    "split": (EvalConfig, "split"),
}

PRESETS: Dict[str, Dict[str, Any]] = {
    "desk": {},
    "production": {
        "dims": 320,
        "lr_decay_step": 40_000_000,
        "size_cap": 500_000,
        "vq_size": 256,
        "pq_size": 256,
        "num_subspaces": 25,
    },
}

# Tower sizes under the production preset
PRODUCTION_JOINT_TOWERS = (500, 300, 100)
PRODUCTION_DOT_TOWERS = (300, 300, 500)


def _coerce(value: Any) -> Any:
    """Turn list values and comma strings into tuples of ints."""
    if isinstance(value, list):
        return tuple(value)
    if isinstance(value, str) and "," in value:
        parts = [p.strip() for p in value.split(",") if p.strip()]
        try:
            return tuple(int(p) for p in parts)
        except ValueError:
            return tuple(parts)
    return value


class Config:
    """Resolves ReplySonor settings from presets, files, environment and flags."""

    def __init__(
        self,
        config_file: Optional[Path] = None,
        preset: str = "desk",
        env: Optional[Dict[str, str]] = None,
    ):
        """
        Initialize configuration.

        Args:
            config_file: Optional key-value (YAML) config file
            preset: Named preset supplying defaults ("desk" or "production")
            env: Environment mapping; defaults to ``os.environ`` after loading ``.env``
        """
        if preset not in PRESETS:
            raise InvariantViolation(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        if env is None:
            load_dotenv()
            env = dict(os.environ)
        self.preset = preset
        self.config_file = Path(config_file) if config_file else None
        self._values: Dict[str, Any] = dict(PRESETS[preset])
        self._values.update(self.load_file(self.config_file))
        self._values.update(self._from_env(env))

    @staticmethod
    def load_file(path: Optional[Path]) -> Dict[str, Any]:
        """
        Load a key-value config file.

        Args:
            path: File path, or None

        Returns:
            Dictionary of recognised keys to values
        """
        if path is None:
            return {}
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
        if not isinstance(data, dict):
            raise InvariantViolation(f"config file {path} must contain key: value lines")
        unknown = sorted(set(data) - set(KEY_MAP) - {"seed"})
        if unknown:
            raise InvariantViolation(f"unknown config keys in {path}: {', '.join(unknown)}")
        return {key: _coerce(value) for key, value in data.items()}

    @staticmethod
    def _from_env(env: Dict[str, str]) -> Dict[str, Any]:
        values = {}
        for key in list(KEY_MAP) + ["seed"]:
            raw = env.get(ENV_PREFIX + key.upper())
            if raw is not None and raw != "":
                values[key] = _coerce(yaml.safe_load(raw))
        return values

    def override(self, **flags: Any) -> "Config":
        """
        Apply command-line flags; ``None`` values are ignored.

        Returns:
            self, for chaining
        """
        for key, value in flags.items():
            if value is None:
                continue
            if key not in KEY_MAP and key != "seed":
                raise InvariantViolation(f"unknown config key: {key}")
            self._values[key] = _coerce(value)
        return self

    def get(self, key: str, default: Any = None) -> Any:
        return self._values.get(key, default)

    def section(self, cls: type, **extra: Any):
        """
        Build a typed config section.

        Args:
            cls: One of the dataclass sections defined in this module
            extra: Field values that win over resolved keys

        Returns:
            An instance of ``cls``
        """
        kwargs: Dict[str, Any] = {}
        names = {f.name for f in fields(cls)}
        for key, (owner, name) in KEY_MAP.items():
            if owner is cls and key in self._values:
                kwargs[name] = self._values[key]
        if "seed" in names and "seed" in self._values:
            kwargs["seed"] = self._values["seed"]
        kwargs.update({k: v for k, v in extra.items() if v is not None})
        if cls is ModelConfig and self.preset == "production":
            joint = kwargs.get("kind") == "joint"
            kwargs.setdefault("towers", PRODUCTION_JOINT_TOWERS if joint else PRODUCTION_DOT_TOWERS)
        return cls(**kwargs)

    def snapshot(self) -> Dict[str, Any]:
        """Return the resolved key-value settings (for run manifests)."""
        return {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(self._values.items())}

