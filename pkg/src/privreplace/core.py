"""Shared domain types, experiment configuration and random streams."""

from __future__ import annotations

import dataclasses
import json
import zlib
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional

import numpy as np
import torch

MODES = (
    "baseline_likelihood",
    "baseline_entropy",
    "ours_likelihood",
    "ours_entropy",
    "generator_only",
)
DATASETS = ("synthetic", "celeba")
FAKE_CLASS = 2

DEFAULT_LR = 0.0005
DEFAULT_LAMBDA = 1e5
DEFAULT_BETAS = (0.9, 0.999)

# desk-scale defaults, per dataset
DEFAULT_BATCH_SIZE = {"synthetic": 256, "celeba": 64}
DEFAULT_EPOCHS = {"synthetic": 10, "celeba": 5}
DEFAULT_IMAGE_SIZE = {"synthetic": None, "celeba": 64}

CONFIG_KEYS = (
    "mode", "epsilon", "lambda", "lr", "beta1", "beta2",
    "batch_size", "epochs", "seed", "dataset", "image_size",
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledExample:
    x: np.ndarray
    s: int
    u: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.s not in (0, 1):
            raise ValueError(f"sensitive attribute must be 0 or 1, got {self.s!r}")
        for name, v in self.u.items():
            if v not in (0, 1):
                raise ValueError(f"utility attribute {name} must be 0 or 1, got {v!r}")
        if not np.all(np.isfinite(self.x)):
            raise ValueError("non-finite values in x")
        if self.x.ndim == 3 and (self.x.min() < 0 or self.x.max() > 1):
            raise ValueError("image values must lie in [0, 1]")


@dataclass(frozen=True)
class CensoredExample:
    x_prime: np.ndarray
    x_double_prime: np.ndarray
    s_synthetic: int

    def __post_init__(self):
        if self.x_prime.shape != self.x_double_prime.shape:
            raise ValueError("x' and x'' must have the same shape")
        if self.s_synthetic not in (0, 1):
            raise ValueError("synthetic attribute must be 0 or 1")


@dataclass(frozen=True)
class NoiseSpec:
    z1_dim: int
    z2_dim: int

    def __post_init__(self):
        if self.z1_dim <= 0 or self.z2_dim <= 0:
            raise ValueError("noise dimensions must be positive")


IMAGE_NOISE = NoiseSpec(1024, 1024)


@dataclass(frozen=True)
class SyntheticPrior:
    """Distribution of the synthetic sensitive value s'. Uniform by default."""

    probs: tuple[float, float] = (0.5, 0.5)

    def __post_init__(self):
        if len(self.probs) != 2 or min(self.probs) < 0:
            raise ValueError(f"invalid prior {self.probs}")
        if abs(sum(self.probs) - 1.0) > 1e-9:
            raise ValueError(f"prior probabilities must sum to 1, got {sum(self.probs)}")


def sample_synthetic_attribute(prior: SyntheticPrior, rng: torch.Generator, n: Optional[int] = None):
    """Draw s' from ``prior``.

    Returns a python int when ``n`` is None, else a LongTensor of ``n`` draws.
    Draws only consume ``rng``; nothing data-dependent enters.
    """
    size = 1 if n is None else n
    u = torch.rand(size, generator=rng, dtype=torch.float64)
    draws = (u < prior.probs[1]).long()
    return int(draws[0]) if n is None else draws


@dataclass(frozen=True)
class DistortionBudget:
    epsilon_filter: float
    epsilon_generator: float
    epsilon_max: float = 2.0

    @classmethod
    def single(cls, eps: float) -> "DistortionBudget":
        return cls(eps, eps)

    def __post_init__(self):
        if self.epsilon_filter < 0 or self.epsilon_generator < 0:
            raise ConfigError("negative distortion budget")
        if self.epsilon_max <= 0:
            raise ConfigError("epsilon_max must be positive")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "ours_entropy"
    budget: DistortionBudget = DistortionBudget(1.0, 1.0)
    penalty_lambda: float = DEFAULT_LAMBDA
    lr: float = DEFAULT_LR
    beta1: float = DEFAULT_BETAS[0]
    beta2: float = DEFAULT_BETAS[1]
    batch_size: Optional[int] = None
    epochs: Optional[int] = None
    seed: int = 0
    dataset: str = "synthetic"
    image_size: Optional[int] = None

    @property
    def epsilon(self) -> float:
        return self.budget.epsilon_filter

    @property
    def filter_loss(self) -> Optional[str]:
        if self.mode.endswith("_entropy"):
            return "entropy"
        if self.mode.endswith("_likelihood"):
            return "likelihood"
        return None

    @property
    def uses_filter(self) -> bool:
        return self.mode != "generator_only"

    @property
    def uses_generator(self) -> bool:
        return not self.mode.startswith("baseline")

    @property
    def distortion_measure(self) -> str:
        # images: per-dimension mean squared error; 2D data: Euclidean distance
        return "l2" if self.dataset == "synthetic" else "mse"

    def to_mapping(self) -> dict[str, Any]:
        if self.budget.epsilon_filter != self.budget.epsilon_generator:
            raise ConfigError("config files carry a single epsilon; filter and generator budgets differ")
        return {
            "mode": self.mode,
            "epsilon": self.epsilon,
            "lambda": self.penalty_lambda,
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "seed": self.seed,
            "dataset": self.dataset,
            "image_size": self.image_size,
        }

    @classmethod
    def from_mapping(cls, d: Mapping[str, Any]) -> "TrainConfig":
        unknown = set(d) - set(CONFIG_KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw: dict[str, Any] = {}
        if "epsilon" in d and d["epsilon"] is not None:
            kw["budget"] = DistortionBudget.single(float(d["epsilon"]))
        if d.get("lambda") is not None:
            kw["penalty_lambda"] = float(d["lambda"])
        for key in ("lr", "beta1", "beta2"):
            if d.get(key) is not None:
                kw[key] = float(d[key])
        for key in ("mode", "dataset"):
            if d.get(key) is not None:
                kw[key] = str(d[key])
        for key in ("batch_size", "epochs", "seed", "image_size"):
            if d.get(key) is not None:
                kw[key] = int(d[key])
        return cls(**kw)


def validate_config(cfg: TrainConfig) -> TrainConfig:
    """Check ``cfg`` and fill dataset-dependent defaults (batch size, epochs, image size)."""
    if cfg.mode not in MODES:
        raise ConfigError(f"unknown mode {cfg.mode!r}; expected one of {MODES}")
    if cfg.dataset not in DATASETS:
        raise ConfigError(f"unknown dataset {cfg.dataset!r}")
    if cfg.budget.epsilon_filter < 0 or cfg.budget.epsilon_generator < 0:
        raise ConfigError("negative distortion budget")
    if not cfg.penalty_lambda >= 0:
        raise ConfigError("penalty coefficient lambda must be nonnegative")
    if not cfg.lr > 0:
        raise ConfigError("learning rate must be positive")
    for name in ("beta1", "beta2"):
        b = getattr(cfg, name)
        if not 0 < b < 1:
            raise ConfigError(f"{name} must lie in (0, 1), got {b}")
    fill: dict[str, Any] = {}
    if cfg.batch_size is None:
        fill["batch_size"] = DEFAULT_BATCH_SIZE[cfg.dataset]
    elif cfg.batch_size <= 0:
        raise ConfigError("batch_size must be positive")
    if cfg.epochs is None:
        fill["epochs"] = DEFAULT_EPOCHS[cfg.dataset]
    elif cfg.epochs < 0:
        raise ConfigError("epochs must be nonnegative")
    if cfg.image_size is None and cfg.dataset != "synthetic":
        fill["image_size"] = DEFAULT_IMAGE_SIZE[cfg.dataset]
    if cfg.image_size is not None and cfg.dataset != "synthetic" and cfg.image_size not in (32, 64, 128):
        raise ConfigError(f"image_size must be one of 32, 64, 128, got {cfg.image_size}")
    return dataclasses.replace(cfg, **fill) if fill else cfg


def dumps_config(cfg: TrainConfig) -> str:
    return json.dumps(cfg.to_mapping(), indent=2, sort_keys=True) + "\n"


def loads_config(text: str) -> TrainConfig:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed config: {e}") from e
    if not isinstance(d, dict):
        raise ConfigError("config must be a key-value document")
    return TrainConfig.from_mapping(d)


def save_config(cfg: TrainConfig, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_config(cfg))


def load_config(path) -> TrainConfig:
    with open(path) as fh:
        return loads_config(fh.read())


STREAM_NAMES = ("shuffle", "z1", "z2", "s_prime", "init")


class RngStreams:
    """Named, independent torch generators forked from one experiment seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gens: dict[str, torch.Generator] = {}

    def seed_for(self, name: str) -> int:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(zlib.crc32(name.encode()),))
        hi, lo = ss.generate_state(2, dtype=np.uint32)
        return (int(hi) << 31) ^ int(lo)

    def __getitem__(self, name: str) -> torch.Generator:
        if name not in self._gens:
            g = torch.Generator()
            g.manual_seed(self.seed_for(name))
            self._gens[name] = g
        return self._gens[name]

    def numpy(self, name: str) -> np.random.Generator:
        return np.random.default_rng(self.seed_for(name))

    def get_state(self) -> dict[str, torch.Tensor]:
        return {name: self[name].get_state() for name in STREAM_NAMES}

    def set_state(self, state: Mapping[str, torch.Tensor]) -> None:
        for name, st in state.items():
            self[name].set_state(st)
