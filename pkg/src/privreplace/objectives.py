"""Losses of the filter/generator game and the quadratic distortion penalty.

All classifier-facing functions take probability rows (softmax outputs),
clamped to [1e-12, 1] before any logarithm.
"""

from __future__ import annotations

import math

import torch

from .core import FAKE_CLASS, TrainConfig

PROB_FLOOR = 1e-12


def _clamp(p: torch.Tensor) -> torch.Tensor:
    return p.clamp(PROB_FLOOR, 1.0)


def negative_entropy(p: torch.Tensor) -> torch.Tensor:
    """sum_k p_k log p_k over the last axis; -log K at uniform, 0 at one-hot."""
    return (p * torch.log(_clamp(p))).sum(dim=-1)


def cross_entropy(p: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-row -log p[target]."""
    picked = p.gather(-1, target.long().unsqueeze(-1)).squeeze(-1)
    return -torch.log(_clamp(picked))


def distortion(a: torch.Tensor, b: torch.Tensor, measure: str = "l2") -> torch.Tensor:
    """Batch mean of per-example distortion.

    ``l2``: Euclidean norm of the flattened difference.
    ``mse``: squared norm divided by the number of dimensions.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    diff = (a - b).flatten(1)
    if measure == "l2":
        per = torch.linalg.vector_norm(diff, dim=1)
    elif measure == "mse":
        per = diff.pow(2).mean(dim=1)
    else:
        raise ValueError(f"unknown distortion measure {measure!r}")
    return per.mean()


def penalty(mean_distortion, eps: float, lam: float):
    """lam * max(mean_distortion - eps, 0)^2"""
    if isinstance(mean_distortion, torch.Tensor):
        return lam * torch.clamp(mean_distortion - eps, min=0.0).pow(2)
    return lam * max(mean_distortion - eps, 0.0) ** 2


def filter_objective(h_f_out: torch.Tensor, s: torch.Tensor, mean_distortion, cfg: TrainConfig):
    if cfg.filter_loss == "entropy":
        term = negative_entropy(h_f_out).mean()
    elif cfg.filter_loss == "likelihood":
        if not torch.all((s == 0) | (s == 1)):
            raise ValueError("likelihood filter loss needs a binary sensitive attribute")
        term = cross_entropy(h_f_out, 1 - s).mean()
    else:
        raise ValueError(f"mode {cfg.mode!r} has no filter objective")
    return term + penalty(mean_distortion, cfg.budget.epsilon_filter, cfg.penalty_lambda)


def generator_objective(h_g_out: torch.Tensor, s_synth: torch.Tensor, mean_distortion, cfg: TrainConfig):
    if torch.any(s_synth == FAKE_CLASS):
        raise ValueError("synthetic attribute cannot be the fake class")
    term = cross_entropy(h_g_out, s_synth).mean()
    return term + penalty(mean_distortion, cfg.budget.epsilon_generator, cfg.penalty_lambda)


def filter_adversary_objective(h_f_out: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    return cross_entropy(h_f_out, s).mean()


def generator_discriminator_objective(
    h_g_on_fake: torch.Tensor, h_g_on_real: torch.Tensor, s_real: torch.Tensor
) -> torch.Tensor:
    fake = torch.full((h_g_on_fake.shape[0],), FAKE_CLASS, dtype=torch.long)
    return cross_entropy(h_g_on_fake, fake).mean() + cross_entropy(h_g_on_real, s_real).mean()


CLAMP_CEILING = -math.log(PROB_FLOOR)
