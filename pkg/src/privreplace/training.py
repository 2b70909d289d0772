"""Alternating minimax training: filter/generator step, then both discriminators."""

from __future__ import annotations

import contextlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass
from typing import Callable, Iterator, Optional

import numpy as np
import torch
import torch.nn as nn

from . import checkpoint as ckpt
from .core import RngStreams, SyntheticPrior, TrainConfig, sample_synthetic_attribute, validate_config
from .data import Split
from .models import Nets, build_from_arch, build_image_family, build_mlp_family, probabilities, reset_module
from .objectives import (
    distortion,
    filter_adversary_objective,
    filter_objective,
    generator_discriminator_objective,
    generator_objective,
    penalty,
)

log = logging.getLogger(__name__)

# parameter-set name -> Nets attribute
PARAM_SETS = {
    "theta_f": "filter",
    "theta_g": "generator",
    "phi_f": "filter_adversary",
    "phi_g": "generator_discriminator",
}


class TrainingDiverged(RuntimeError):
    def __init__(self, metrics: "StepMetrics", snapshot: Optional[str] = None):
        super().__init__(f"non-finite loss at step {metrics.step}: {asdict(metrics)} (snapshot: {snapshot})")
        self.metrics = metrics
        self.snapshot = snapshot


@dataclass
class StepMetrics:
    step: int
    epoch: int
    theta_f_loss: Optional[float] = None
    theta_g_loss: Optional[float] = None
    phi_f_loss: Optional[float] = None
    phi_g_loss: Optional[float] = None
    dist_xp: Optional[float] = None
    dist_xpp: Optional[float] = None
    penalty_f: Optional[float] = None
    penalty_g: Optional[float] = None
    seconds: float = 0.0

    def losses(self):
        return [v for v in (self.theta_f_loss, self.theta_g_loss, self.phi_f_loss, self.phi_g_loss) if v is not None]

    def finite(self) -> bool:
        vals = self.losses() + [v for v in (self.dist_xp, self.dist_xpp) if v is not None]
        return all(math.isfinite(v) for v in vals)


def active_sets(mode: str) -> tuple[str, ...]:
    if mode.startswith("baseline"):
        return ("theta_f", "phi_f")
    if mode == "generator_only":
        return ("theta_g", "phi_g")
    return ("theta_f", "theta_g", "phi_f", "phi_g")


@dataclass
class TrainState:
    nets: Nets
    optimizers: dict[str, torch.optim.Adam]
    rngs: RngStreams
    cfg: TrainConfig
    prior: SyntheticPrior = SyntheticPrior()
    epoch: int = 0
    step: int = 0
    best: float = math.inf

    def net(self, pset: str) -> nn.Module:
        return getattr(self.nets, PARAM_SETS[pset])


def default_nets(cfg: TrainConfig, base_channels: int = 64) -> Nets:
    if cfg.dataset == "synthetic":
        return build_mlp_family()
    return build_image_family(cfg.image_size, base_channels)


def prune_nets(nets: Nets, mode: str) -> Nets:
    keep = {PARAM_SETS[p] for p in active_sets(mode)}
    return Nets(**{name: (m if name in keep else None) for name, m in nets.items()})


def init_parameters(nets: Nets, seed: int, cfg: Optional[TrainConfig] = None,
                    prior: SyntheticPrior = SyntheticPrior()) -> TrainState:
    """Seeded re-initialization of every network plus fresh Adam state."""
    cfg = validate_config(cfg or TrainConfig(seed=seed))
    rngs = RngStreams(seed)
    nets = prune_nets(nets, cfg.mode)
    for name, module in nets.items():
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(rngs.seed_for("init/" + name))
            reset_module(module)
    optimizers = {
        pset: torch.optim.Adam(getattr(nets, PARAM_SETS[pset]).parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
        for pset in active_sets(cfg.mode)
    }
    return TrainState(nets, optimizers, rngs, cfg, prior)


@contextlib.contextmanager
def eval_mode(*modules: Optional[nn.Module]):
    """Temporarily use evaluation statistics (batch norm) in ``modules``."""
    mods = [m for m in modules if m is not None]
    saved = [m.training for m in mods]
    for m in mods:
        m.eval()
    try:
        yield
    finally:
        for m, t in zip(mods, saved):
            m.train(t)


def _adam_step(opt: torch.optim.Adam, loss: torch.Tensor, module: nn.Module) -> None:
    params = [p for p in module.parameters() if p.requires_grad]
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    for p, g in zip(params, grads):
        p.grad = torch.zeros_like(p) if g is None else g
    opt.step()
    for p in params:
        p.grad = None


def train_step(state: TrainState, batch, cfg: Optional[TrainConfig] = None) -> tuple[TrainState, StepMetrics]:
    """One pass of the loop body on a batch ``(x, s)``; mutates and returns ``state``."""
    cfg = cfg or state.cfg
    x, s = batch
    t0 = time.perf_counter()
    nets, rng = state.nets, state.rngs
    f, g = nets.filter, nets.generator
    h_f, h_g = nets.filter_adversary, nets.generator_discriminator
    use_f, use_g = cfg.uses_filter, cfg.uses_generator
    measure = cfg.distortion_measure
    lam = cfg.penalty_lambda
    m = x.shape[0]
    met = StepMetrics(step=state.step, epoch=state.epoch)

    z1 = torch.randn(m, f.z_dim, generator=rng["z1"], dtype=x.dtype) if use_f else None
    if use_g:
        z2 = torch.randn(m, g.z_dim, generator=rng["z2"], dtype=x.dtype)
        s_syn = sample_synthetic_attribute(state.prior, rng["s_prime"], m)

    # censored and synthetic data, then filter/generator losses
    for net in (f, g) if use_f and use_g else ((f,) if use_f else (g,)):
        net.train()
    with eval_mode(h_f if use_f else None, h_g if use_g else None):
        xp = f(x, z1) if use_f else x
        if use_f:
            d_f = distortion(xp, x, measure)
            theta_f = filter_objective(probabilities(h_f, xp), s, d_f, cfg)
            met.theta_f_loss, met.dist_xp = theta_f.item(), d_f.item()
            met.penalty_f = penalty(met.dist_xp, cfg.budget.epsilon_filter, lam)
        if use_g:
            xpp = g(xp.detach(), s_syn, z2)
            d_g = distortion(xpp, x, measure)
            theta_g = generator_objective(probabilities(h_g, xpp), s_syn, d_g, cfg)
            met.theta_g_loss, met.dist_xpp = theta_g.item(), d_g.item()
            met.penalty_g = penalty(met.dist_xpp, cfg.budget.epsilon_generator, lam)
    if not met.finite():
        raise TrainingDiverged(met)
    if use_f:
        _adam_step(state.optimizers["theta_f"], theta_f, f)
    if use_g:
        _adam_step(state.optimizers["theta_g"], theta_g, g)

    # discriminators see outputs of the updated f and g, same noise and s'
    with torch.no_grad(), eval_mode(f if use_f else None, g if use_g else None):
        xp = f(x, z1) if use_f else x
        xpp = g(xp, s_syn, z2) if use_g else None
    if use_f:
        h_f.train()
        phi_f = filter_adversary_objective(probabilities(h_f, xp), s)
        met.phi_f_loss = phi_f.item()
    if use_g:
        h_g.train()
        phi_g = generator_discriminator_objective(probabilities(h_g, xpp), probabilities(h_g, x), s)
        met.phi_g_loss = phi_g.item()
    if not met.finite():
        raise TrainingDiverged(met)
    if use_f:
        _adam_step(state.optimizers["phi_f"], phi_f, h_f)
    if use_g:
        _adam_step(state.optimizers["phi_g"], phi_g, h_g)

    state.step += 1
    met.seconds = time.perf_counter() - t0
    return state, met


def iterate_batches(split: Split, batch_size: int, rng: torch.Generator) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
    """Uniformly shuffled batches; a trailing partial batch is dropped unless it is the only one."""
    n = len(split)
    perm = torch.randperm(n, generator=rng)
    stop = n - n % batch_size if n >= batch_size else n
    for i in range(0, stop, batch_size):
        idx = perm[i:i + batch_size]
        yield split.x[idx], split.s[idx]


def train(
    dataset: Split,
    cfg: TrainConfig,
    nets: Optional[Nets] = None,
    state: Optional[TrainState] = None,
    checkpoint_dir: Optional[str] = None,
    log_path: Optional[str] = None,
    on_epoch: Optional[Callable[[TrainState, dict], None]] = None,
) -> tuple[TrainState, list[StepMetrics]]:
    """Run training for ``cfg.epochs`` epochs (resuming from ``state`` if given).

    With ``checkpoint_dir`` set, ``last.ckpt`` and ``best.ckpt`` are written at
    the end of each epoch; ``log_path`` receives one JSON line per step.
    """
    cfg = validate_config(cfg)
    if len(dataset) == 0:
        raise ValueError("empty training set")
    if state is None:
        state = init_parameters(nets if nets is not None else default_nets(cfg), cfg.seed, cfg)
    if checkpoint_dir:
        os.makedirs(checkpoint_dir, exist_ok=True)
    history: list[StepMetrics] = []
    logfh = open(log_path, "a") if log_path else None
    try:
        while state.epoch < cfg.epochs:
            epoch_mets = []
            for batch in iterate_batches(dataset, cfg.batch_size, state.rngs["shuffle"]):
                try:
                    _, met = train_step(state, batch, cfg)
                except TrainingDiverged as e:
                    if checkpoint_dir:
                        e.snapshot = os.path.join(checkpoint_dir, "diverged.ckpt")
                        save_train_state(state, e.snapshot)
                    raise
                epoch_mets.append(met)
                if logfh:
                    logfh.write(json.dumps(asdict(met)) + "\n")
            history.extend(epoch_mets)
            state.epoch += 1
            summary = epoch_summary(epoch_mets, state.epoch)
            log.info("epoch %d: %s", state.epoch, summary)
            if checkpoint_dir:
                key = "theta_f_loss" if cfg.uses_filter else "theta_g_loss"
                save_train_state(state, os.path.join(checkpoint_dir, "last.ckpt"))
                if summary[key] < state.best:
                    state.best = summary[key]
                    save_train_state(state, os.path.join(checkpoint_dir, "best.ckpt"))
            if on_epoch:
                on_epoch(state, summary)
    finally:
        if logfh:
            logfh.close()
    return state, history


def epoch_summary(mets: list[StepMetrics], epoch: int) -> dict:
    out: dict = {"epoch": epoch, "steps": len(mets)}
    for key in ("theta_f_loss", "theta_g_loss", "phi_f_loss", "phi_g_loss", "dist_xp", "dist_xpp"):
        vals = [getattr(m, key) for m in mets if getattr(m, key) is not None]
        out[key] = float(np.mean(vals)) if vals else math.nan
    return out


# -- checkpoints -------------------------------------------------------------

def save_train_state(state: TrainState, path: str) -> None:
    arrays: dict = {}
    meta = {
        "kind": "train_state",
        "cfg": state.cfg.to_mapping(),
        "prior": list(state.prior.probs),
        "epoch": state.epoch,
        "step": state.step,
        "best": None if math.isinf(state.best) else state.best,
        "seed": state.rngs.seed,
        "arch": {},
        "dtype": {},
        "adam_steps": {},
    }
    for name, module in state.nets.items():
        meta["arch"][name] = module.arch
        meta["dtype"][name] = str(next(module.parameters()).dtype).removeprefix("torch.")
        arrays.update(ckpt.state_arrays(module, f"net/{name}/"))
    for pset, opt in state.optimizers.items():
        meta["adam_steps"][pset] = []
        for i, p in enumerate(opt.param_groups[0]["params"]):
            st = opt.state.get(p)
            if not st:
                meta["adam_steps"][pset].append(0)
                continue
            meta["adam_steps"][pset].append(float(st["step"]))
            arrays[f"adam/{pset}/{i:04d}/exp_avg"] = st["exp_avg"]
            arrays[f"adam/{pset}/{i:04d}/exp_avg_sq"] = st["exp_avg_sq"]
    for name, st in state.rngs.get_state().items():
        arrays[f"rng/{name}"] = st
    ckpt.write_container(path, meta, arrays)


def load_train_state(path: str) -> TrainState:
    meta, arrays = ckpt.read_container(path)
    if meta.get("kind") != "train_state":
        raise ckpt.CheckpointError("not a training checkpoint")
    cfg = validate_config(TrainConfig.from_mapping(meta["cfg"]))
    nets = Nets()
    for name, arch in meta["arch"].items():
        module = build_from_arch(arch)
        if meta["dtype"][name] == "float64":
            module.double()
        ckpt.load_state_arrays(module, arrays, f"net/{name}/")
        setattr(nets, name, module)
    optimizers = {}
    for pset, steps in meta["adam_steps"].items():
        module = getattr(nets, PARAM_SETS[pset])
        opt = torch.optim.Adam(module.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
        for i, p in enumerate(opt.param_groups[0]["params"]):
            if not steps[i]:
                continue
            opt.state[p] = {
                "step": torch.tensor(float(steps[i])),
                "exp_avg": torch.from_numpy(arrays[f"adam/{pset}/{i:04d}/exp_avg"]),
                "exp_avg_sq": torch.from_numpy(arrays[f"adam/{pset}/{i:04d}/exp_avg_sq"]),
            }
        optimizers[pset] = opt
    rngs = RngStreams(meta["seed"])
    rngs.set_state({k[len("rng/"):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("rng/")})
    best = math.inf if meta["best"] is None else meta["best"]
    return TrainState(nets, optimizers, rngs, cfg, SyntheticPrior(tuple(meta["prior"])),
                      meta["epoch"], meta["step"], best)
