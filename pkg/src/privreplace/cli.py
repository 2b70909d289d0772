"""Command-line runner: data generation, training, evaluation, sweeps and reports.

Exit codes: 0 success, 1 invalid input, 2 failure while running.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

import numpy as np
import torch

from .checkpoint import CheckpointError, load_model, save_model
from .core import (
    DATASETS,
    MODES,
    ConfigError,
    DistortionBudget,
    TrainConfig,
    load_config,
    save_config,
    validate_config,
)
from .data import (
    AttributeSchema,
    DataFormatError,
    Split,
    SplitDataset,
    SyntheticDataConfig,
    canonical_attribute,
    generate_synthetic,
    load_celeba,
    read_points,
    write_points,
)
from .evaluation import (
    EvaluationReport,
    FixedClassifiers,
    dumps_curve,
    fool_rate,
    mean_distortion,
    privacy_loss,
    tradeoff_curve,
    train_fixed_classifiers,
    utility_accuracies,
    utility_score_synthetic,
)
from .models import Mechanism, censor_all
from .training import TrainState, default_nets, load_train_state, train

log = logging.getLogger("privreplace")

DATA_ROOT_ENV = "PRIVREPLACE_DATA_ROOT"
EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2

SYNTHETIC_EPSILONS = (0.1, 0.5, 1.0, 1.5, 2.0)
IMAGE_EPSILONS = (0.03, 0.02, 0.01, 0.005, 0.001)
DESK_SCALE = {
    "synthetic": dict(n_train=40000, n_test=2560),
    "celeba": dict(n_train=2000, n_test=1000, image_size=64),
}
DONE_MARKER = "DONE"
ERROR_LOG = "error.log"
CURVE_FILE = "curve.csv"
TRADEOFF_PLOT = "tradeoff.png"
SCATTER_PLOT = "scatter.png"
ABLATION_COLUMNS = (
    ("baseline", ("baseline_entropy", "baseline_likelihood")),
    ("generator", ("generator_only",)),
    ("ours", ("ours_entropy", "ours_likelihood")),
)


class RunFailed(RuntimeError):
    pass


# -- sweep specification --------------------------------------------------------

@dataclass(frozen=True)
class SweepSpec:
    dataset: str = "synthetic"
    modes: tuple[str, ...] = ("baseline_entropy", "ours_entropy")
    epsilons: tuple[float, ...] = ()
    seeds: tuple[int, ...] = (0,)
    sensitive: str = "s"
    n_train: Optional[int] = None
    n_test: Optional[int] = None
    image_size: Optional[int] = None
    epochs: Optional[int] = None
    batch_size: Optional[int] = None
    base_channels: int = 64
    adversary_epochs: int = 10
    data_root: Optional[str] = None

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        bad = [m for m in self.modes if m not in MODES]
        if bad:
            raise ConfigError(f"unknown mode(s) {bad}; expected one of {MODES}")
        if not self.modes:
            raise ConfigError("sweep needs at least one mode")
        if not self.seeds:
            raise ConfigError("sweep needs at least one seed")
        if not self.epsilons:
            grid = SYNTHETIC_EPSILONS if self.dataset == "synthetic" else IMAGE_EPSILONS
            object.__setattr__(self, "epsilons", grid)
        if any(e < 0 for e in self.epsilons):
            raise ConfigError("negative distortion budget")
        scale = DESK_SCALE[self.dataset]
        for key in ("n_train", "n_test", "image_size"):
            if getattr(self, key) is None and key in scale:
                object.__setattr__(self, key, scale[key])
        if self.dataset == "celeba" and self.sensitive == "s":
            object.__setattr__(self, "sensitive", "Smiling")
        if self.dataset == "celeba":
            object.__setattr__(self, "sensitive", canonical_attribute(self.sensitive))

    def config(self, mode: str, eps: float, seed: int) -> TrainConfig:
        cfg = TrainConfig(mode=mode, budget=DistortionBudget.single(eps), seed=seed, dataset=self.dataset,
                          epochs=self.epochs, batch_size=self.batch_size,
                          image_size=self.image_size if self.dataset == "celeba" else None)
        return validate_config(cfg)

    def cells(self) -> list[tuple[str, float, int]]:
        return [(m, e, s) for m in self.modes for e in self.epsilons for s in self.seeds]


def cell_dir(out_dir: str, spec: SweepSpec, mode: str, eps: float, seed: int) -> str:
    return os.path.join(out_dir, spec.dataset, spec.sensitive, mode, f"eps{eps:g}", f"seed{seed}")


# -- data ----------------------------------------------------------------------

def data_root(explicit: Optional[str] = None) -> str:
    root = explicit or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise ConfigError(f"no dataset root: pass --data-root or set {DATA_ROOT_ENV}")
    if not os.path.isdir(root):
        raise ConfigError(f"dataset root {root!r} is not a directory")
    return root


def load_dataset(spec: SweepSpec, seed: int) -> SplitDataset:
    if spec.dataset == "synthetic":
        return generate_synthetic(SyntheticDataConfig(n_train=spec.n_train, n_test=spec.n_test, seed=seed))
    return load_celeba(data_root(spec.data_root), spec.sensitive, spec.image_size,
                       n_train=spec.n_train, n_validation=0, n_test=spec.n_test, seed=seed)


def schema_for(spec: SweepSpec) -> AttributeSchema:
    if spec.dataset == "synthetic":
        return AttributeSchema("s")
    return AttributeSchema.for_experiment(spec.sensitive)


def fixed_classifiers(spec: SweepSpec, ds: SplitDataset, seed: int, out_dir: str) -> FixedClassifiers:
    """Train (or reload) the per-attribute classifiers on uncensored data."""
    schema = schema_for(spec)
    root = os.path.join(out_dir, spec.dataset, spec.sensitive, "fixed", f"seed{seed}")
    names = (schema.sensitive_name, *schema.utility_names)
    paths = {n: os.path.join(root, f"{n}.ckpt") for n in names}
    if all(os.path.exists(p) for p in paths.values()):
        models = {}
        for n, p in paths.items():
            m = load_model(p).eval()
            for q in m.parameters():
                q.requires_grad_(False)
            models[n] = m
        return FixedClassifiers(models)
    fixed = train_fixed_classifiers(ds.train, schema, spec.adversary_epochs, test=ds.test, seed=seed)
    os.makedirs(root, exist_ok=True)
    for n in names:
        # per-process temp name: parallel cells may train the same cache entry
        tmp = f"{paths[n]}.{os.getpid()}.tmp"
        save_model(fixed[n], tmp)
        os.replace(tmp, paths[n])
    return fixed


# -- cells -----------------------------------------------------------------------

def evaluate_state(state: TrainState, spec: SweepSpec, ds: SplitDataset, fixed: FixedClassifiers,
                   seed: int) -> EvaluationReport:
    cfg = state.cfg
    mech = Mechanism.for_mode(cfg.mode, state.nets, state.prior)
    schema = schema_for(spec)
    priv = privacy_loss(mech, ds.train, ds.test, epochs=spec.adversary_epochs, seed=seed)
    accs = {}
    if spec.dataset == "synthetic":
        util = utility_score_synthetic(mech, ds.test, cfg.budget.epsilon_max, seed=seed)
    else:
        accs = utility_accuracies(mech, fixed, ds.test, schema, seed=seed)
        util = float(np.mean([accs[n] for n in schema.utility_names]))
    fool = fool_rate(mech, fixed[schema.sensitive_name], ds.test, seed=seed) if mech.synthesizes else None
    measure = cfg.distortion_measure
    dist_xp = mean_distortion(Mechanism("filter", filter=state.nets.filter), ds.test, measure, seed) \
        if cfg.uses_filter else None
    dist_xpp = mean_distortion(mech, ds.test, measure, seed) if cfg.uses_generator else None
    return EvaluationReport(cfg.mode, cfg.epsilon, cfg.seed, priv, util, spec.dataset, spec.sensitive,
                            fool, accs, None, dist_xp, dist_xpp)


def run_cell(spec: SweepSpec, mode: str, eps: float, seed: int, out_dir: str) -> str:
    """Train and evaluate one cell; returns its directory. Skips completed cells."""
    d = cell_dir(out_dir, spec, mode, eps, seed)
    if os.path.exists(os.path.join(d, DONE_MARKER)):
        return d
    os.makedirs(d, exist_ok=True)
    cfg = spec.config(mode, eps, seed)
    save_config(cfg, os.path.join(d, "config.json"))
    ds = load_dataset(spec, seed)
    fixed = fixed_classifiers(spec, ds, seed, out_dir)
    nets = default_nets(cfg, spec.base_channels)
    log_path = os.path.join(d, "steps.jsonl")
    if os.path.exists(log_path):
        os.remove(log_path)
    state, _ = train(ds.train, cfg, nets=nets, checkpoint_dir=d, log_path=log_path)
    report = evaluate_state(state, spec, ds, fixed, seed)
    report.save(os.path.join(d, "report.json"))
    with open(os.path.join(d, DONE_MARKER), "w") as fh:
        fh.write("ok\n")
    return d


def _cell_worker(args) -> tuple[str, Optional[str]]:
    spec, mode, eps, seed, out_dir = args
    torch.set_num_threads(1)
    d = cell_dir(out_dir, spec, mode, eps, seed)
    try:
        run_cell(spec, mode, eps, seed, out_dir)
        return d, None
    except Exception:
        os.makedirs(d, exist_ok=True)
        tb = traceback.format_exc()
        with open(os.path.join(d, ERROR_LOG), "w") as fh:
            fh.write(tb)
        return d, tb.strip().splitlines()[-1]


def run_sweep(spec: SweepSpec, out_dir: str, jobs: int = 1) -> int:
    """Run every (mode, epsilon, seed) cell, then aggregate. Returns an exit code."""
    os.makedirs(out_dir, exist_ok=True)
    if spec.dataset == "celeba":
        data_root(spec.data_root)
    for m, e, s in spec.cells():
        spec.config(m, e, s)
    work = [(spec, m, e, s, out_dir) for m, e, s in spec.cells()]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_cell_worker, work))
    else:
        results = [_cell_worker(w) for w in work]
    failed = [(d, msg) for d, msg in results if msg is not None]
    for d, msg in failed:
        log.error("cell %s failed: %s (see %s)", d, msg, os.path.join(d, ERROR_LOG))
    if failed:
        return EXIT_FAILED
    aggregate(spec, out_dir)
    return EXIT_OK


# -- aggregation and artifacts ---------------------------------------------------------

def collect_reports(out_dir: str) -> list[EvaluationReport]:
    reports = []
    for root, _, files in sorted(os.walk(out_dir)):
        if "report.json" in files and DONE_MARKER in files:
            reports.append(EvaluationReport.load(os.path.join(root, "report.json")))
    reports.sort(key=lambda r: (r.dataset, r.sensitive, r.mode, r.epsilon, r.seed))
    return reports


def emit_curve(reports: Sequence[EvaluationReport], path: str) -> None:
    n_eps = min(len({r.epsilon for r in reports if r.mode == m}) for m in {r.mode for r in reports})
    points = tradeoff_curve(reports, min_budgets=min(2, n_eps))
    with open(path, "w", newline="") as fh:
        fh.write(dumps_curve(points))


def _savefig(fig, path: str) -> None:
    fig.savefig(path, dpi=100, metadata={"Software": None})


def emit_tradeoff_plot(reports: Sequence[EvaluationReport], path: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n_eps = min(len({r.epsilon for r in reports if r.mode == m}) for m in {r.mode for r in reports})
    points = tradeoff_curve(reports, min_budgets=min(2, n_eps))
    fig, ax = plt.subplots(figsize=(5, 4))
    for mode in sorted({p.mode for p in points}):
        pts = [p for p in points if p.mode == mode]
        ax.errorbar([p.privacy_mean for p in pts], [p.utility_mean for p in pts],
                    xerr=[p.privacy_std or 0.0 for p in pts], yerr=[p.utility_std or 0.0 for p in pts],
                    marker="o", capsize=3, label=mode)
        for p in pts:
            ax.annotate(f"{p.epsilon:g}", (p.privacy_mean, p.utility_mean), fontsize=7,
                        textcoords="offset points", xytext=(3, 3))
    ax.set_xlabel("privacy loss (adversary accuracy)")
    ax.set_ylabel("utility")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _savefig(fig, path)
    plt.close(fig)


def emit_scatter(raw: Split, censored: dict[str, torch.Tensor], out_file: str, max_points: int = 2000) -> str:
    """One panel per mechanism: raw points by class, censored points by true class, shared axes."""
    if raw.x.dim() != 2 or raw.x.shape[1] != 2:
        raise ValueError("scatter plots need 2D points")
    if not censored:
        raise ValueError("no censored sets to plot")
    for name, x in censored.items():
        if len(x) == 0:
            raise ValueError(f"censored set {name!r} is empty")
        if x.dim() != 2 or x.shape[1] != 2:
            raise ValueError(f"censored set {name!r} is not 2D")
        if len(x) != len(raw):
            raise ValueError(f"censored set {name!r} has {len(x)} points, raw data has {len(raw)}")
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    k = min(max_points, len(raw))
    pts = [raw.x[:k], *(x[:k] for x in censored.values())]
    allpts = torch.cat(pts).numpy()
    lo, hi = allpts.min(0) - 0.5, allpts.max(0) + 0.5
    s = raw.s[:k].numpy()
    fig, axes = plt.subplots(1, len(censored), figsize=(4 * len(censored), 4), squeeze=False)
    for ax, (name, x) in zip(axes[0], censored.items()):
        x = x[:k].numpy()
        for cls, colour in ((0, "tab:blue"), (1, "tab:orange")):
            r = raw.x[:k].numpy()[s == cls]
            ax.scatter(r[:, 0], r[:, 1], s=2, c=colour, alpha=0.15)
            ax.scatter(x[s == cls, 0], x[s == cls, 1], s=2, c=colour, marker="x", alpha=0.6, label=f"s={cls}")
        ax.set_xlim(lo[0], hi[0])
        ax.set_ylim(lo[1], hi[1])
        ax.set_title(name, fontsize=9)
        ax.legend(fontsize=7, loc="upper right")
    fig.tight_layout()
    _savefig(fig, out_file)
    plt.close(fig)
    return out_file


def _fmt_cell(values: Sequence[float]) -> str:
    if not values:
        return ""
    arr = 100.0 * np.asarray(sorted(values), dtype=float)
    if len(arr) == 1:
        return f"{arr[0]:.1f}"
    return f"{arr.mean():.1f} ± {arr.std(ddof=1):.1f}"


def _write_table(path: str, header: Sequence[str], rows: Iterable[Sequence[str]]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def emit_tables(reports: Sequence[EvaluationReport], out_dir: str) -> list[str]:
    """Fool-rate table (attribute x epsilon) and ablation table (epsilon x mechanism), in percent."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    fooled = [r for r in reports if r.fool_rate is not None]
    eps = sorted({r.epsilon for r in fooled}, reverse=True)
    attrs = sorted({r.sensitive for r in fooled})
    rows = []
    for a in attrs:
        row = [a]
        for e in eps:
            row.append(_fmt_cell([r.fool_rate for r in fooled if r.sensitive == a and r.epsilon == e]))
        rows.append(row)
    path = os.path.join(out_dir, "fool_rate.csv")
    _write_table(path, ["attribute", *(f"{e:g}" for e in eps)], rows)
    written.append(path)

    present = {r.mode for r in reports}
    columns = []
    for label, candidates in ABLATION_COLUMNS:
        mode = next((m for m in candidates if m in present), None)
        if mode is not None:
            columns.append((label, mode))
    eps = sorted({r.epsilon for r in reports if r.mode in {m for _, m in columns}}, reverse=True)
    rows = []
    for e in eps:
        row = [f"{e:g}"]
        for _, mode in columns:
            row.append(_fmt_cell([r.privacy_loss for r in reports if r.mode == mode and r.epsilon == e]))
        rows.append(row)
    path = os.path.join(out_dir, "ablation.csv")
    _write_table(path, ["epsilon", *(label for label, _ in columns)], rows)
    written.append(path)
    return written


def scatter_for_sweep(spec: SweepSpec, out_dir: str, path: str) -> Optional[str]:
    """Scatter of censored test points at the largest budget, first seed, every mode."""
    eps, seed = max(spec.epsilons), min(spec.seeds)
    ds = load_dataset(spec, seed)
    censored = {}
    for mode in spec.modes:
        ck = os.path.join(cell_dir(out_dir, spec, mode, eps, seed), "last.ckpt")
        if not os.path.exists(ck):
            continue
        state = load_train_state(ck)
        mech = Mechanism.for_mode(mode, state.nets, state.prior)
        censored[f"{mode} (eps={eps:g})"], _ = censor_all(mech, ds.test.x, torch.Generator().manual_seed(seed))
    if not censored:
        return None
    return emit_scatter(ds.test, censored, path)


def aggregate(spec: SweepSpec, out_dir: str) -> list[str]:
    reports = [r for r in collect_reports(out_dir) if r.dataset == spec.dataset and r.sensitive == spec.sensitive]
    if not reports:
        raise RunFailed("no completed cells to aggregate")
    written = []
    path = os.path.join(out_dir, CURVE_FILE)
    emit_curve(reports, path)
    written.append(path)
    path = os.path.join(out_dir, TRADEOFF_PLOT)
    emit_tradeoff_plot(reports, path)
    written.append(path)
    if spec.dataset == "synthetic":
        path = scatter_for_sweep(spec, out_dir, os.path.join(out_dir, SCATTER_PLOT))
        if path:
            written.append(path)
    written.extend(emit_tables(reports, out_dir))
    return written


# -- argument parsing ------------------------------------------------------------

def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _names(text: str) -> tuple[str, ...]:
    return tuple(v for v in text.split(",") if v)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON training config; explicit flags override its values")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--lambda", dest="penalty_lambda", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--beta1", type=float)
    p.add_argument("--beta2", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--dataset", choices=DATASETS)
    p.add_argument("--image-size", type=int)


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="directory with train.prvf/test.prvf written by generate-data")
    p.add_argument("--data-root", help=f"CelebA root (default: ${DATA_ROOT_ENV})")
    p.add_argument("--sensitive", default=None)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--base-channels", type=int, default=64)
    p.add_argument("--adversary-epochs", type=int, default=10)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="privreplace", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate-data", help="write the two-Gaussian dataset to binary point files")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=DESK_SCALE["synthetic"]["n_train"])
    p.add_argument("--n-test", type=int, default=DESK_SCALE["synthetic"]["n_test"])
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train one configuration")
    _add_train_flags(p)
    _add_data_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true", help="continue from OUT/last.ckpt")

    p = sub.add_parser("evaluate", help="evaluate a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    _add_data_flags(p)
    p.add_argument("--out", required=True, help="report JSON path")

    p = sub.add_parser("sweep", help="train and evaluate a mode x epsilon x seed grid")
    p.add_argument("--dataset", choices=DATASETS, default="synthetic")
    p.add_argument("--modes", type=_names, default=SweepSpec.modes)
    p.add_argument("--epsilons", type=_floats, default=())
    p.add_argument("--seeds", type=_ints, default=(0,))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--image-size", type=int)
    p.add_argument("--jobs", type=int, default=1)
    _add_data_flags(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="aggregate finished cells into curve, plots and tables")
    p.add_argument("--out", required=True, help="sweep output directory")
    p.add_argument("--dataset", choices=DATASETS, default="synthetic")
    p.add_argument("--sensitive", default=None)
    p.add_argument("--no-plots", action="store_true")
    return parser


def _train_config(args) -> TrainConfig:
    base = load_config(args.config) if args.config else TrainConfig()
    eps = args.epsilon if args.epsilon is not None else base.epsilon
    overrides = {k: getattr(args, k) for k in ("mode", "penalty_lambda", "lr", "beta1", "beta2", "batch_size",
                                                "epochs", "seed", "dataset", "image_size")}
    cfg = replace(base, budget=DistortionBudget.single(eps),
                  **{k: v for k, v in overrides.items() if v is not None})
    return validate_config(cfg)


def _spec_from_args(args, cfg: Optional[TrainConfig] = None) -> SweepSpec:
    dataset = cfg.dataset if cfg else args.dataset
    sensitive = args.sensitive or ("s" if dataset == "synthetic" else "Smiling")
    return SweepSpec(
        dataset=dataset,
        modes=(cfg.mode,) if cfg else tuple(args.modes),
        epsilons=(cfg.epsilon,) if cfg else tuple(args.epsilons),
        seeds=(cfg.seed,) if cfg else tuple(args.seeds),
        sensitive=sensitive,
        n_train=args.n_train,
        n_test=args.n_test,
        image_size=cfg.image_size if cfg else args.image_size,
        epochs=cfg.epochs if cfg else args.epochs,
        batch_size=cfg.batch_size if cfg else args.batch_size,
        base_channels=args.base_channels,
        adversary_epochs=args.adversary_epochs,
        data_root=args.data_root,
    )


def _dataset_for(args, spec: SweepSpec, seed: int) -> SplitDataset:
    if args.data:
        return SplitDataset(read_points(os.path.join(args.data, "train.prvf")), Split.empty((0, 2)),
                            read_points(os.path.join(args.data, "test.prvf")))
    return load_dataset(spec, seed)


def cmd_generate_data(args) -> int:
    ds = generate_synthetic(SyntheticDataConfig(n_train=args.n_train, n_test=args.n_test, seed=args.seed))
    os.makedirs(args.out, exist_ok=True)
    write_points(os.path.join(args.out, "train.prvf"), ds.train.x, ds.train.s)
    write_points(os.path.join(args.out, "test.prvf"), ds.test.x, ds.test.s)
    print(f"wrote {len(ds.train)} train / {len(ds.test)} test points to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _train_config(args)
    spec = _spec_from_args(args, cfg)
    os.makedirs(args.out, exist_ok=True)
    save_config(cfg, os.path.join(args.out, "config.json"))
    ds = _dataset_for(args, spec, cfg.seed)
    state = None
    if args.resume:
        state = load_train_state(os.path.join(args.out, "last.ckpt"))
        state.cfg = cfg
    nets = None if state else default_nets(cfg, spec.base_channels)
    state, hist = train(ds.train, cfg, nets=nets, state=state, checkpoint_dir=args.out,
                        log_path=os.path.join(args.out, "steps.jsonl"))
    last = hist[-1] if hist else None
    print(f"trained {cfg.mode} eps={cfg.epsilon:g} for {state.epoch} epoch(s), {state.step} steps"
          + (f"; last step distortion x'={last.dist_xp} x''={last.dist_xpp}" if last else ""))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    state = load_train_state(args.checkpoint)
    spec = _spec_from_args(args, state.cfg)
    ds = _dataset_for(args, spec, state.cfg.seed)
    schema = schema_for(spec)
    fixed = train_fixed_classifiers(ds.train, schema, spec.adversary_epochs, seed=state.cfg.seed)
    report = evaluate_state(state, spec, ds, fixed, state.cfg.seed)
    report.save(args.out)
    print(report.dumps(), end="")
    return EXIT_OK


def cmd_sweep(args) -> int:
    spec = _spec_from_args(args)
    status = run_sweep(spec, args.out, jobs=args.jobs)
    if status == EXIT_OK:
        print(f"sweep complete: {len(spec.cells())} cells in {args.out}")
    return status


def cmd_report(args) -> int:
    reports = collect_reports(args.out)
    if args.sensitive:
        reports = [r for r in reports if r.sensitive == args.sensitive]
    reports = [r for r in reports if r.dataset == args.dataset]
    if not reports:
        raise RunFailed(f"no completed cells under {args.out}")
    emit_curve(reports, os.path.join(args.out, CURVE_FILE))
    if not args.no_plots:
        emit_tradeoff_plot(reports, os.path.join(args.out, TRADEOFF_PLOT))
    for path in emit_tables(reports, args.out):
        print(path)
    return EXIT_OK


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DataFormatError, CheckpointError, KeyError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001
        log.debug("command failed", exc_info=True)
        print(f"failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
