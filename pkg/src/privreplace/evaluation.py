"""Privacy/utility measurement of trained privatization mechanisms."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import DEFAULT_BETAS, DEFAULT_LR
from .data import AttributeSchema, Split
from .models import MLPClassifier, Mechanism, build_resnet, censor_all, reset_module

log = logging.getLogger(__name__)

CURVE_HEADER = ("mode", "epsilon", "privacy_mean", "privacy_std", "utility_mean", "utility_std")


class DegenerateLabels(ValueError):
    pass


def default_adversary_factory(x: torch.Tensor) -> Callable[[], nn.Module]:
    """MLP for vector data, ResNet-18 for images, matching the training-time adversaries."""
    if x.dim() == 2:
        return lambda: MLPClassifier(x.shape[1], 2)
    return lambda: build_resnet(18, 2, x.shape[-1])


def fit_classifier(
    model: nn.Module,
    x: torch.Tensor,
    y: torch.Tensor,
    epochs: int = 10,
    batch_size: int = 256,
    lr: float = DEFAULT_LR,
    seed: int = 0,
) -> nn.Module:
    """Train ``model`` with cross-entropy and Adam; returns it in eval mode."""
    y = y.long()
    if len(torch.unique(y)) < 2:
        raise DegenerateLabels("training labels take a single value")
    g = torch.Generator().manual_seed(seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        reset_module(model)
    model = model.to(x.dtype)
    opt = torch.optim.Adam(model.parameters(), lr=lr, betas=DEFAULT_BETAS)
    n = len(y)
    bs = min(batch_size, n)
    model.train()
    for _ in range(epochs):
        perm = torch.randperm(n, generator=g)
        for i in range(0, n - n % bs, bs):
            idx = perm[i:i + bs]
            loss = F.cross_entropy(model(x[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


@torch.no_grad()
def predict(model: nn.Module, x: torch.Tensor, batch_size: int = 1024) -> torch.Tensor:
    model.eval()
    if len(x) == 0:
        return torch.zeros(0, dtype=torch.long)
    return torch.cat([model(x[i:i + batch_size]).argmax(-1) for i in range(0, len(x), batch_size)])


def accuracy(model: nn.Module, x: torch.Tensor, y: torch.Tensor) -> float:
    return float((predict(model, x) == y.long()).double().mean())


def privacy_loss(
    mech: Mechanism,
    train: Split,
    test: Split,
    adversary_factory: Optional[Callable[[], nn.Module]] = None,
    epochs: int = 10,
    batch_size: int = 256,
    seed: int = 0,
) -> float:
    """Accuracy on censored test data of a fresh adversary trained on censored training data.

    The censored training set is drawn once (one z1, z2, s' per example).
    """
    g = torch.Generator().manual_seed(seed)
    x_train, _ = censor_all(mech, train.x, g)
    x_test, _ = censor_all(mech, test.x, g)
    factory = adversary_factory or default_adversary_factory(train.x)
    adv = fit_classifier(factory(), x_train, train.s, epochs, batch_size, seed=seed + 1)
    return accuracy(adv, x_test, test.s)


def labels_for(split: Split, name: str, schema: Optional[AttributeSchema] = None) -> torch.Tensor:
    if name in split.u:
        return split.u[name]
    if schema is not None and name == schema.sensitive_name:
        return split.s
    raise KeyError(f"attribute {name!r} absent from annotations")


@dataclass
class FixedClassifiers:
    """One frozen classifier per attribute, trained on uncensored data."""

    models: dict[str, nn.Module]
    clean_accuracy: dict[str, float] = field(default_factory=dict)

    def __getitem__(self, name: str) -> nn.Module:
        return self.models[name]

    def __contains__(self, name: str) -> bool:
        return name in self.models


def train_fixed_classifiers(
    train: Split,
    schema: AttributeSchema,
    epochs: int = 10,
    test: Optional[Split] = None,
    factory: Optional[Callable[[], nn.Module]] = None,
    batch_size: int = 256,
    seed: int = 0,
) -> FixedClassifiers:
    factory = factory or default_adversary_factory(train.x)
    models, clean = {}, {}
    for k, name in enumerate((schema.sensitive_name, *schema.utility_names)):
        y = labels_for(train, name, schema)
        if len(torch.unique(y)) < 2:
            raise DegenerateLabels(f"attribute {name!r} is constant in the training data")
        models[name] = fit_classifier(factory(), train.x, y, epochs, batch_size, seed=seed + k)
        if test is not None:
            clean[name] = accuracy(models[name], test.x, labels_for(test, name, schema))
            log.info("fixed classifier %s: clean test accuracy %.4f", name, clean[name])
    return FixedClassifiers(models, clean)


def utility_accuracies(mech: Mechanism, fixed: FixedClassifiers, test: Split, schema: AttributeSchema,
                       seed: int = 0) -> dict[str, float]:
    missing = [n for n in schema.utility_names if n not in test.u]
    if missing:
        raise KeyError(f"missing utility annotations: {missing}")
    x, _ = censor_all(mech, test.x, torch.Generator().manual_seed(seed))
    return {name: accuracy(fixed[name], x, test.u[name]) for name in schema.utility_names}


def utility_score_images(mech: Mechanism, fixed: FixedClassifiers, test: Split, schema: AttributeSchema,
                         seed: int = 0) -> float:
    """Mean over utility attributes of fixed-classifier accuracy on censored test data."""
    accs = utility_accuracies(mech, fixed, test, schema, seed)
    if not accs:
        raise ValueError("schema has no utility attributes")
    return float(np.mean([accs[n] for n in schema.utility_names]))


def utility_score_synthetic(mech: Mechanism, test: Split, eps_max: float = 2.0, seed: int = 0) -> float:
    """1 - mean Euclidean distance between x and h(x), divided by eps_max."""
    x, _ = censor_all(mech, test.x, torch.Generator().manual_seed(seed))
    dist = torch.linalg.vector_norm((x - test.x).double().flatten(1), dim=1)
    return float(1.0 - dist.mean() / eps_max)


def fool_rate(mech: Mechanism, fixed_sensitive: nn.Module, test: Split, seed: int = 0) -> float:
    """Fraction of censored test examples on which the fixed classifier predicts s'."""
    if not mech.synthesizes:
        raise ValueError("fool rate needs a mechanism that samples a synthetic attribute")
    x, s_synth = censor_all(mech, test.x, torch.Generator().manual_seed(seed))
    return float((predict(fixed_sensitive, x) == s_synth).double().mean())


def mean_distortion(mech: Mechanism, test: Split, measure: str = "l2", seed: int = 0) -> float:
    from .objectives import distortion

    x, _ = censor_all(mech, test.x, torch.Generator().manual_seed(seed))
    return float(distortion(x.double(), test.x.double(), measure))


def pearson(a, b) -> Optional[float]:
    """Pearson correlation; None when either vector has zero variance."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float((a * a).sum()) * float((b * b).sum()))
    if den == 0.0:
        return None
    return float((a * b).sum() / den)


def correlation_analysis(
    mechs: Mapping[str, Mechanism],
    fixed: FixedClassifiers,
    test: Split,
    rows: Sequence[str],
    seed: int = 0,
) -> dict:
    """Entry (row, col): correlation of fixed-classifier predictions for row and col
    on test data censored with respect to col. Undefined entries are None."""
    cols = list(mechs)
    values = [[None] * len(cols) for _ in rows]
    for j, col in enumerate(cols):
        x, _ = censor_all(mechs[col], test.x, torch.Generator().manual_seed(seed + j))
        col_pred = predict(fixed[col], x).numpy()
        for i, row in enumerate(rows):
            if row == col:
                values[i][j] = 1.0
            else:
                values[i][j] = pearson(predict(fixed[row], x).numpy(), col_pred)
    return {"rows": list(rows), "cols": cols, "values": values}


# -- reports -------------------------------------------------------------------

@dataclass
class EvaluationReport:
    mode: str
    epsilon: float
    seed: int
    privacy_loss: float
    utility_score: float
    dataset: str = "synthetic"
    sensitive: str = "s"
    fool_rate: Optional[float] = None
    utility_accuracies: dict[str, float] = field(default_factory=dict)
    correlation_matrix: Optional[dict] = None
    dist_xp: Optional[float] = None
    dist_xpp: Optional[float] = None

    def __post_init__(self):
        for name in ("privacy_loss", "fool_rate"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.correlation_matrix is not None:
            for row in self.correlation_matrix["values"]:
                for v in row:
                    if v is not None and not -1.0 - 1e-12 <= v <= 1.0 + 1e-12:
                        raise ValueError(f"correlation {v} outside [-1, 1]")

    def dumps(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def loads(cls, text: str) -> "EvaluationReport":
        return cls(**json.loads(text))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> "EvaluationReport":
        with open(path) as fh:
            return cls.loads(fh.read())


@dataclass(frozen=True)
class CurvePoint:
    mode: str
    epsilon: float
    privacy_mean: float
    privacy_std: Optional[float]
    utility_mean: float
    utility_std: Optional[float]


def _mean_std(values: Sequence[float]) -> tuple[float, Optional[float]]:
    arr = np.asarray(sorted(values), dtype=float)
    return float(arr.mean()), (float(arr.std(ddof=1)) if len(arr) > 1 else None)


def tradeoff_curve(reports: Iterable[EvaluationReport], min_budgets: int = 2) -> list[CurvePoint]:
    """Per mode, seed-averaged (privacy, utility) points sorted by epsilon."""
    cells: dict[tuple[str, float], list[EvaluationReport]] = {}
    for r in reports:
        cells.setdefault((r.mode, r.epsilon), []).append(r)
    modes = sorted({m for m, _ in cells})
    out = []
    for mode in modes:
        eps = sorted(e for m, e in cells if m == mode)
        if len(eps) < min_budgets:
            raise ValueError(f"mode {mode!r} has {len(eps)} budget(s); a curve needs {min_budgets}")
        for e in eps:
            rs = sorted(cells[(mode, e)], key=lambda r: r.seed)
            pm, ps = _mean_std([r.privacy_loss for r in rs])
            um, us = _mean_std([r.utility_score for r in rs])
            out.append(CurvePoint(mode, e, pm, ps, um, us))
    return out


def _fmt(v: Optional[float]) -> str:
    return "" if v is None else repr(float(v))


def dumps_curve(points: Sequence[CurvePoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_HEADER)
    for p in points:
        w.writerow([p.mode, _fmt(p.epsilon), _fmt(p.privacy_mean), _fmt(p.privacy_std),
                    _fmt(p.utility_mean), _fmt(p.utility_std)])
    return buf.getvalue()


def loads_curve(text: str) -> list[CurvePoint]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != CURVE_HEADER:
        raise ValueError("curve file header mismatch")

    def num(v):
        return None if v == "" else float(v)

    return [CurvePoint(r[0], float(r[1]), float(r[2]), num(r[3]), float(r[4]), num(r[5])) for r in rows[1:]]

