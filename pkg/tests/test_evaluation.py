import random

import numpy as np
import pytest
import torch
import torch.nn as nn

from privreplace.data import AttributeSchema, Split, SyntheticDataConfig, generate_synthetic
from privreplace.evaluation import (
    DegenerateLabels,
    EvaluationReport,
    FixedClassifiers,
    accuracy,
    correlation_analysis,
    dumps_curve,
    fit_classifier,
    fool_rate,
    loads_curve,
    mean_distortion,
    pearson,
    privacy_loss,
    tradeoff_curve,
    train_fixed_classifiers,
    utility_accuracies,
    utility_score_images,
    utility_score_synthetic,
)
from privreplace.models import MLPClassifier, Mechanism


class _Threshold(nn.Module):
    """Logits favouring class 1 when coordinate ``dim`` is positive."""

    def __init__(self, dim=0):
        super().__init__()
        self.dim = dim

    def forward(self, x):
        t = x[:, self.dim:self.dim + 1] * 50
        return torch.cat([-t, t], dim=1)


class _Passthrough(nn.Module):
    z_dim = 1

    def forward(self, x, s, z):
        return x.clone()


def _shift(v):
    return Mechanism("function", fn=lambda x: x + torch.tensor(v, dtype=x.dtype))


def _constant():
    return Mechanism("function", fn=lambda x: torch.zeros_like(x))


def test_constant_mechanism_gives_chance(small_synthetic):
    p = privacy_loss(_constant(), small_synthetic.train, small_synthetic.test, epochs=2)
    majority = max(small_synthetic.test.s.double().mean().item(), 1 - small_synthetic.test.s.double().mean().item())
    assert abs(p - 0.5) <= 0.03
    assert p <= majority + 1e-12


def test_identity_mechanism_near_bayes(small_synthetic):
    p = privacy_loss(Mechanism.identity(), small_synthetic.train, small_synthetic.test, epochs=3)
    assert abs(p - 0.954) <= 0.025


def test_synthetic_utility_reference_shifts(small_synthetic):
    t = small_synthetic.test
    assert utility_score_synthetic(Mechanism.identity(), t) == 1.0
    assert utility_score_synthetic(_shift([2.0, 0.0]), t) == pytest.approx(0.0, abs=1e-6)
    assert utility_score_synthetic(_shift([1.0, 0.0]), t) == pytest.approx(0.5, abs=1e-6)
    assert mean_distortion(_shift([3.0, 4.0]), t) == pytest.approx(5.0, abs=1e-5)
    assert mean_distortion(_shift([3.0, 4.0]), t, "mse") == pytest.approx(12.5, abs=1e-4)


def _attribute_split(n=4000, seed=0):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(n, 3, generator=g)
    u = {"A": (x[:, 0] > 0).long(), "B": (x[:, 1] > 0).long(), "C": (x[:, 2] > 0).long()}
    return Split(x, u["A"], u)


def test_image_utility_references():
    test = _attribute_split()
    fixed = FixedClassifiers({k: _Threshold(i) for i, k in enumerate("ABC")})
    schema = AttributeSchema("A", ("B", "C"))
    clean = {k: accuracy(fixed[k], test.x, test.u[k]) for k in "BC"}
    assert utility_accuracies(Mechanism.identity(), fixed, test, schema) == clean
    assert utility_score_images(Mechanism.identity(), fixed, test, schema) == pytest.approx(np.mean(list(clean.values())))
    const = utility_accuracies(_constant(), fixed, test, schema)
    for k in "BC":
        rate = test.u[k].double().mean().item()
        assert const[k] in (pytest.approx(rate), pytest.approx(1 - rate))
        assert abs(const[k] - 0.5) < 0.05
    one = AttributeSchema("A", ("C",))
    assert utility_score_images(Mechanism.identity(), fixed, test, one) == clean["C"]
    with pytest.raises(ValueError):
        utility_score_images(Mechanism.identity(), fixed, test, AttributeSchema("A"))


def test_fixed_classifiers_train_and_reject_constant_labels():
    train, test = _attribute_split(2000, 1), _attribute_split(500, 2)
    fixed = train_fixed_classifiers(train, AttributeSchema("A", ("B",)), epochs=2, test=test)
    assert fixed.clean_accuracy["A"] > 0.9 and "B" in fixed
    flat = Split(train.x, torch.zeros(len(train), dtype=torch.long), {"B": train.u["B"]})
    with pytest.raises(DegenerateLabels):
        train_fixed_classifiers(flat, AttributeSchema("A", ("B",)), epochs=1)
    with pytest.raises(DegenerateLabels):
        fit_classifier(MLPClassifier(3), train.x, torch.ones(len(train)))


def test_fool_rate_of_passthrough_generator_is_half():
    test = _attribute_split(10_000, 3)
    mech = Mechanism("generator", generator=_Passthrough())
    r = fool_rate(mech, _Threshold(0), test)
    assert abs(r - 0.5) < 0.03
    with pytest.raises(ValueError):
        fool_rate(Mechanism.identity(), _Threshold(0), test)


def test_pearson():
    a = np.random.default_rng(0).integers(0, 2, 10_000)
    b = np.random.default_rng(1).integers(0, 2, 10_000)
    assert pearson(a, a) == pytest.approx(1.0)
    assert pearson(a, 1 - a) == pytest.approx(-1.0)
    assert abs(pearson(a, b)) < 0.03
    assert pearson(a, b) == pytest.approx(np.corrcoef(a, b)[0, 1])
    assert pearson(np.ones(5), np.arange(5)) is None


def test_correlation_analysis_shape():
    test = _attribute_split(2000)
    fixed = FixedClassifiers({k: _Threshold(i) for i, k in enumerate("ABC")})
    out = correlation_analysis({"A": Mechanism.identity(), "B": Mechanism.identity()}, fixed, test, ["A", "B", "C"])
    vals = out["values"]
    assert out["cols"] == ["A", "B"] and len(vals) == 3
    assert vals[0][0] == 1.0 and vals[1][1] == 1.0
    assert abs(vals[2][0]) < 0.1
    const = correlation_analysis({"A": _constant()}, fixed, test, ["B"])
    assert const["values"][0][0] is None


def test_report_round_trip(tmp_path):
    r = EvaluationReport("ours_entropy", 0.5, 2, 0.61, 0.8, fool_rate=0.9, utility_accuracies={"B": 0.7},
                         correlation_matrix={"rows": ["A"], "cols": ["A"], "values": [[1.0]]}, dist_xp=0.4)
    p = tmp_path / "r.json"
    r.save(p)
    first = p.read_bytes()
    back = EvaluationReport.load(p)
    assert back == r
    back.save(p)
    assert p.read_bytes() == first


@pytest.mark.parametrize("kw", [dict(privacy_loss=1.2), dict(fool_rate=-0.1),
                                dict(correlation_matrix={"rows": [], "cols": [], "values": [[1.5]]})])
def test_report_validation(kw):
    base = dict(mode="ours_entropy", epsilon=1.0, seed=0, privacy_loss=0.5, utility_score=0.5)
    base.update(kw)
    with pytest.raises(ValueError):
        EvaluationReport(**base)


def _reports():
    out = []
    for mode in ("baseline_entropy", "ours_entropy"):
        for eps in (0.1, 2.0):
            for seed in range(3):
                out.append(EvaluationReport(mode, eps, seed, 0.5 + 0.1 * seed + eps / 10, 0.9 - eps / 4 + 0.01 * seed))
    return out


def test_curve_aggregation():
    pts = tradeoff_curve(_reports())
    assert len(pts) == 4
    assert [p.epsilon for p in pts if p.mode == "ours_entropy"] == [0.1, 2.0]
    p = pts[0]
    vals = [0.5 + 0.1 * s + 0.01 for s in range(3)]
    assert min(vals) <= p.privacy_mean <= max(vals)
    assert p.privacy_std == pytest.approx(np.std(vals, ddof=1))


def test_curve_single_seed_has_no_std():
    pts = tradeoff_curve([r for r in _reports() if r.seed == 0 and r.mode == "ours_entropy"])
    assert len(pts) == 2 and all(p.privacy_std is None and p.utility_std is None for p in pts)
    with pytest.raises(ValueError):
        tradeoff_curve([_reports()[0]])


def test_curve_is_order_invariant():
    reps = _reports()
    text = dumps_curve(tradeoff_curve(reps))
    shuffled = reps[:]
    random.Random(0).shuffle(shuffled)
    assert dumps_curve(tradeoff_curve(shuffled)) == text


def test_curve_file_round_trip():
    text = dumps_curve(tradeoff_curve(_reports()[:6] + [EvaluationReport("x", 0.5, 0, 0.5, 0.5),
                                                         EvaluationReport("x", 1.0, 0, 0.5, 0.5)]))
    assert dumps_curve(loads_curve(text)) == text
    with pytest.raises(ValueError):
        loads_curve("a,b\n")
