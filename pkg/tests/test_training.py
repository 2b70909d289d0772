import json
import math

import pytest
import torch

from privreplace.core import DistortionBudget, TrainConfig, validate_config
from privreplace.data import Split, SyntheticDataConfig, generate_synthetic
from privreplace.models import build_mlp_family
from privreplace.training import (
    TrainingDiverged,
    _adam_step,
    active_sets,
    init_parameters,
    iterate_batches,
    load_train_state,
    save_train_state,
    train,
    train_step,
)

from toy_trace import package_trace, reference_trace


def _data(n=1024, seed=0):
    return generate_synthetic(SyntheticDataConfig(n_train=n, n_test=10, seed=seed)).train


def _params(module):
    return [p.detach().clone() for p in module.parameters()]


def _same(a, b):
    return all(torch.equal(p, q) for p, q in zip(a, b))


def _cfg(**kw):
    kw.setdefault("budget", DistortionBudget.single(1.0))
    return validate_config(TrainConfig(**kw))


def test_step_is_deterministic():
    data = _data(256)
    batch = (data.x[:64], data.s[:64])
    outs = []
    for _ in range(2):
        cfg = _cfg(seed=3)
        st = init_parameters(build_mlp_family(), 3, cfg)
        train_step(st, batch, cfg)
        outs.append([_params(m) for _, m in st.nets.items()])
    assert all(_same(a, b) for a, b in zip(*outs))


def test_init_seeds():
    a = init_parameters(build_mlp_family(), 0, _cfg())
    b = init_parameters(build_mlp_family(), 0, _cfg())
    c = init_parameters(build_mlp_family(), 1, _cfg(seed=1))
    assert _same(_params(a.nets.filter), _params(b.nets.filter))
    assert not _same(_params(a.nets.filter), _params(c.nets.filter))


def test_baseline_skips_generator_branch():
    nets = build_mlp_family()
    cfg = _cfg(mode="baseline_entropy", epochs=1, batch_size=128)
    st = init_parameters(nets, 0, cfg)
    g_before = _params(nets.generator)
    d_before = _params(nets.generator_discriminator)
    st, hist = train(_data(512), cfg, state=st)
    assert st.nets.generator is None and st.nets.generator_discriminator is None
    assert set(st.optimizers) == {"theta_f", "phi_f"}
    assert _same(g_before, _params(nets.generator)) and _same(d_before, _params(nets.generator_discriminator))
    assert all(m.theta_g_loss is None and m.dist_xpp is None for m in hist)


def test_generator_only_trains_generator_pair():
    cfg = _cfg(mode="generator_only", epochs=1, batch_size=128)
    st, hist = train(_data(512), cfg, nets=build_mlp_family())
    assert st.nets.filter is None and st.nets.filter_adversary is None
    assert set(st.optimizers) == {"theta_g", "phi_g"} == set(active_sets("generator_only"))
    assert all(m.theta_f_loss is None and m.theta_g_loss is not None for m in hist)


def test_zero_epochs_returns_initial_state():
    cfg = _cfg(epochs=0)
    st0 = init_parameters(build_mlp_family(), 0, cfg)
    before = _params(st0.nets.filter)
    st, hist = train(_data(64), cfg, state=st0)
    assert hist == [] and st.step == 0
    assert _same(before, _params(st.nets.filter))


def test_without_penalty_distortion_grows():
    cfg = _cfg(mode="baseline_likelihood", penalty_lambda=0.0, epochs=6, batch_size=64, lr=2e-3)
    _, hist = train(_data(1024), cfg, nets=build_mlp_family())
    n = len(hist) // 6
    d_start = sum(m.dist_xp for m in hist[:n]) / n
    d_end = sum(m.dist_xp for m in hist[-n:]) / n
    t_start = sum(m.theta_f_loss for m in hist[:n]) / n
    t_end = sum(m.theta_f_loss for m in hist[-n:]) / n
    assert d_end > 5 * d_start and d_end > 2.0
    assert t_end < t_start


def test_penalty_holds_distortion_near_budget():
    cfg = _cfg(mode="baseline_likelihood", budget=DistortionBudget.single(0.3), epochs=6, batch_size=64, lr=2e-3)
    _, hist = train(_data(1024), cfg, nets=build_mlp_family())
    tail = hist[-16:]
    assert sum(m.dist_xp for m in tail) / len(tail) <= 1.1 * 0.3


def test_adam_matches_hand_recurrence():
    # f(p) = (p - 3)^2 from p = 0 at lr 0.1; the first step is exactly lr (up to eps)
    p = torch.nn.Parameter(torch.tensor(0.0, dtype=torch.float64))
    mod = torch.nn.Module()
    mod.p = p
    opt = torch.optim.Adam([p], lr=0.1, betas=(0.9, 0.999))
    ref, m, v = 0.0, 0.0, 0.0
    trace = []
    for t in range(1, 4):
        _adam_step(opt, (p - 3) ** 2, mod)
        g = 2 * (ref - 3)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.1 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert p.item() == pytest.approx(ref, abs=1e-12)
        trace.append(p.item())
    assert trace[0] == pytest.approx(0.1, abs=1e-8)
    assert trace[0] < trace[1] < trace[2] < 0.3


@pytest.mark.parametrize("mode", ["ours_entropy", "ours_likelihood"])
@pytest.mark.parametrize("eps", [0.05, 5.0])
def test_toy_trace(mode, eps):
    cfg = validate_config(TrainConfig(mode=mode, budget=DistortionBudget.single(eps), lr=0.01, seed=2))
    for ref, got in zip(reference_trace(cfg), package_trace(cfg)):
        assert max(abs(r - g) for r, g in zip(ref, got)) < 1e-10


def test_iterate_batches():
    sp = _data(100)
    batches = list(iterate_batches(sp, 32, torch.Generator().manual_seed(0)))
    assert [len(x) for x, _ in batches] == [32, 32, 32]
    idx = torch.cat([x for x, _ in batches])
    assert len({tuple(r.tolist()) for r in idx}) == 96
    small = list(iterate_batches(sp.take(range(10)), 32, torch.Generator()))
    assert [len(x) for x, _ in small] == [10]


def test_resume_matches_uninterrupted(tmp_path):
    data = _data(512)
    cfg = _cfg(epochs=2, batch_size=128, seed=5)
    full, _ = train(data, cfg, nets=build_mlp_family())
    half, _ = train(data, _cfg(epochs=1, batch_size=128, seed=5), nets=build_mlp_family(),
                    checkpoint_dir=str(tmp_path))
    resumed = load_train_state(str(tmp_path / "last.ckpt"))
    resumed, _ = train(data, cfg, state=resumed)
    for (_, a), (_, b) in zip(full.nets.items(), resumed.nets.items()):
        assert _same(_params(a), _params(b))
    assert resumed.step == full.step


def test_train_state_file_round_trip(tmp_path):
    cfg = _cfg(epochs=1, batch_size=128)
    st, _ = train(_data(256), cfg, nets=build_mlp_family())
    p = tmp_path / "s.ckpt"
    save_train_state(st, str(p))
    first = p.read_bytes()
    save_train_state(load_train_state(str(p)), str(p))
    assert p.read_bytes() == first


def test_step_log_and_checkpoints(tmp_path):
    cfg = _cfg(epochs=2, batch_size=128)
    log = tmp_path / "steps.jsonl"
    _, hist = train(_data(256), cfg, nets=build_mlp_family(), checkpoint_dir=str(tmp_path), log_path=str(log))
    lines = log.read_text().splitlines()
    assert len(lines) == len(hist) == 4
    assert json.loads(lines[-1])["step"] == 3
    assert (tmp_path / "best.ckpt").exists() and (tmp_path / "last.ckpt").exists()


def test_divergence_is_reported(tmp_path):
    bad = Split(torch.full((64, 2), float("nan")), torch.zeros(64, dtype=torch.long))
    with pytest.raises(TrainingDiverged) as exc:
        train(bad, _cfg(epochs=1, batch_size=64), nets=build_mlp_family(), checkpoint_dir=str(tmp_path))
    assert exc.value.snapshot and (tmp_path / "diverged.ckpt").exists()


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        train(Split.empty((2,)), _cfg())


class _IdentityFilter(torch.nn.Module):
    z_dim = 1

    def __init__(self):
        super().__init__()
        self.unused = torch.nn.Parameter(torch.zeros(1))

    def forward(self, x, z):
        return x


def test_adversary_learns_against_identity_filter():
    from privreplace.models import MLPClassifier, Nets

    nets = Nets(filter=_IdentityFilter(), filter_adversary=MLPClassifier(2, 2))
    cfg = _cfg(mode="baseline_entropy", epochs=1, batch_size=64)
    st = init_parameters(nets, 0, cfg)
    st, hist = train(_data(2048), cfg, state=st)
    k = len(hist) // 4
    first = sum(m.phi_f_loss for m in hist[:k]) / k
    last = sum(m.phi_f_loss for m in hist[-k:]) / k
    assert last < first and last < 0.3
