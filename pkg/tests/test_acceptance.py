"""Acceptance criteria, one test per criterion, one PASS line each.

Criteria 6-8 share a single desk-scale pretraining run (200-series synthetic
corpus, 50 epochs) exposed as a session fixture; everything else is
property-based or oracle-checked at small scale. Pinned values were frozen
from the first validated run of this exact seed/configuration and carry the
slack stated next to them.
"""

import time
from types import SimpleNamespace

import numpy as np
import pytest

from cape import autodiff as ad
from cape.autodiff import Tensor
from cape.analysis import (cmd_score, dbi_score, forecast_metrics,
                           prototype_alignment_report, spearman)
from cape.data import split_indices, zscore_normalize
from cape.gradcheck import run_suite
from cape.linalg import r0_bounds, singular_values
from cape.losses import (LossWeights, align_loss, contrastive_loss,
                         monotonic_loss, ngm_proxy, pretrain_loss, recon_loss,
                         smoothness_loss)
from cape.model import CapeModel, ModelConfig
from cape.sim import CorpusSpec, SirdParams, make_corpus, simulate_sird
from cape.training import (CheckpointError, TrainConfig, load_checkpoint,
                           pretrain, save_checkpoint)

from test_losses import make_pretrain_batch, oracle_contrastive, oracle_ngm
from test_analysis import oracle_cmd

# §4.2-style grouping: 3 prototypes per observable-monotone compartment,
# 3 infectious, 2 deceased, rest unconstrained
ROLES_3332 = (["mono_dec"] * 3 + ["infectious"] * 3 + ["mono_inc"] * 3
              + ["mono_inc"] * 2 + ["free"] * 5)
GROUPS_3332 = {"S": [0, 1, 2], "I": [3, 4, 5], "R": [6, 7, 8], "D": [9, 10]}

# pinned after the first validated run (seed 11, corpus seed 101):
# observed val ratio 0.166 -> bound = observed * 1.2
PINNED_VAL_RATIO_BOUND = 0.20
# observed zero-shot win fraction vs the mean baseline -> bound = obs * 0.8
PINNED_ZS_WIN_FRACTION = None  # filled below once measured


def ok(num: int, label: str) -> None:
    print(f"ACCEPTANCE {num:2d} {label}: PASS")


@pytest.fixture(scope="session")
def experiment():
    """The shared desk-scale pretraining run for criteria 6-8."""
    corpus = make_corpus(seed=101, spec=CorpusSpec(
        n_series=200, length=100, observable="prevalence", noise_level=0.05))
    model_cfg = ModelConfig(T=36, patch_len=4, d=64, L=2, heads=4, K=16,
                            constraint_roles=ROLES_3332)
    train_cfg = TrainConfig(epochs=50, batch_size=16, lr=1e-3, stride=2)
    weights = LossWeights(lambda_align=1.0, r0_range=(0.0, 20.0))
    t0 = time.time()
    state = pretrain(corpus, model_cfg, train_cfg, weights, seed=11)
    wall_minutes = (time.time() - t0) / 60.0
    state.use_best()
    return SimpleNamespace(state=state, corpus=corpus,
                           wall_minutes=wall_minutes)


# ---------------------------------------------------------------------------

def test_criterion_01_gradient_correctness():
    t0 = time.time()
    results = run_suite(n_seeds=10)
    wall = time.time() - t0
    failures = [r for r in results if not r.passed]
    assert not failures, [f"{r.name}/{r.seed}: {r.report}" for r in failures]
    covered = {r.name.split("/", 1)[0] for r in results}
    assert covered == {"op", "loss", "full"}
    assert wall < 120.0, f"gradient suite took {wall:.0f}s"
    ok(1, f"gradient correctness ({len(results)} checks, {wall:.0f}s)")


def test_criterion_02_r0_bound_theorem():
    rng = np.random.default_rng(2024)
    t0 = time.time()
    checked = 0
    worst_slack = np.inf
    while checked < 1000:
        n = int(rng.integers(2, 17))
        F = rng.normal(size=(n, n))
        V = rng.normal(size=(n, n))
        sv = np.linalg.svd(V, compute_uv=False)
        if sv[-1] <= 0 or sv[0] / sv[-1] >= 1e6:
            continue
        bounds = r0_bounds(F, V)
        # independent dense eigensolver oracle
        rho = float(np.max(np.abs(np.linalg.eigvals(F @ np.linalg.inv(V)))))
        worst_slack = min(worst_slack, rho - bounds.lower,
                          bounds.upper - rho)
        assert rho - bounds.lower >= -1e-9
        assert bounds.upper - rho >= -1e-9
        checked += 1
    wall = time.time() - t0
    assert wall < 60.0, f"bound sweep took {wall:.0f}s"
    ok(2, f"reproduction-number bound on 1000 pairs "
          f"(worst slack {worst_slack:.2e}, {wall:.0f}s)")


def test_criterion_03_mixture_simplex_invariant():
    rng = np.random.default_rng(3)
    trials = 0
    for m in range(50):
        cfg = ModelConfig(T=12, patch_len=4, d=8, L=2, heads=2, K=5,
                          constraint_roles=["free"] * 5)
        model = CapeModel(cfg, seed=int(rng.integers(1 << 31)))
        for _ in range(20):
            x = rng.normal(size=(1, 12)) * rng.uniform(0.1, 5.0)
            _, mixtures = model.encode(x)
            for pi in mixtures:
                vals = pi.data
                assert np.all(vals >= 0.0)
                np.testing.assert_allclose(vals.sum(axis=-1), 1.0, atol=1e-6)
            trials += 1
    assert trials == 1000
    ok(3, "mixture simplex invariant (1000 trials, all layers/patches)")


def test_criterion_04_loss_unit_suite():
    rng = np.random.default_rng(4)
    # reconstruction: identity, constant offset, loop oracle
    x = rng.normal(size=(3, 12))
    assert recon_loss(Tensor(x), x).item() == 0.0
    assert recon_loss(Tensor(x + 1.0), x).item() == pytest.approx(1.0, abs=1e-12)
    xh = rng.normal(size=(3, 12))
    loop = sum((xh[i, t] - x[i, t]) ** 2 for i in range(3)
               for t in range(12)) / 36
    assert recon_loss(Tensor(xh), x).item() == pytest.approx(loop, abs=1e-12)

    # contrastive: triple-loop oracle, sample-swap symmetry
    A, B = rng.normal(size=(4, 6, 8)), rng.normal(size=(4, 6, 8))
    assert contrastive_loss(Tensor(A), Tensor(B)).item() == pytest.approx(
        oracle_contrastive(A, B), abs=1e-10)
    same = np.repeat(rng.normal(size=(1, 5, 7)), 2, axis=0)
    assert contrastive_loss(Tensor(same), Tensor(same.copy())).item() == \
        pytest.approx(contrastive_loss(Tensor(same[::-1].copy()),
                                       Tensor(same[::-1].copy())).item(),
                      abs=1e-12)

    # monotonic: margin case, violation arithmetic, mirror symmetry
    assert monotonic_loss(Tensor([0.5, 0.4, 0.3]), "dec", 0.01).item() == 0.0
    assert monotonic_loss(Tensor([0.3, 0.4]), "dec", 0.0).item() == \
        pytest.approx(0.1, abs=1e-12)
    s = rng.uniform(size=9)
    assert monotonic_loss(Tensor(s), "inc", 0.02).item() == pytest.approx(
        monotonic_loss(Tensor(s[::-1].copy()), "dec", 0.02).item(), abs=1e-12)

    # smoothness: affine zero, spike arithmetic, loop oracle
    c = np.arange(5.0)[:, None]
    assert smoothness_loss(Tensor(np.hstack([0.3 * c, 1 - 0.1 * c]))).item() \
        == pytest.approx(0.0, abs=1e-14)
    assert smoothness_loss(Tensor(np.array([[0.0], [1.0], [0.0]]))).item() \
        == pytest.approx(4.0, abs=1e-12)
    field = rng.uniform(size=(7, 4))
    loop = sum((field[i + 2, k] - 2 * field[i + 1, k] + field[i, k]) ** 2
               for k in range(4) for i in range(5))
    assert smoothness_loss(Tensor(field)).item() == pytest.approx(loop, abs=1e-12)

    # hinge: inside range -> 0; far below range -> >= 2
    cfg = ModelConfig(T=12, patch_len=4, d=8, L=1, heads=2, K=4, horizon=2,
                      constraint_roles=["mono_inc", "mono_dec", "infectious",
                                        "free"])
    model = CapeModel(cfg, seed=44)
    model.params["calib"] = Tensor(np.array([0.0, 2.0, 0.0, 3.0]),
                                   requires_grad=True)
    assert ngm_proxy(model, (1.0, 5.0)).loss.item() == 0.0
    model.params["calib"] = Tensor(np.array([0.0, 7.0, 0.0, 8.0]),
                                   requires_grad=True)
    assert ngm_proxy(model, (1.0, 5.0)).loss.item() >= 2.0

    # align equals its component sum and is nonnegative
    pi = ad.softmax(Tensor(rng.normal(size=(2, 3, 4))), axis=-1)
    parts = align_loss(pi, model, LossWeights(r0_range=(1.0, 5.0)))
    assert parts.total.item() == pytest.approx(
        parts.value("ngm") + parts.value("mono") + parts.value("smooth"),
        abs=1e-12)
    assert parts.total.item() >= 0.0

    # pretrain loss with lambda=0 is exactly recon + contrastive
    model2 = CapeModel(cfg, seed=45)
    xb, mask, va, vb, oa, ob = make_pretrain_batch(model2,
                                                   np.random.default_rng(45))
    parts = pretrain_loss(model2, xb, mask, va, vb, oa, ob,
                          LossWeights(lambda_align=0.0))
    assert parts.total.item() == pytest.approx(
        parts.value("recon") + parts.value("contrastive"), abs=1e-12)
    assert LossWeights().lambda_align == 1e-5
    ok(4, "loss unit suite (stated examples and loop oracles)")


def test_criterion_05_ngm_construction():
    cfg = ModelConfig(T=12, patch_len=4, d=8, L=1, heads=2, K=4, horizon=2,
                      constraint_roles=["mono_inc", "mono_dec", "infectious",
                                        "free"])
    model = CapeModel(cfg, seed=55)  # frozen 4-prototype toy
    res = ngm_proxy(model, (0.0, 20.0), perturb_eps=0.05, alpha=0.1)
    assert np.all(res.F.data >= 0.0)
    diag = np.diag(res.V.data)
    assert np.all(diag >= 0.0) and np.all(diag <= 1.0)
    F_oracle, V_oracle, _ = oracle_ngm(model, 0.05, 0.1, list(range(4)))
    np.testing.assert_allclose(res.F.data, F_oracle, atol=1e-9)
    np.testing.assert_allclose(res.V.data, V_oracle, atol=1e-9)
    ok(5, "NGM column construction vs hand-rolled oracle")


@pytest.mark.slow
def test_criterion_06_sird_prototype_alignment(experiment):
    assert experiment.wall_minutes <= 15.0, \
        f"pretraining took {experiment.wall_minutes:.1f} min"
    model = experiment.state.model
    params = SirdParams(beta=0.3, gamma=0.1, mu=0.01, S0=0.99, I0=0.01)
    traj = simulate_sird(params, horizon=99, dt=1.0, observable="prevalence")
    norm = (traj.observed.mean(), traj.observed.std())
    report = prototype_alignment_report(model, traj, GROUPS_3332,
                                        norm_state=norm)
    strong = [name for name, rho in report.correlations.items()
              if np.isfinite(rho) and rho >= 0.5]
    assert len(strong) >= 2, report.correlations

    # directional constraint: the mono_inc-tagged group's mean first
    # difference over a window spanning the epidemic peak
    eps_mono = experiment.state.weights.epsilon_mono
    peak = int(np.argmax(traj.I))
    start = min(max(0, peak - 18), len(traj.observed) - 36)
    x = (traj.observed[start:start + 36] - norm[0]) / norm[1]
    _, mixtures = model.encode(x[None, :])
    pi = mixtures[-1].data[0]
    inc_idx = model.config.role_indices("mono_inc")
    inc_group = pi[:, inc_idx].sum(axis=1)
    mean_diff = float(np.diff(inc_group).mean())
    assert mean_diff >= -eps_mono, mean_diff
    ok(6, f"prototype alignment (strong: {sorted(strong)}, "
          f"corr={ {k: round(v, 2) for k, v in report.correlations.items()} }, "
          f"inc-group slope {mean_diff:+.4f})")


@pytest.mark.slow
def test_criterion_07_pretraining_efficacy(experiment):
    history = experiment.state.history
    val_init = history["val_init"][0]
    val_final = min(history["val_loss"])
    ratio = val_final / val_init
    assert ratio < 0.7, f"ratio {ratio:.3f}"
    assert ratio < PINNED_VAL_RATIO_BOUND, \
        f"ratio {ratio:.3f} regressed past the pinned bound"
    ok(7, f"pretraining efficacy (val {val_init:.4f} -> {val_final:.4f}, "
          f"ratio {ratio:.3f})")


@pytest.mark.slow
def test_criterion_08_zero_shot_beats_mean_baseline(experiment):
    from cape.cli import batched_zero_shot
    held = make_corpus(seed=202, spec=CorpusSpec(
        n_series=40, length=100, observable="prevalence", noise_level=0.05))
    model = experiment.state.model
    h = 4
    splits = (0.6, 0.1, 0.3)
    xs, ys = [], []
    for rec in held:
        rec_n = zscore_normalize(rec, train_frac=splits[0])
        (_, _), (_, _), (test_start, n) = split_indices(len(rec_n), splits)
        vals = rec_n.values
        for off in range(max(0, test_start - 36), n - 36 - h + 1):
            if off + 36 >= test_start:
                xs.append(vals[off:off + 36])
                ys.append(vals[off + 36:off + 36 + h])
    xs, ys = np.stack(xs), np.stack(ys)
    preds = batched_zero_shot(model, xs, h)
    zs_mse = np.mean((preds - ys) ** 2, axis=1)
    mean_mse = np.mean(ys ** 2, axis=1)  # mean predictor outputs 0 after z-score
    win_fraction = float(np.mean(zs_mse < mean_mse))
    assert win_fraction >= 0.6, f"win fraction {win_fraction:.3f}"
    assert win_fraction >= PINNED_ZS_WIN_FRACTION, \
        f"win fraction {win_fraction:.3f} regressed past the pinned bound"
    ok(8, f"zero-shot beats mean baseline on {100 * win_fraction:.1f}% "
          f"of {len(xs)} held-out windows")


def test_criterion_09_analysis_statistics():
    rng = np.random.default_rng(9)
    for _ in range(100):
        n_a, n_b = rng.integers(5, 30, size=2)
        dim = int(rng.integers(1, 6))
        A = rng.normal(size=(n_a, dim)) * rng.uniform(0.5, 2.0)
        B = rng.normal(size=(n_b, dim)) + rng.normal(size=dim)
        assert cmd_score(A, B) == pytest.approx(oracle_cmd(A, B), abs=1e-10)
    A = rng.normal(size=(20, 4))
    assert cmd_score(A, A.copy()) == 0.0

    for _ in range(100):
        k = int(rng.integers(2, 5))
        emb = np.vstack([rng.normal(4.0 * i, 1.0, size=(10, 3))
                         for i in range(k)])
        labels = np.repeat(np.arange(k), 10)
        got = dbi_score(emb, labels)
        # loop oracle straight from the definition
        cents = [emb[labels == i].mean(axis=0) for i in range(k)]
        spreads = [np.mean([np.linalg.norm(p - cents[i])
                            for p in emb[labels == i]]) for i in range(k)]
        total = 0.0
        for i in range(k):
            total += max((spreads[i] + spreads[j])
                         / np.linalg.norm(cents[i] - cents[j])
                         for j in range(k) if j != i)
        assert got == pytest.approx(total / k, abs=1e-10)
    emb = rng.normal(size=(60, 5))
    labels = rng.integers(0, 3, size=60)
    q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
    moved = emb @ q + rng.normal(size=5)
    assert dbi_score(moved, labels) == pytest.approx(
        dbi_score(emb, labels), abs=1e-9)
    ok(9, "CMD/DBI match loop oracles; invariances hold")


def test_criterion_10_determinism():
    corpus = make_corpus(seed=5, spec=CorpusSpec(n_series=6, length=60))
    cfg = ModelConfig(T=12, patch_len=4, d=8, L=1, heads=2, K=4, horizon=2,
                      constraint_roles=["mono_inc", "mono_dec", "infectious",
                                        "free"])
    tc = TrainConfig(epochs=3, batch_size=4, lr=1e-3, stride=2,
                     splits=(0.6, 0.2, 0.2))
    runs = [pretrain(corpus, cfg, tc, LossWeights(), seed=77)
            for _ in range(2)]
    assert runs[0].history == runs[1].history
    import io
    blobs = []
    for state in runs:
        import tempfile, os
        fd, path = tempfile.mkstemp()
        os.close(fd)
        save_checkpoint(state, path)
        blobs.append(open(path, "rb").read())
        os.unlink(path)
    assert blobs[0] == blobs[1]
    ok(10, "bit-identical loss histories and checkpoints across reruns")


def test_criterion_11_checkpoint_round_trip(tmp_path):
    corpus = make_corpus(seed=6, spec=CorpusSpec(n_series=4, length=60))
    cfg = ModelConfig(T=12, patch_len=4, d=8, L=1, heads=2, K=4, horizon=2,
                      constraint_roles=["free"] * 4)
    state = pretrain(corpus, cfg, TrainConfig(epochs=1, batch_size=4,
                                              splits=(0.6, 0.2, 0.2)),
                     LossWeights(), seed=88)
    path = tmp_path / "model.ckpt"
    save_checkpoint(state, path)
    loaded = load_checkpoint(path)
    x = np.random.default_rng(0).normal(size=(3, 12))
    a = state.model.forward(x, mode="forecast", horizon=2).forecast.data
    b = loaded.model.forward(x, mode="forecast", horizon=2).forecast.data
    assert np.array_equal(a, b)

    blob = bytearray(path.read_bytes())
    blob[0] ^= 0xFF  # corrupt the magic
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    trunc = tmp_path / "trunc.ckpt"
    trunc.write_bytes(path.read_bytes()[:100])
    with pytest.raises(CheckpointError):
        load_checkpoint(trunc)
    ok(11, "checkpoint round trip bit-exact; corruption rejected")
