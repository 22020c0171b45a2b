"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s``; the verdict lines
are printed even without ``-s``.
"""
import csv
import math
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.optimize import minimize
from scipy.stats import kendalltau

import diffad.numcore as nc
from diffad.baselines import OcsvmModel, baseline_from_bytes, baseline_to_bytes, ocsvm_fit
from diffad.bench import cell_seed, fit_method, load_dataset
from diffad.cli import main
from diffad.config import load_config
from diffad.datasets import SplitSpec, dataset_from_bytes, dataset_to_bytes, gen_ring, split
from diffad.denoisers import DitConfig, DitDenoiser, MlpConfig, MlpDenoiser
from diffad.diffusion import (
    TrainConfig,
    default_schedule,
    detector_from_bytes,
    detector_to_bytes,
    fit_detector,
    linear_schedule,
    posterior_params,
    q_sample,
    vlb_term,
)
from diffad.evalmetrics import auc_roc
from fdcheck import numeric_grad, rel_error
from test_denoisers import _gradcheck_model
from test_numcore import OPS

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.fixture
def verdict(capsys):
    def report(number, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {number:2d}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return report


def bench_rows(tmp_path, config, tag):
    out = tmp_path / f"{tag}.csv"
    t0 = time.perf_counter()
    code = main(["bench", "--config", str(config), "--out-csv", str(out), "--out-md", str(tmp_path / f"{tag}.md")])
    elapsed = time.perf_counter() - t0
    with open(out) as fh:
        return code, list(csv.DictReader(fh)), elapsed, out


def auc_by_method(rows):
    res = {}
    for r in rows:
        res.setdefault(r["method"], []).append(float(r["auc"]) if r["auc"] != "error" else float("nan"))
    return res


# 1 ---------------------------------------------------------------------------------


def _op_error(fn, arrays):
    w = np.random.default_rng(123).normal(size=fn(*[a.copy() for a in arrays]).shape)
    leaves = [nc.Tensor(a.copy(), requires_grad=True) for a in arrays]
    with nc.Tape() as tape:
        loss = nc.sum(nc.mul(fn(*leaves), w)) if np.ndim(w) else nc.scale(fn(*leaves), float(w))
    grads = nc.backward(tape, loss)
    fd = numeric_grad(lambda *a: float((fn(*a).data * w).sum()), [a.copy() for a in arrays], h=1e-6)
    return max(rel_error(grads.wrt(leaf), g) for leaf, g in zip(leaves, fd))


def test_criterion_01_autodiff_integrity(verdict):
    t0 = time.perf_counter()
    ops = dict(OPS, sum=(nc.sum, [(3, 4)]))
    worst = {}
    for name, (fn, shapes) in ops.items():
        for seed in range(3):
            rng = np.random.default_rng(seed)
            err = _op_error(fn, [rng.normal(size=s) for s in shapes])
            worst[name] = max(worst.get(name, 0.0), err)
    mlp = MlpDenoiser(MlpConfig(dim=3, hidden=(8, 6), emb_dim=4, activation=("gelu", "relu")), seed=1)
    worst["mlp_backbone"], _ = _gradcheck_model(mlp, np.random.default_rng(0).normal(size=(4, 3)),
                                                np.array([1, 5, 9, 40]))
    dit = DitDenoiser(DitConfig(dim=4, patch=2, width=4, n_blocks=1, emb_dim=2, ff_mult=1), seed=2)
    worst["dit_backbone"], _ = _gradcheck_model(dit, np.random.default_rng(1).normal(size=(3, 4)),
                                                np.array([2, 17, 80]))
    elapsed = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    ok = worst[top] < 1e-5 and elapsed < 30
    verdict(1, ok, f"{len(worst)} checks, max rel err {worst[top]:.2e} ({top}), {elapsed:.1f}s")


# 2 ---------------------------------------------------------------------------------


def test_criterion_02_forward_process_law(verdict):
    sched = linear_schedule(100, 1e-4, 0.02 * 1000 / 100)
    x0 = np.array([1.5, -0.7, 0.0, 3.0])
    worst_mean = worst_var = 0.0
    for t in (1, 30, 90):
        eps = nc.RngStream(t).gaussian((100_000, 4))
        xt = q_sample(np.broadcast_to(x0, eps.shape), t, eps, sched)
        ab = math.prod(1 - b for b in sched.betas[:t])
        sd = math.sqrt(1 - ab)
        # mean error relative to the larger of |target| and the noise scale (the target can be 0)
        mean_err = np.max(np.abs(xt.mean(0) - math.sqrt(ab) * x0) / np.maximum(np.abs(math.sqrt(ab) * x0), sd))
        var_err = np.max(np.abs(xt.var(0) / (1 - ab) - 1))
        worst_mean, worst_var = max(worst_mean, mean_err), max(worst_var, var_err)
    ok = worst_mean < 0.02 and worst_var < 0.02
    verdict(2, ok, f"t in (1, 30, 90), 1e5 draws: max mean err {worst_mean:.4f}, max var err {worst_var:.4f}")


# 3 ---------------------------------------------------------------------------------


def test_criterion_03_schedule_invariants(verdict):
    problems = []
    for T in (1, 10, 100, 1000):
        for s in (linear_schedule(T, 1e-4, 0.02), default_schedule(T)):
            ab = s.alpha_bars
            if T > 1 and not np.all(np.diff(ab) < 0):
                problems.append(f"T={T} not decreasing")
            if np.max(np.abs(ab - s.alphas * s.alpha_bars_prev)) > 1e-14:
                problems.append(f"T={T} product rule")
            if np.any(s.posterior_variance > s.betas):
                problems.append(f"T={T} posterior variance")
    verdict(3, not problems, "T in {1, 10, 100, 1000}: " + (", ".join(problems) or "all invariants hold"))


# 4 ---------------------------------------------------------------------------------


def test_criterion_04_auc_oracle(verdict):
    rng = np.random.default_rng(4)
    worst = 0.0
    for i in range(100):
        n = int(rng.integers(2, 501))
        y = rng.integers(0, 2, n)
        y[:2] = [0, 1]
        s = rng.integers(0, 4, n).astype(float) if i % 2 == 0 else rng.normal(size=n)
        pos, neg = s[y == 1], s[y == 0]
        oracle = ((pos[:, None] > neg[None]).sum() + 0.5 * (pos[:, None] == neg[None]).sum()) / (pos.size * neg.size)
        worst = max(worst, abs(auc_roc(s, y) - oracle))
    verdict(4, worst < 1e-12, f"100 instances (half heavily tied), max |diff| {worst:.1e}")


# 5 ---------------------------------------------------------------------------------


def test_criterion_05_ring_central_claim(verdict, tmp_path):
    code, rows, elapsed, _ = bench_rows(tmp_path, CONFIGS / "ring.ini", "ring")
    auc = auc_by_method(rows)
    ddpm, copod = np.mean(auc["ddpm_mlp"]), np.mean(auc["copod"])
    ok = code == 0 and ddpm >= 0.85 and copod <= 0.70 and elapsed < 600
    verdict(5, ok, f"ring: ddpm_mlp mean AUC {ddpm:.4f} {np.round(auc['ddpm_mlp'], 4).tolist()}, "
                   f"copod mean AUC {copod:.4f} {np.round(auc['copod'], 4).tolist()}, {elapsed:.0f}s")


# 6 ---------------------------------------------------------------------------------


def test_criterion_06_blobs_parity(verdict, tmp_path):
    code, rows, elapsed, _ = bench_rows(tmp_path, CONFIGS / "blobs.ini", "blobs")
    auc = auc_by_method(rows)
    methods = ("ddpm_mlp", "ddpm_dit", "iforest", "ocsvm", "copod")
    ok = code == 0 and set(methods) <= set(auc) and all(min(auc[m]) >= 0.95 for m in methods)
    detail = ", ".join(f"{m} min {min(auc[m]):.4f}" for m in methods if m in auc)
    verdict(6, ok, f"blobs, 3 seeds: {detail}, {elapsed:.0f}s")


# 7 ---------------------------------------------------------------------------------


def test_criterion_07_training_progress(verdict):
    cfg = load_config(CONFIGS / "blobs.ini")
    spec = cfg.datasets[0]
    ratios = []
    for si, seed in enumerate(cfg.seeds):
        train, _ = split(load_dataset(spec, seed), SplitSpec(cfg.train_frac, cfg.contamination, seed))
        for method in ("ddpm_mlp", "ddpm_dit"):
            model = fit_method(method, train.X, cfg, cell_seed(cfg.master_seed, spec.name, method, si))
            ratios.append((method, seed, model.losses[-1] / model.losses[0]))
    worst = max(r for _, _, r in ratios)
    detail = ", ".join(f"{m}/s{s} {r:.3f}" for m, s, r in ratios)
    verdict(7, worst < 0.5, f"final/first loss ratio: {detail}")


# 8 ---------------------------------------------------------------------------------


def _exact_dual_scores(x, test, nu, gamma):
    n = len(x)
    k = np.exp(-gamma * ((x[:, None] - x[None]) ** 2).sum(-1))
    res = minimize(lambda a: 0.5 * a @ k @ a, np.full(n, 1 / n), jac=lambda a: k @ a, method="SLSQP",
                   bounds=[(0, 1 / (nu * n))] * n,
                   constraints=[{"type": "eq", "fun": lambda a: a.sum() - 1, "jac": lambda a: np.ones(n)}],
                   options={"ftol": 1e-14, "maxiter": 1000})
    kt = np.exp(-gamma * ((test[:, None] - x[None]) ** 2).sum(-1))
    return -(kt @ res.x)


def test_criterion_08_ocsvm_fidelity(verdict):
    taus = []
    for seed in range(4):
        rng = nc.RngStream(seed)
        x, test = rng.gaussian((20, 2)), rng.gaussian((60, 2)) * 1.5
        m = ocsvm_fit(x, nu=0.2, gamma=0.5, D=1024, seed=seed, epochs=2000)
        taus.append(kendalltau(m.score(test), _exact_dual_scores(x, test, 0.2, 0.5)).statistic)
    gaps = []
    for nu in (0.05, 0.1, 0.3, 0.5):
        x = nc.RngStream(7).gaussian((200, 3))
        m = OcsvmModel(nu=nu).fit(x)
        gaps.append(abs(np.mean(m.features(x) @ m.w < m.rho) - nu))
    ok = min(taus) >= 0.8 and max(gaps) <= 0.1
    verdict(8, ok, f"n=20 Kendall tau vs exact dual min {min(taus):.3f}; "
                   f"n=200 nu-property max gap {max(gaps):.3f}")


# 9 ---------------------------------------------------------------------------------

REPRO_CFG = """
[bench]
methods = ddpm_mlp, ddpm_dit, iforest, ocsvm, copod
seeds = 1, 2
[dataset.ring]
generator = ring
n = 400
[dataset.blobs]
generator = blobs
n = 400
d = 4
[train]
epochs = 5
[diffusion]
T = 20
[mlp]
hidden = 16
[dit]
width = 8
[ocsvm]
epochs = 50
"""


def test_criterion_09_reproducibility(verdict, tmp_path):
    cfg = tmp_path / "repro.ini"
    cfg.write_text(REPRO_CFG)

    def table(tag):
        code, rows, _, _ = bench_rows(tmp_path, cfg, tag)
        return code, [{k: v for k, v in r.items() if k != "seconds"} for r in rows]

    (c1, a), (c2, b) = table("first"), table("second")
    same_csv = c1 == c2 == 0 and a == b and len(a) == 20
    ds = gen_ring(300, 0.1, 1)
    data_rt = dataset_to_bytes(dataset_from_bytes(dataset_to_bytes(ds))) == dataset_to_bytes(ds)
    det, _ = fit_detector(ds.X, MlpDenoiser(MlpConfig(2, hidden=(8,)), seed=1), default_schedule(20),
                          TrainConfig(epochs=2))
    blob = detector_to_bytes(det)
    model_rt = detector_to_bytes(detector_from_bytes(blob)) == blob
    dit_det, _ = fit_detector(ds.X, DitDenoiser(DitConfig(2, width=8), seed=1), default_schedule(20),
                              TrainConfig(epochs=1))
    blob = detector_to_bytes(dit_det)
    model_rt &= detector_to_bytes(detector_from_bytes(blob)) == blob
    base_rt = True
    for method in ("iforest", "ocsvm", "copod"):
        blob = baseline_to_bytes(fit_method(method, ds.X, load_config(CONFIGS / "blobs.ini"), 3))
        base_rt &= baseline_to_bytes(baseline_from_bytes(blob)) == blob
    ok = same_csv and data_rt and model_rt and base_rt
    verdict(9, ok, f"bench CSV identical across runs: {same_csv}; byte-identical round trips: "
                   f"dataset {data_rt}, diffusion models {model_rt}, baselines {base_rt}")


# 10 --------------------------------------------------------------------------------


def test_criterion_10_vlb_diagnostic(verdict):
    sched = default_schedule(100)
    worst, worst_zero = 0.0, 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        m = MlpDenoiser(MlpConfig(3, hidden=(6,), emb_dim=4), seed=seed)
        t = int(rng.integers(2, 101))
        x0, eps = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        xt = q_sample(x0, t, eps, sched)
        mu_q, var = posterior_params(x0, xt, t, sched)
        b, ab = sched.betas[t - 1], sched.alpha_bars[t - 1]
        mu_p = (xt - b / np.sqrt(1 - ab) * m.forward(xt, np.full(5, t)).data) / np.sqrt(1 - b)
        ref = (0.5 * np.log(var / var) + (var + (mu_q - mu_p) ** 2) / (2 * var) - 0.5).sum(1)
        worst = max(worst, np.max(np.abs(vlb_term(x0, xt, t, m, sched) - ref)))

        class TrueNoise:
            config = m.config

            def forward(self, x, tt, eps=eps):
                return nc.Tensor(eps)

        worst_zero = max(worst_zero, np.max(np.abs(vlb_term(x0, xt, t, TrueNoise(), sched))))
    ok = worst < 1e-12 and worst_zero < 1e-12
    verdict(10, ok, f"20 instances: max |vlb - KL ref| {worst:.1e}; max vlb at matched means {worst_zero:.1e}")
