import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

import diffad.numcore as nc
from diffad.datasets import gen_ring
from diffad.denoisers import MlpConfig, MlpDenoiser
from diffad.diffusion import (
    DiffusionDetector,
    NoiseSchedule,
    Standardizer,
    TrainConfig,
    anomaly_score,
    ddpm_loss,
    default_schedule,
    detector_from_bytes,
    detector_to_bytes,
    fit_detector,
    kl_same_variance,
    linear_schedule,
    p_sample,
    posterior_params,
    q_sample,
    reconstruct,
    reconstruct_one_shot,
    sample,
    train_ddpm,
    vlb_term,
)
from diffad.errors import ConfigError, ContractError, FormatError, NumericError
from fdcheck import numeric_grad, rel_error


class FixedEps:
    """Stand-in denoiser returning a preset noise prediction."""

    def __init__(self, eps, dim):
        self.eps = np.asarray(eps, dtype=float)
        self.config = MlpConfig(dim=dim, hidden=(), emb_dim=0)

    def forward(self, x, t):
        return nc.Tensor(np.broadcast_to(self.eps, np.shape(x)).copy())


class OracleEps:
    """Knows the clean rows, so it recovers the injected noise exactly."""

    def __init__(self, x0, sched):
        self.x0 = np.asarray(x0, dtype=float)
        self.sched = sched
        self.config = MlpConfig(dim=self.x0.shape[1], hidden=(), emb_dim=0)

    def forward(self, x_t, t):
        ab = self.sched.alpha_bars[np.asarray(t) - 1][:, None]
        return nc.Tensor((np.asarray(x_t) - np.sqrt(ab) * self.x0) / np.sqrt(1 - ab))


def zero_model(dim):
    m = MlpDenoiser(MlpConfig(dim=dim, hidden=(4,), emb_dim=2))
    m.load_arrays([np.zeros_like(a) for a in m.arrays()])
    return m


# --- schedule -----------------------------------------------------------------


def test_schedule_cumulative_product():
    s = NoiseSchedule(np.array([0.1, 0.2, 0.3]))
    np.testing.assert_allclose(s.alphas, [0.9, 0.8, 0.7], atol=1e-15)
    np.testing.assert_allclose(s.alpha_bars, [0.9, 0.72, 0.504], atol=1e-15)


def test_schedule_single_step():
    s = linear_schedule(1, 0.05, 0.05)
    assert s.alpha_bars[0] == 1 - 0.05


def test_schedule_fully_noised_at_1000():
    s = linear_schedule(1000, 1e-4, 0.02)
    ref = math.prod(1 - (1e-4 + i * (0.02 - 1e-4) / 999) for i in range(1000))
    assert s.alpha_bars[-1] == pytest.approx(ref, rel=1e-10)
    assert ref < 1e-4


def test_linear_schedule_endpoints():
    s = linear_schedule(5, 0.01, 0.05)
    np.testing.assert_allclose(s.betas, [0.01, 0.02, 0.03, 0.04, 0.05], atol=1e-15)


@pytest.mark.parametrize("T,start,end", [(0, 0.1, 0.2), (5, 0.0, 0.1), (5, 0.3, 0.2), (5, 0.1, 1.0)])
def test_schedule_config_errors(T, start, end):
    with pytest.raises(ConfigError):
        linear_schedule(T, start, end)


def _check_schedule(s: NoiseSchedule):
    ab = s.alpha_bars
    assert np.all(np.diff(ab) < 0)
    assert np.all(np.abs(ab - s.alphas * s.alpha_bars_prev) <= 1e-14)
    assert np.all(s.posterior_variance >= 0)
    assert np.all(s.posterior_variance <= s.betas)
    assert np.all(np.diff(s.betas) >= 0)


@pytest.mark.parametrize("T", [1, 10, 100, 1000])
def test_schedule_invariants(T):
    _check_schedule(linear_schedule(T, 1e-4, 0.02))
    _check_schedule(default_schedule(T))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 300), st.floats(1e-5, 0.5), st.floats(0, 0.49))
def test_schedule_invariants_property(T, start, extra):
    _check_schedule(linear_schedule(T, start, min(start + extra, 0.99)))


# --- forward process ----------------------------------------------------------


def test_q_sample_zero_noise():
    s = default_schedule(100)
    x0 = np.array([[1.0, -2.0, 3.0]])
    np.testing.assert_allclose(q_sample(x0, 40, np.zeros_like(x0), s), np.sqrt(s.alpha_bars[39]) * x0)


def test_q_sample_hand_value():
    s = NoiseSchedule(np.array([0.19]))
    out = q_sample(np.array([1.0, 0.0]), 1, np.array([1.0, 1.0]), s)
    np.testing.assert_allclose(out, [0.9 + math.sqrt(0.19), math.sqrt(0.19)], atol=1e-15)
    np.testing.assert_allclose(out, [1.335890, 0.435890], atol=1e-6)


def test_q_sample_range_error():
    s = default_schedule(10)
    with pytest.raises(ContractError):
        q_sample(np.zeros(2), 0, np.zeros(2), s)
    with pytest.raises(ContractError):
        q_sample(np.zeros(2), 11, np.zeros(2), s)


@pytest.mark.parametrize("t", [5, 30, 90])
def test_q_sample_monte_carlo(t):
    s = default_schedule(100)
    x0 = np.array([1.5, -0.7])
    eps = nc.RngStream(t).gaussian((100_000, 2))
    xt = q_sample(np.broadcast_to(x0, eps.shape), t, eps, s)
    ab = s.alpha_bars[t - 1]
    np.testing.assert_allclose(xt.mean(0), np.sqrt(ab) * x0, rtol=0.02, atol=0.02 * np.sqrt(1 - ab))
    np.testing.assert_allclose(xt.var(0), 1 - ab, rtol=0.02)


# --- posterior ---------------------------------------------------------------


def test_posterior_variance_hand_value():
    s = NoiseSchedule(np.array([0.1, 0.2]))
    assert s.posterior_variance[1] == pytest.approx((1 - 0.9) / (1 - 0.72) * 0.2, abs=1e-15)
    assert s.posterior_variance[1] == pytest.approx(0.0714286, abs=1e-7)


def test_posterior_boundary_t1():
    s = NoiseSchedule(np.array([0.1, 0.2]))
    x0, xt = np.array([[2.0, -1.0]]), np.array([[0.3, 0.4]])
    mu, var = posterior_params(x0, xt, 1, s)
    np.testing.assert_allclose(mu, x0, atol=1e-15)
    assert var == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_posterior_matches_bayes_conditioning(seed):
    # Independent route: condition N(x_{t-1}; sqrt(ab_prev) x0, 1-ab_prev) on x_t ~ N(sqrt(a_t) x_{t-1}, beta_t).
    rng = np.random.default_rng(seed)
    s = default_schedule(50)
    t = int(rng.integers(2, 51))
    x0, eps = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    xt = q_sample(x0, t, eps, s)
    beta = s.betas[t - 1]
    a = 1 - beta
    ab_prev = math.prod(1 - b for b in s.betas[:t - 1])
    prec = 1 / (1 - ab_prev) + a / beta
    mean = (math.sqrt(ab_prev) * x0 / (1 - ab_prev) + math.sqrt(a) * xt / beta) / prec
    mu, var = posterior_params(x0, xt, t, s)
    np.testing.assert_allclose(mu, mean, atol=1e-12)
    assert var == pytest.approx(1 / prec, abs=1e-12)


# --- reverse process ------------------------------------------------------------


def test_p_sample_zero_model_mean():
    s = default_schedule(20)
    x = np.random.default_rng(0).normal(size=(4, 3))
    np.testing.assert_allclose(p_sample(zero_model(3), x, 1, s, nc.RngStream(0)), x / np.sqrt(s.alphas[0]))
    out = p_sample(zero_model(3), x, 7, s, nc.RngStream(1))
    z = nc.RngStream(1).gaussian(x.shape)
    np.testing.assert_allclose(out, x / np.sqrt(s.alphas[6]) + np.sqrt(s.posterior_variance[6]) * z, atol=1e-14)


def test_p_sample_t1_is_deterministic():
    s = default_schedule(20)
    m = MlpDenoiser(MlpConfig(dim=2, hidden=(5,), emb_dim=2), seed=1)
    x = np.random.default_rng(0).normal(size=(3, 2))
    a = p_sample(m, x, 1, s, nc.RngStream(1))
    b = p_sample(m, x, 1, s, nc.RngStream(999))
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("seed", range(3))
def test_p_sample_formula_oracle(seed):
    s = default_schedule(30)
    m = MlpDenoiser(MlpConfig(dim=3, hidden=(6,), emb_dim=4), seed=seed)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(5, 3))
    t = int(rng.integers(2, 31))
    eps_hat = m.forward(x, np.full(5, t)).data
    b = s.betas[t - 1]
    ab = math.prod(1 - v for v in s.betas[:t])
    mu = (x - b / math.sqrt(1 - ab) * eps_hat) / math.sqrt(1 - b)
    z = nc.RngStream(seed).gaussian(x.shape)
    expected = mu + math.sqrt(s.posterior_variance[t - 1]) * z
    np.testing.assert_allclose(p_sample(m, x, t, s, nc.RngStream(seed)), expected, atol=1e-12)


def test_sample_deterministic():
    s = default_schedule(10)
    m = MlpDenoiser(MlpConfig(dim=2, hidden=(5,), emb_dim=2), seed=1)
    a = sample(m, s, 50, 2, nc.RngStream(3))
    b = sample(m, s, 50, 2, nc.RngStream(3))
    assert a.tobytes() == b.tobytes()


def test_sample_zero_model_t1_variance():
    s = NoiseSchedule(np.array([0.2]))
    x = sample(zero_model(2), s, 100_000, 2, nc.RngStream(11))
    np.testing.assert_allclose(x.var(0), 1 / 0.8, rtol=0.05)


@pytest.mark.slow
@pytest.mark.parametrize("seed", [1, 2, 3])
def test_sample_recovers_trained_gaussian(seed):
    mu = np.array([2.0, -1.0])
    data = mu + 0.5 * nc.RngStream(100 + seed).gaussian((2000, 2))
    det, _ = fit_detector(data, MlpDenoiser(MlpConfig(2, hidden=(64, 64)), seed=seed), default_schedule(100),
                          TrainConfig(epochs=100, seed=seed))
    x = det.sample(2000, nc.RngStream(seed))
    assert np.all(np.abs(x.mean(0) - mu) < 0.15)
    assert np.all(np.abs(x.var(0) / 0.25 - 1) < 0.3)


# --- training -------------------------------------------------------------------


def test_train_deterministic():
    data = nc.RngStream(0).gaussian((64, 2))
    runs = []
    for _ in range(2):
        m = MlpDenoiser(MlpConfig(2, hidden=(8,), emb_dim=4), seed=5)
        runs.append(train_ddpm(m, data, default_schedule(20), TrainConfig(epochs=3, batch=16, seed=7)).losses)
    assert runs[0] == runs[1]


def test_train_one_step_hand_computed():
    m = MlpDenoiser(MlpConfig(dim=1, hidden=(), emb_dim=0), seed=2)
    assert m.n_parameters() == 2
    w, b = m.arrays()[0][0, 0], m.arrays()[1][0]
    s = default_schedule(10)
    data = np.array([[0.5], [-1.0], [2.0], [0.1]])
    seen = []
    res = train_ddpm(m, data, s, TrainConfig(epochs=1, batch=4, seed=3),
                     on_step=lambda *a: seen.append(a))
    (_, _, x0, t, eps, loss), = seen
    total = 0.0
    for i in range(4):
        ab = math.prod(1 - v for v in s.betas[:t[i]])
        xt = math.sqrt(ab) * x0[i, 0] + math.sqrt(1 - ab) * eps[i, 0]
        total += (w * xt + b - eps[i, 0]) ** 2
    assert loss == pytest.approx(total / 4, rel=1e-12)
    assert res.losses == [loss]


@pytest.mark.slow
@pytest.mark.parametrize("seed", [1, 2, 3])
def test_training_reduces_loss(seed):
    data = nc.RngStream(seed).gaussian((512, 2)) @ np.array([[1.0, 0.3], [0.0, 0.5]])
    m = MlpDenoiser(MlpConfig(2), seed=seed)
    losses = train_ddpm(m, Standardizer.fit(data).transform(data), default_schedule(100),
                        TrainConfig(epochs=200, seed=seed)).losses
    assert losses[-1] < 0.5 * losses[0]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_non_finite_aborts():
    m = MlpDenoiser(MlpConfig(1, hidden=(4,), emb_dim=2))
    with pytest.raises(NumericError, match="epoch 1"):
        train_ddpm(m, np.full((4, 1), 1e300), default_schedule(10), TrainConfig(epochs=1, batch=4))


def test_train_batch_contract():
    with pytest.raises(ConfigError):
        train_ddpm(zero_model(2), np.zeros((3, 2)), default_schedule(5), TrainConfig(batch=4))


def test_loss_gradient_matches_finite_differences():
    m = MlpDenoiser(MlpConfig(2, hidden=(6,), emb_dim=2, activation="gelu"), seed=4)
    assert m.n_parameters() <= 100
    s = default_schedule(50)
    rng = nc.RngStream(8)
    x0 = rng.gaussian((6, 2))
    t = rng.integers(1, 51, 6)
    eps = rng.gaussian((6, 2))
    arrays = [a.copy() for a in m.arrays()]

    def f(*arrs):
        m.load_arrays(arrs)
        return ddpm_loss(m, x0, t, eps, s).item()

    m.load_arrays(arrays)
    with nc.Tape() as tape:
        loss = ddpm_loss(m, x0, t, eps, s)
    g = nc.backward(tape, loss)
    analytic = np.concatenate([g.wrt(p).ravel() for p in m.parameters()])
    fd = np.concatenate([a.ravel() for a in numeric_grad(f, [a.copy() for a in arrays])])
    assert rel_error(analytic, fd) < 1e-5


# --- variational bound ------------------------------------------------------------


def generic_gaussian_kl(m1, v1, m2, v2):
    """KL(N(m1, v1) || N(m2, v2)) for diagonal Gaussians, summed over the last axis."""
    return (0.5 * np.log(v2 / v1) + (v1 + (m1 - m2) ** 2) / (2 * v2) - 0.5).sum(-1)


def test_kl_same_variance_hand_value():
    assert kl_same_variance(np.array([[1.0]]), np.array([[0.0]]), 1.0)[0] == 0.5


def test_vlb_zero_when_means_match():
    s = default_schedule(40)
    rng = np.random.default_rng(0)
    x0, eps = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    xt = q_sample(x0, 12, eps, s)
    assert np.all(np.abs(vlb_term(x0, xt, 12, FixedEps(eps, 3), s)) < 1e-20)


@pytest.mark.parametrize("seed", range(5))
def test_vlb_matches_generic_kl(seed):
    s = default_schedule(40)
    rng = np.random.default_rng(seed)
    m = MlpDenoiser(MlpConfig(3, hidden=(5,), emb_dim=4), seed=seed)
    t = int(rng.integers(2, 41))
    x0, eps = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    xt = q_sample(x0, t, eps, s)
    mu_q, var = posterior_params(x0, xt, t, s)
    b, ab = s.betas[t - 1], s.alpha_bars[t - 1]
    mu_p = (xt - b / np.sqrt(1 - ab) * m.forward(xt, np.full(4, t)).data) / np.sqrt(1 - b)
    ref = generic_gaussian_kl(mu_q, np.full_like(mu_q, var), mu_p, np.full_like(mu_p, var))
    np.testing.assert_allclose(vlb_term(x0, xt, t, m, s), ref, atol=1e-12, rtol=0)


def test_vlb_t1_decoder_term():
    s = default_schedule(40)
    rng = np.random.default_rng(3)
    m = MlpDenoiser(MlpConfig(2, hidden=(5,), emb_dim=2), seed=3)
    x0, eps = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    xt = q_sample(x0, 1, eps, s)
    mu = (xt - s.betas[0] / np.sqrt(1 - s.alpha_bars[0]) * m.forward(xt, np.ones(3, int)).data) / np.sqrt(s.alphas[0])
    ref = -norm.logpdf(x0, mu, np.sqrt(s.betas[0])).sum(1)
    np.testing.assert_allclose(vlb_term(x0, xt, 1, m, s), ref, rtol=1e-12)


# --- reconstruction & scoring -------------------------------------------------------


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 100), st.integers(0, 2**32 - 1))
def test_one_shot_inverts_q_sample(t, seed):
    s = default_schedule(100)
    rng = np.random.default_rng(seed)
    x, eps = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    xt = q_sample(x, t, eps, s)
    np.testing.assert_allclose(reconstruct_one_shot(None, xt, t, s, eps_hat=eps), x, atol=1e-10)


def test_detector_one_shot_with_perfect_noise_prediction():
    s = default_schedule(100)
    x = np.random.default_rng(1).normal(size=(10, 3))
    det = DiffusionDetector(OracleEps(x, s), s, t_star=30, k=2, mode="one-shot")
    np.testing.assert_allclose(reconstruct(det, x, nc.RngStream(0)), x, atol=1e-10)
    assert np.all(anomaly_score(det, x, nc.RngStream(0)) < 1e-18)


def test_detector_config_errors():
    s = default_schedule(10)
    m = zero_model(2)
    with pytest.raises(ConfigError):
        DiffusionDetector(m, s, t_star=0)
    with pytest.raises(ConfigError):
        DiffusionDetector(m, s, t_star=11)
    with pytest.raises(ConfigError):
        DiffusionDetector(m, s, t_star=2, k=0)
    with pytest.raises(ConfigError):
        DiffusionDetector(m, s, t_star=2, mode="ddim")


@pytest.fixture(scope="module")
def ring_detector():
    ds = gen_ring(1500, 0.1, 4)
    normals = ds.X[ds.labels == 0]
    det, _ = fit_detector(normals, MlpDenoiser(MlpConfig(2), seed=4), default_schedule(100),
                          TrainConfig(epochs=300, seed=4), t_star=10)
    return det, normals


@pytest.mark.slow
def test_scores_nonnegative_and_deterministic(ring_detector):
    det, normals = ring_detector
    a = anomaly_score(det, normals, nc.RngStream(1))
    b = anomaly_score(det, normals, nc.RngStream(1))
    assert np.all(a >= 0)
    assert a.tobytes() == b.tobytes()
    r1 = reconstruct(det, normals[:20], nc.RngStream(2))
    r2 = reconstruct(det, normals[:20], nc.RngStream(2))
    assert r1.tobytes() == r2.tobytes()


@pytest.mark.slow
def test_scores_independent_of_workers(ring_detector):
    det, normals = ring_detector
    a = anomaly_score(det, normals, nc.RngStream(1), workers=1)
    b = anomaly_score(det, normals, nc.RngStream(1), workers=3)
    assert a.tobytes() == b.tobytes()


@pytest.mark.slow
def test_ring_center_scores_above_median_normal(ring_detector):
    det, normals = ring_detector
    center = anomaly_score(det, np.zeros((1, 2)), nc.RngStream(3))[0]
    assert center > np.median(anomaly_score(det, normals, nc.RngStream(3)))


@pytest.mark.slow
def test_more_repeats_reduce_score_variance(ring_detector):
    det, normals = ring_detector
    x = normals[:50]
    spreads = {}
    for k in (1, 8):
        d = DiffusionDetector(det.denoiser, det.schedule, det.t_star, k, det.mode, det.standardizer)
        reps = np.array([anomaly_score(d, x, nc.RngStream(100 + r)) for r in range(30)])
        spreads[k] = reps.var(axis=0).mean()
    assert spreads[8] / spreads[1] < 0.5


@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_minimal_t_star_beats_noise_level(seed):
    # data on a line: the off-line noise component is predictable
    s = nc.RngStream(seed).gaussian(1000)
    data = np.column_stack([s, 0.5 * s])
    sched = default_schedule(100)
    det, _ = fit_detector(data, MlpDenoiser(MlpConfig(2, hidden=(64, 64)), seed=seed), sched,
                          TrainConfig(epochs=150, seed=seed), t_star=1, k=1)
    z = det.to_model_space(data)
    rng = nc.RngStream(99)
    err = np.mean([np.linalg.norm(z - det.reconstruct_z(z, rng), axis=1).mean() for _ in range(10)])
    noise_level = math.sqrt(1 - sched.alpha_bars[0]) * math.sqrt(math.pi / 2)  # E||eps|| in 2-D
    assert err < noise_level


def test_detector_round_trip_bit_exact():
    data = nc.RngStream(0).gaussian((40, 3))
    det, _ = fit_detector(data, MlpDenoiser(MlpConfig(3, hidden=(8,), emb_dim=4), seed=1), default_schedule(30),
                          TrainConfig(epochs=2, batch=20), t_star=5, k=3, mode="one-shot")
    blob = detector_to_bytes(det)
    back = detector_from_bytes(blob)
    assert detector_to_bytes(back) == blob
    assert back.t_star == 5 and back.k == 3 and back.mode == "one-shot"
    x = nc.RngStream(1).gaussian((7, 3))
    assert anomaly_score(back, x, nc.RngStream(2)).tobytes() == anomaly_score(det, x, nc.RngStream(2)).tobytes()
    with pytest.raises(FormatError):
        detector_from_bytes(blob[:-1])
