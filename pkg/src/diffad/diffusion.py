"""DDPM machinery: schedules, forward noising, ancestral sampling, training,
variational-bound diagnostics and reconstruction-based anomaly scoring.

Timesteps are 1-based throughout (``t = 1..T``); schedule arrays are stored
0-based, so ``betas[t - 1]`` is beta_t. ``alpha_bar_0 := 1``.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

import diffad.numcore as nc
from diffad.binio import Reader, Writer
from diffad.denoisers import AdamState, Denoiser, adam_step, read_model, write_model
from diffad.errors import ConfigError, ContractError, FormatError, NumericError, ShapeError
from diffad.numcore import RngStream

log = logging.getLogger(__name__)

SCORE_GROUP_ROWS = 256
MODES = ("one-shot", "multi-step")


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or b.size < 1:
            raise ConfigError("schedule needs at least one beta")
        if not np.all((b > 0) & (b < 1)):
            raise ConfigError("every beta must lie in (0, 1)")
        object.__setattr__(self, "betas", b)

    @property
    def T(self) -> int:
        return self.betas.size

    @cached_property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @cached_property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    @cached_property
    def alpha_bars_prev(self) -> np.ndarray:
        return np.concatenate([[1.0], self.alpha_bars[:-1]])

    @cached_property
    def posterior_variance(self) -> np.ndarray:
        return (1.0 - self.alpha_bars_prev) / (1.0 - self.alpha_bars) * self.betas

    def check_t(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ContractError(f"timestep out of range 1..{self.T}: {t}")
        return t.astype(np.int64)


def linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule(np.linspace(beta_start, beta_end, T))


def default_schedule(T: int = 100) -> NoiseSchedule:
    """Linear schedule whose end beta is 0.02 rescaled to T steps (0.2 at T=100)."""
    return linear_schedule(T, 1e-4, min(0.02 * 1000.0 / T, 0.999))


def _coef(arr: np.ndarray, t: np.ndarray, ndim: int) -> np.ndarray:
    """Gather per-row schedule values, shaped to broadcast over features."""
    v = arr[t - 1]
    return v.reshape(v.shape + (1,) * (ndim - v.ndim))


def q_sample(x0, t, eps, sched: NoiseSchedule) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 {x0.shape} and eps {eps.shape} differ")
    t = sched.check_t(t)
    ab = _coef(sched.alpha_bars, t, x0.ndim)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def posterior_params(x0, x_t, t, sched: NoiseSchedule) -> tuple[np.ndarray, np.ndarray]:
    """Mean and variance of q(x_{t-1} | x_t, x_0)."""
    x0 = np.asarray(x0, dtype=np.float64)
    x_t = np.asarray(x_t, dtype=np.float64)
    t = sched.check_t(t)
    nd = x0.ndim
    ab, ab_prev = _coef(sched.alpha_bars, t, nd), _coef(sched.alpha_bars_prev, t, nd)
    beta, alpha = _coef(sched.betas, t, nd), _coef(sched.alphas, t, nd)
    c0 = np.sqrt(ab_prev) * beta / (1.0 - ab)
    ct = np.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab)
    return c0 * x0 + ct * x_t, sched.posterior_variance[t - 1]


def predict_eps(model: Denoiser, x_t, t) -> np.ndarray:
    t = np.asarray(t)
    if t.ndim == 0:
        t = np.full(np.shape(x_t)[0], int(t))
    return model.forward(x_t, t).data


def mean_from_eps(x_t, t, eps_hat, sched: NoiseSchedule) -> np.ndarray:
    x_t = np.asarray(x_t, dtype=np.float64)
    t = sched.check_t(t)
    nd = x_t.ndim
    beta, alpha = _coef(sched.betas, t, nd), _coef(sched.alphas, t, nd)
    ab = _coef(sched.alpha_bars, t, nd)
    return (x_t - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(alpha)


def p_mean(model: Denoiser, x_t, t, sched: NoiseSchedule) -> np.ndarray:
    return mean_from_eps(x_t, t, predict_eps(model, x_t, t), sched)


def p_sample(model: Denoiser, x_t, t: int, sched: NoiseSchedule, rng: RngStream) -> np.ndarray:
    """One ancestral step x_t -> x_{t-1} with fixed variance beta~_t; no noise at t = 1."""
    t = int(sched.check_t(t))
    mu = p_mean(model, x_t, t, sched)
    if t == 1:
        return mu
    z = rng.gaussian(mu.shape)
    return mu + np.sqrt(sched.posterior_variance[t - 1]) * z


def sample(model: Denoiser, sched: NoiseSchedule, n: int, d: int, rng: RngStream) -> np.ndarray:
    x = rng.gaussian((n, d))
    for t in range(sched.T, 0, -1):
        x = p_sample(model, x, t, sched, rng)
    return x


# --- training -------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch: int = 128
    lr: float = 1e-3
    seed: int = 0


@dataclass
class TrainResult:
    model: Denoiser
    losses: list[float]
    optimizer: AdamState = field(repr=False, default_factory=AdamState)


def ddpm_loss(model: Denoiser, x0, t, eps, sched: NoiseSchedule) -> nc.Tensor:
    """Mean over the batch of the squared L2 norm of (eps_hat - eps). Taped if a tape is active."""
    x_t = q_sample(x0, t, eps, sched)
    diff = nc.sub(model.forward(x_t, t), eps)
    return nc.scale(nc.sum(nc.square(diff)), 1.0 / x_t.shape[0])


def train_ddpm(model: Denoiser, data, sched: NoiseSchedule, config: TrainConfig = TrainConfig(),
               on_step=None) -> TrainResult:
    """Minimize the simple noise-prediction loss with Adam.

    Per step the draws are, in order: nothing for the batch itself (the
    epoch permutation is drawn once per epoch), then ``t ~ U{1..T}`` per row,
    then ``eps ~ N(0, I)``. ``on_step(epoch, step, x0, t, eps, loss)`` is
    called before each parameter update.
    """
    data = np.asarray(data, dtype=np.float64)
    n, d = data.shape
    if not (1 <= config.batch <= n):
        raise ConfigError(f"need 1 <= batch <= n, got batch={config.batch}, n={n}")
    rng = RngStream(config.seed)
    opt = AdamState(lr=config.lr)
    losses = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        step_losses = []
        for step, start in enumerate(range(0, n, config.batch)):
            x0 = data[order[start:start + config.batch]]
            t = rng.integers(1, sched.T + 1, x0.shape[0])
            eps = rng.gaussian(x0.shape)
            params = model.parameters()
            with nc.Tape() as tape:
                loss = ddpm_loss(model, x0, t, eps, sched)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss {value} at epoch {epoch + 1}, step {step + 1}")
            if on_step is not None:
                on_step(epoch, step, x0, t, eps, value)
            grads = nc.backward(tape, loss)
            new, opt = adam_step([p.data for p in params], [grads.wrt(p) for p in params], opt)
            model.load_arrays(new)
            step_losses.append(value)
        losses.append(float(np.mean(step_losses)))
        log.debug("epoch %d loss %.6f", epoch + 1, losses[-1])
    return TrainResult(model, losses, opt)


# --- variational bound diagnostics -----------------------------------------


def kl_same_variance(mu_q, mu_p, var) -> np.ndarray:
    """Per-row KL between isotropic Gaussians sharing variance ``var``."""
    diff = np.atleast_2d(np.asarray(mu_q, dtype=np.float64) - np.asarray(mu_p, dtype=np.float64))
    return (diff ** 2).sum(1) / (2 * var)


def vlb_term(x0, x_t, t: int, model: Denoiser, sched: NoiseSchedule) -> np.ndarray:
    """Per-row KL(q(x_{t-1}|x_t,x_0) || p_theta(x_{t-1}|x_t)) in nats, both with variance beta~_t.

    At t = 1 the posterior variance is zero, so the decoder negative
    log-likelihood -log N(x_0; mu_theta, beta_1 I) is returned instead.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    t = int(sched.check_t(t))
    mu_theta = p_mean(model, x_t, t, sched)
    if t == 1:
        var = sched.betas[0]
        d = x0.shape[1]
        return 0.5 * d * np.log(2 * np.pi * var) + ((x0 - mu_theta) ** 2).sum(1) / (2 * var)
    mu_q, var = posterior_params(x0, x_t, t, sched)
    return kl_same_variance(mu_q, mu_theta, var)


# --- detector ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, data) -> Standardizer:
        data = np.asarray(data, dtype=np.float64)
        std = data.std(axis=0)
        return cls(data.mean(axis=0), np.where(std > 0, std, 1.0))

    def transform(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def inverse(self, z) -> np.ndarray:
        return np.asarray(z) * self.std + self.mean


def reconstruct_one_shot(model: Denoiser, x_t, t: int, sched: NoiseSchedule, eps_hat=None) -> np.ndarray:
    """Invert the closed-form noising using predicted noise."""
    if eps_hat is None:
        eps_hat = predict_eps(model, x_t, t)
    ab = sched.alpha_bars[int(sched.check_t(t)) - 1]
    return (np.asarray(x_t) - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


@dataclass(eq=False)
class DiffusionDetector:
    denoiser: Denoiser
    schedule: NoiseSchedule
    t_star: int
    k: int = 4
    mode: str = "multi-step"
    standardizer: Standardizer | None = None

    def __post_init__(self):
        if not (1 <= self.t_star <= self.schedule.T):
            raise ConfigError(f"t_star must be in 1..{self.schedule.T}, got {self.t_star}")
        if self.k < 1:
            raise ConfigError("K must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")

    @property
    def dim(self) -> int:
        return self.denoiser.config.dim

    def to_model_space(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ShapeError(f"detector expects (n, {self.dim}) input, got {x.shape}")
        return self.standardizer.transform(x) if self.standardizer else x

    def from_model_space(self, z) -> np.ndarray:
        return self.standardizer.inverse(z) if self.standardizer else np.asarray(z)

    def reconstruct_z(self, z, rng: RngStream) -> np.ndarray:
        """Noise standardized rows to t* and denoise them back."""
        eps = rng.gaussian(z.shape)
        x_t = q_sample(z, np.full(z.shape[0], self.t_star), eps, self.schedule)
        if self.mode == "one-shot":
            return reconstruct_one_shot(self.denoiser, x_t, self.t_star, self.schedule)
        for t in range(self.t_star, 0, -1):
            x_t = p_sample(self.denoiser, x_t, t, self.schedule, rng)
        return x_t

    def sample(self, n: int, rng: RngStream) -> np.ndarray:
        return self.from_model_space(sample(self.denoiser, self.schedule, n, self.dim, rng))


def reconstruct(detector: DiffusionDetector, x, rng: RngStream) -> np.ndarray:
    """Partial-noise then denoise ``x``; returns the reconstruction in input scale."""
    return detector.from_model_space(detector.reconstruct_z(detector.to_model_space(x), rng))


def anomaly_score(detector: DiffusionDetector, x, rng: RngStream, workers: int = 1) -> np.ndarray:
    """Mean squared reconstruction distance over K independent noisings.

    Distances are measured in standardized coordinates. Rows are processed in
    groups of ``SCORE_GROUP_ROWS``; group ``j`` draws from ``rng.substream(j)``,
    so results do not depend on ``workers``.
    """
    z = detector.to_model_space(x)
    starts = list(range(0, z.shape[0], SCORE_GROUP_ROWS))

    def group(j: int) -> np.ndarray:
        zg = z[starts[j]:starts[j] + SCORE_GROUP_ROWS]
        sub = rng.substream(j)
        acc = np.zeros(zg.shape[0])
        for _ in range(detector.k):
            acc += ((zg - detector.reconstruct_z(zg, sub)) ** 2).sum(1)
        return acc / detector.k

    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(group, range(len(starts))))
    else:
        parts = [group(j) for j in range(len(starts))]
    return np.concatenate(parts) if parts else np.zeros(0)


def default_t_star(T: int) -> int:
    """T // 10: with the rescaled linear schedule this leaves roughly 35% noise std."""
    return max(1, T // 10)


def fit_detector(data, denoiser: Denoiser, sched: NoiseSchedule, train: TrainConfig = TrainConfig(),
                 t_star: int | None = None, k: int = 4, mode: str = "multi-step",
                 standardize: bool = True) -> tuple[DiffusionDetector, list[float]]:
    data = np.asarray(data, dtype=np.float64)
    std = Standardizer.fit(data) if standardize else None
    z = std.transform(data) if std else data
    result = train_ddpm(denoiser, z, sched, train)
    t_star = default_t_star(sched.T) if t_star is None else t_star
    return DiffusionDetector(result.model, sched, t_star, k, mode, std), result.losses


# --- serialization -----------------------------------------------------------


def detector_to_bytes(det: DiffusionDetector) -> bytes:
    """ADM1 model block, then schedule (u32 T, f64[T] betas), scoring config
    (u32 t*, u32 K, u8 mode), u8 has_standardizer and the mean/std tensors."""
    w = Writer()
    write_model(w, det.denoiser)
    w.u32(det.schedule.T)
    w.f64_array(det.schedule.betas)
    w.u32(det.t_star)
    w.u32(det.k)
    w.u8(MODES.index(det.mode))
    w.u8(det.standardizer is not None)
    if det.standardizer is not None:
        w.tensor(det.standardizer.mean)
        w.tensor(det.standardizer.std)
    return w.getvalue()


def detector_from_bytes(data: bytes) -> DiffusionDetector:
    r = Reader(data, "detector")
    model = read_model(r)
    T = r.u32()
    betas = r.f64_array(T)
    t_star, k, mode = r.u32(), r.u32(), r.u8()
    if mode >= len(MODES):
        raise FormatError(f"unknown scoring mode id {mode}")
    std = None
    if r.u8():
        std = Standardizer(r.tensor(), r.tensor())
    r.expect_end()
    try:
        return DiffusionDetector(model, NoiseSchedule(betas), t_star, k, MODES[mode], std)
    except ConfigError as exc:
        raise FormatError(f"invalid detector block: {exc}") from exc
