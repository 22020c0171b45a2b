"""Classical detectors: Isolation Forest, COPOD and a random-Fourier-feature
one-class SVM. All expose ``fit(data)`` / ``score(x)`` with higher scores
meaning more anomalous.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from diffad.binio import Reader, Writer
from diffad.errors import ConfigError, FitError, FormatError, ShapeError
from diffad.numcore import RngStream

BASELINE_MAGIC = b"ADB1"
EULER_GAMMA = 0.5772156649


def _as_matrix(x, d: int | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected a 2-D array, got shape {x.shape}")
    if d is not None and x.shape[1] != d:
        raise ShapeError(f"model was fitted on {d} features, input has {x.shape[1]}")
    return x


# --- Isolation Forest --------------------------------------------------------


def average_path_length(n) -> np.ndarray:
    """c(n) = 2 H(n-1) - 2 (n-1)/n with H(i) = ln i + gamma; c(n) = 0 for n <= 1."""
    n = np.asarray(n, dtype=np.float64)
    out = np.zeros_like(n)
    big = n >= 2
    m = n[big]
    out[big] = 2.0 * (np.log(m - 1.0) + EULER_GAMMA) - 2.0 * (m - 1.0) / m
    return out


@dataclass(eq=False)
class IsolationTree:
    """Flat arrays; ``feature[i] == -1`` marks a leaf holding ``size[i]`` points."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    size: np.ndarray

    def depth(self) -> int:
        def rec(i):
            return 0 if self.feature[i] < 0 else 1 + max(rec(self.left[i]), rec(self.right[i]))
        return rec(0)

    def path_length(self, x: np.ndarray) -> np.ndarray:
        node = np.zeros(len(x), dtype=np.int64)
        depth = np.zeros(len(x))
        active = self.feature[node] >= 0
        while np.any(active):
            idx = np.flatnonzero(active)
            nd = node[idx]
            go_left = x[idx, self.feature[nd]] < self.threshold[nd]
            node[idx] = np.where(go_left, self.left[nd], self.right[nd])
            depth[idx] += 1
            active = self.feature[node] >= 0
        return depth + average_path_length(self.size[node])


def _build_tree(x: np.ndarray, limit: int, rng: RngStream) -> IsolationTree:
    feature, threshold, left, right, size = [], [], [], [], []

    def new_node():
        for lst, v in ((feature, -1), (threshold, 0.0), (left, -1), (right, -1), (size, 0)):
            lst.append(v)
        return len(feature) - 1

    stack = [(new_node(), np.arange(len(x)), 0)]
    while stack:
        nid, idx, depth = stack.pop()
        size[nid] = len(idx)
        if depth >= limit or len(idx) <= 1:
            continue
        sub = x[idx]
        lo, hi = sub.min(axis=0), sub.max(axis=0)
        candidates = np.flatnonzero(lo < hi)
        if candidates.size == 0:
            continue
        j = int(candidates[rng.integers(0, candidates.size)])
        split = lo[j] + rng.uniform_open() * (hi[j] - lo[j])
        if not (lo[j] < split < hi[j]):
            split = 0.5 * (lo[j] + hi[j])
            if not (lo[j] < split < hi[j]):
                continue
        mask = sub[:, j] < split
        feature[nid], threshold[nid] = j, float(split)
        left[nid], right[nid] = new_node(), new_node()
        stack.append((right[nid], idx[~mask], depth + 1))
        stack.append((left[nid], idx[mask], depth + 1))
    return IsolationTree(np.array(feature, np.int64), np.array(threshold), np.array(left, np.int64),
                         np.array(right, np.int64), np.array(size, np.int64))


@dataclass(eq=False)
class IsolationForestModel:
    n_trees: int = 100
    subsample: int = 256
    seed: int = 0
    trees: list[IsolationTree] = field(default_factory=list, repr=False)
    psi: int = 0
    dim: int = 0

    @property
    def height_limit(self) -> int:
        return int(math.ceil(math.log2(self.psi))) if self.psi > 1 else 0

    def fit(self, data) -> IsolationForestModel:
        x = _as_matrix(data)
        n = x.shape[0]
        if n < 2:
            raise FitError(f"isolation forest needs at least 2 rows, got {n}")
        if self.n_trees < 1 or self.subsample < 2:
            raise ConfigError("need n_trees >= 1 and subsample >= 2")
        self.psi = min(self.subsample, n)
        self.dim = x.shape[1]
        rng = RngStream(self.seed)
        self.trees = []
        for i in range(self.n_trees):
            sub = rng.substream(i)
            rows = sub.permutation(n)[:self.psi]
            self.trees.append(_build_tree(x[rows], self.height_limit, sub))
        return self

    def score(self, x) -> np.ndarray:
        """s(x) = 2 ** (-E[h(x)] / c(psi))."""
        x = _as_matrix(x, self.dim)
        mean_h = np.mean([t.path_length(x) for t in self.trees], axis=0)
        c = average_path_length(self.psi)
        return np.power(2.0, -mean_h / c) if c > 0 else np.full(len(x), 0.5)


def iforest_fit(data, n_trees: int = 100, psi: int = 256, seed: int = 0) -> IsolationForestModel:
    return IsolationForestModel(n_trees, psi, seed).fit(data)


def iforest_score(model: IsolationForestModel, x) -> np.ndarray:
    return model.score(x)


# --- COPOD -------------------------------------------------------------------


def _skewness(col: np.ndarray) -> float:
    c = col - col.mean()
    m2 = np.mean(c * c)
    if m2 == 0:
        return 0.0
    return float(np.mean(c**3) / m2**1.5)


@dataclass(eq=False)
class CopodModel:
    sorted_train: np.ndarray | None = field(default=None, repr=False)
    skewness: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.sorted_train.shape[1]

    def fit(self, data) -> CopodModel:
        x = _as_matrix(data)
        if x.shape[0] < 2:
            raise FitError(f"COPOD needs at least 2 rows, got {x.shape[0]}")
        self.sorted_train = np.sort(x, axis=0)
        self.skewness = np.array([_skewness(x[:, j]) for j in range(x.shape[1])])
        return self

    def tail_probs(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Left and right ECDF tail probabilities, clamped to [1/n, 1]."""
        x = _as_matrix(x, self.dim)
        n = self.sorted_train.shape[0]
        left = np.empty_like(x)
        right = np.empty_like(x)
        for j in range(self.dim):
            col = self.sorted_train[:, j]
            left[:, j] = np.searchsorted(col, x[:, j], side="right") / n
            right[:, j] = (n - np.searchsorted(col, x[:, j], side="left")) / n
        return np.clip(left, 1.0 / n, 1.0), np.clip(right, 1.0 / n, 1.0)

    def aggregates(self, x) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        p_l, p_r = self.tail_probs(x)
        p_s = np.where(self.skewness < 0, p_l, p_r)
        return -np.log(p_l).sum(1), -np.log(p_r).sum(1), -np.log(p_s).sum(1)

    def score(self, x) -> np.ndarray:
        return np.maximum.reduce(self.aggregates(x))


def copod_fit(data) -> CopodModel:
    return CopodModel().fit(data)


def copod_score(model: CopodModel, x) -> np.ndarray:
    return model.score(x)


# --- one-class SVM -----------------------------------------------------------


@dataclass(eq=False)
class OcsvmModel:
    """One-class SVM in the primal over random Fourier features.

    phi(x) = sqrt(2/D) cos(x Omega^T + b), Omega ~ N(0, 2 gamma I), b ~ U[0, 2 pi),
    approximating the kernel exp(-gamma ||x - y||^2).
    """

    nu: float = 0.1
    gamma: float | None = None
    n_features: int = 256
    seed: int = 0
    epochs: int = 500
    omega: np.ndarray | None = field(default=None, repr=False)
    phase: np.ndarray | None = field(default=None, repr=False)
    w: np.ndarray | None = field(default=None, repr=False)
    rho: float = 0.0

    @property
    def dim(self) -> int:
        return self.omega.shape[1]

    def features(self, x) -> np.ndarray:
        x = _as_matrix(x, self.dim)
        return np.sqrt(2.0 / self.n_features) * np.cos(x @ self.omega.T + self.phase)

    def fit(self, data) -> OcsvmModel:
        """Minimize 0.5 ||w||^2 - rho + 1/(nu n) sum max(0, rho - w.phi_i).

        For fixed w the optimal rho is the ceil(nu n)-th smallest margin, so
        rho is set exactly each epoch and w follows the subgradient with step
        1/k (the objective is 1-strongly convex in w). The returned w is the
        running average of the iterates.
        """
        x = _as_matrix(data)
        n, d = x.shape
        if not (0 < self.nu <= 1):
            raise ConfigError(f"nu must be in (0, 1], got {self.nu}")
        if self.n_features < 1:
            raise ConfigError("n_features must be >= 1")
        gamma = self.gamma if self.gamma is not None else 1.0 / d
        if gamma <= 0:
            raise ConfigError(f"gamma must be positive, got {gamma}")
        self.gamma = gamma
        rng = RngStream(self.seed)
        self.omega = rng.gaussian((self.n_features, d)) * np.sqrt(2.0 * gamma)
        self.phase = rng.uniform(self.n_features) * 2.0 * np.pi
        phi = self.features(x)
        k = max(1, int(math.ceil(self.nu * n)))
        w = phi.mean(axis=0)
        w_avg = np.zeros_like(w)
        for it in range(1, self.epochs + 1):
            margins = phi @ w
            rho = np.partition(margins, k - 1)[k - 1]
            viol = margins < rho
            g = w - phi[viol].sum(axis=0) / (self.nu * n)
            w = w - g / it
            w_avg += (w - w_avg) / it
        self.w = w_avg
        margins = phi @ self.w
        self.rho = float(np.partition(margins, k - 1)[k - 1])
        return self

    def score(self, x) -> np.ndarray:
        return self.rho - self.features(x) @ self.w

    def objective(self, data) -> float:
        phi = self.features(data)
        n = phi.shape[0]
        return float(0.5 * self.w @ self.w - self.rho
                     + np.maximum(0.0, self.rho - phi @ self.w).sum() / (self.nu * n))


def ocsvm_fit(data, nu: float = 0.1, gamma: float | None = None, D: int = 256, seed: int = 0,
              epochs: int = 500) -> OcsvmModel:
    return OcsvmModel(nu, gamma, D, seed, epochs).fit(data)


def ocsvm_score(model: OcsvmModel, x) -> np.ndarray:
    return model.score(x)


# --- serialization --------------------------------------------------------------

KIND_IFOREST, KIND_COPOD, KIND_OCSVM = 0, 1, 2
BaselineModel = IsolationForestModel | CopodModel | OcsvmModel


def baseline_to_bytes(model: BaselineModel) -> bytes:
    """ADB1, u8 method id, then a per-method block.

    iforest: u32 n_trees, u32 subsample, u64 seed, u32 psi, u32 dim, u32 tree count,
    then per tree the tensors feature, threshold,
    left, right, size (integers stored as f64). copod: sorted training tensor, skewness tensor.
    ocsvm: f64 nu, f64 gamma, u32 D, u64 seed, u32 epochs, omega, phase, w tensors, f64 rho.
    """
    w = Writer()
    w.raw(BASELINE_MAGIC)
    if isinstance(model, IsolationForestModel):
        w.u8(KIND_IFOREST)
        w.u32(model.n_trees)
        w.u32(model.subsample)
        w.u64(model.seed)
        w.u32(model.psi)
        w.u32(model.dim)
        w.u32(len(model.trees))
        for t in model.trees:
            for arr in (t.feature, t.threshold, t.left, t.right, t.size):
                w.tensor(arr.astype(np.float64))
    elif isinstance(model, CopodModel):
        w.u8(KIND_COPOD)
        w.tensor(model.sorted_train)
        w.tensor(model.skewness)
    elif isinstance(model, OcsvmModel):
        w.u8(KIND_OCSVM)
        w.f64(model.nu)
        w.f64(model.gamma)
        w.u32(model.n_features)
        w.u64(model.seed)
        w.u32(model.epochs)
        w.tensor(model.omega)
        w.tensor(model.phase)
        w.tensor(model.w)
        w.f64(model.rho)
    else:
        raise TypeError(f"not a baseline model: {type(model).__name__}")
    return w.getvalue()


def baseline_from_bytes(data: bytes) -> BaselineModel:
    r = Reader(data, "baseline model")
    r.magic(BASELINE_MAGIC)
    kind = r.u8()
    if kind == KIND_IFOREST:
        m = IsolationForestModel(r.u32(), r.u32(), r.u64())
        m.psi, m.dim = r.u32(), r.u32()
        for _ in range(r.u32()):
            f, th, le, ri, sz = (r.tensor() for _ in range(5))
            m.trees.append(IsolationTree(f.astype(np.int64), th, le.astype(np.int64),
                                         ri.astype(np.int64), sz.astype(np.int64)))
        model: BaselineModel = m
    elif kind == KIND_COPOD:
        model = CopodModel(r.tensor(), r.tensor())
    elif kind == KIND_OCSVM:
        model = OcsvmModel(r.f64(), r.f64(), r.u32(), r.u64(), r.u32())
        model.omega, model.phase, model.w = r.tensor(), r.tensor(), r.tensor()
        model.rho = r.f64()
    else:
        raise FormatError(f"unknown baseline method id {kind}")
    r.expect_end()
    return model
