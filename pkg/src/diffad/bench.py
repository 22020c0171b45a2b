"""Method construction and the dataset x method x seed benchmark loop.

Per-cell seed: ``mix64(fnv1a64(f"{dataset}/{method}/{seed_index}") ^ master_seed)``.
Within a cell, substreams 0, 1 and 2 of that seed drive model initialization,
training and scoring. The dataset itself (when generated) and the split use
the listed bench seed, so every method in a (dataset, seed) pair sees the
same rows.
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from diffad import datasets as dsets
from diffad.baselines import CopodModel, IsolationForestModel, OcsvmModel
from diffad.config import Config
from diffad.denoisers import DitConfig, DitDenoiser, MlpConfig, MlpDenoiser
from diffad.diffusion import (
    DiffusionDetector,
    TrainConfig,
    anomaly_score,
    fit_detector,
    linear_schedule,
)
from diffad.errors import ConfigError
from diffad.evalmetrics import BenchmarkResult, auc_roc, roc_points
from diffad.numcore import RngStream, fnv1a64, mix64

log = logging.getLogger(__name__)


def cell_seed(master_seed: int, dataset: str, method: str, seed_index: int) -> int:
    key = f"{dataset}/{method}/{seed_index}".encode("utf-8")
    return mix64(fnv1a64(key) ^ (master_seed & (2**64 - 1)))


def schedule_for(cfg: Config):
    d = cfg.diffusion
    end = d.beta_end if d.beta_end is not None else min(0.02 * 1000.0 / d.T, 0.999)
    return linear_schedule(d.T, min(d.beta_start, end), end)


@dataclass
class ScoredDiffusion:
    """A diffusion detector bundled with the seed of its scoring stream."""

    detector: DiffusionDetector
    score_seed: int
    losses: list[float]

    def score(self, x) -> np.ndarray:
        return anomaly_score(self.detector, x, RngStream(self.score_seed))


def fit_method(method: str, x: np.ndarray, cfg: Config, seed: int):
    """Fit ``method`` on ``x``; the result has ``score(x)``, higher = more anomalous."""
    root = RngStream(seed)
    init_seed, train_seed, score_seed = (root.substream(i).seed for i in range(3))
    d = x.shape[1]
    if method in ("ddpm_mlp", "ddpm_dit"):
        if method == "ddpm_mlp":
            net = MlpDenoiser(MlpConfig(dim=d, **cfg.mlp), seed=init_seed)
        else:
            net = DitDenoiser(DitConfig(dim=d, **cfg.dit), seed=init_seed)
        sched = schedule_for(cfg)
        t = cfg.train
        det, losses = fit_detector(
            x, net, sched,
            TrainConfig(epochs=t.epochs, batch=min(t.batch, len(x)), lr=t.lr, seed=train_seed),
            t_star=cfg.diffusion.t_star,
            k=cfg.diffusion.k, mode=cfg.diffusion.mode, standardize=cfg.diffusion.standardize,
        )
        return ScoredDiffusion(det, score_seed, losses)
    if method == "iforest":
        return IsolationForestModel(seed=init_seed, **cfg.iforest).fit(x)
    if method == "ocsvm":
        return OcsvmModel(seed=init_seed, **cfg.ocsvm).fit(x)
    if method == "copod":
        return CopodModel().fit(x)
    raise ConfigError(f"unknown method {method!r}")


def load_dataset(spec, seed: int) -> dsets.Dataset:
    if spec.path is not None:
        ds = dsets.load(spec.path)
    else:
        gen_seed = spec.seed if spec.seed is not None else seed
        ds = dsets.generate(spec.generator, spec.n, spec.anomaly_frac, gen_seed, d=spec.d)
    return dsets.Dataset(ds.X, ds.labels, spec.name, ds.provenance)


def run_cell(cfg: Config, di: int, method: str, si: int) -> tuple[BenchmarkResult, list | None]:
    spec = cfg.datasets[di]
    seed = cfg.seeds[si]
    t0 = time.perf_counter()
    try:
        ds = load_dataset(spec, seed)
        train, test = dsets.split(ds, dsets.SplitSpec(cfg.train_frac, cfg.contamination, seed))
        model = fit_method(method, train.X, cfg, cell_seed(cfg.master_seed, spec.name, method, si))
        scores = model.score(test.X)
        auc = auc_roc(scores, test.labels)
        roc = roc_points(scores, test.labels) if cfg.roc_dir else None
        return BenchmarkResult(method, spec.name, seed, auc, time.perf_counter() - t0), roc
    except Exception as exc:  # a failed cell must not abort the others
        log.error("cell %s/%s/seed=%s failed: %s", spec.name, method, seed, exc)
        msg = f"{type(exc).__name__}: {exc}"
        return BenchmarkResult(method, spec.name, seed, None, time.perf_counter() - t0, msg), None


def _run_cell_args(args):
    return run_cell(*args)


def run_bench(cfg: Config, jobs: int | None = None) -> list[BenchmarkResult]:
    """Run every cell; results come back in (dataset, method, seed) config order."""
    cfg.validate_bench()
    cells = [(cfg, di, m, si) for di in range(len(cfg.datasets))
             for m in cfg.methods for si in range(len(cfg.seeds))]
    jobs = cfg.jobs if jobs is None else jobs
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            out = list(pool.map(_run_cell_args, cells))
    else:
        out = [run_cell(*c) for c in cells]
    if cfg.roc_dir:
        root = Path(cfg.roc_dir)
        root.mkdir(parents=True, exist_ok=True)
        for res, roc in out:
            if roc is not None:
                lines = ["fpr,tpr"] + [f"{f!r},{t!r}" for f, t in roc]
                (root / f"{res.dataset}_{res.method}_{res.seed}.csv").write_text("\n".join(lines) + "\n")
    return [r for r, _ in out]
