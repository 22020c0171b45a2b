"""Strict INI-style configuration for training and benchmark runs.

Sections and keys (every key optional unless noted; unknown sections or keys
are rejected before any work starts)::

    [bench]      methods = ddpm_mlp, copod   (required for bench)
                 seeds = 1, 2, 3             (required for bench)
                 master_seed = 0
                 jobs = 1
                 roc_dir =                   (write per-cell ROC point CSVs here)
    [data]       train_frac = 0.6
                 contamination = 0.0
    [dataset.NAME]
                 generator = ring | blobs    (or: path = file.csv / file.bin)
                 n = 2000, anomaly_frac = 0.1, d = 8
                 seed =                      (fixed generator seed; default: the bench seed)
    [train]      method = ddpm_mlp, epochs = 500, batch = 128, lr = 0.001, seed = 0
    [diffusion]  T = 100, beta_start = 0.0001, beta_end = 0.02*1000/T,
                 t_star = T/10, k = 4, mode = multi-step, standardize = true
    [mlp]        hidden = 128, 128; emb_dim = 32; activation = relu
    [dit]        patch = 2, width = 32, n_blocks = 1, emb_dim = 32, ff_mult = 2,
                 pos_embedding = true
    [iforest]    n_trees = 100, subsample = 256
    [ocsvm]      nu = 0.1, gamma = 1/d, n_features = 256, epochs = 500
    [copod]      (no keys)
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from diffad.errors import ConfigError

METHODS = ("ddpm_mlp", "ddpm_dit", "iforest", "ocsvm", "copod")

_KEYS = {
    "bench": {"methods", "seeds", "master_seed", "jobs", "roc_dir"},
    "data": {"train_frac", "contamination"},
    "train": {"method", "epochs", "batch", "lr", "seed"},
    "diffusion": {"T", "beta_start", "beta_end", "t_star", "k", "mode", "standardize"},
    "mlp": {"hidden", "emb_dim", "activation"},
    "dit": {"patch", "width", "n_blocks", "emb_dim", "ff_mult", "pos_embedding"},
    "iforest": {"n_trees", "subsample"},
    "ocsvm": {"nu", "gamma", "n_features", "epochs"},
    "copod": set(),
}
_DATASET_KEYS = {"generator", "path", "n", "anomaly_frac", "d", "seed"}


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    generator: str | None = None
    path: str | None = None
    n: int = 2000
    anomaly_frac: float = 0.1
    d: int = 8
    seed: int | None = None


@dataclass(frozen=True)
class DiffusionSettings:
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float | None = None
    t_star: int | None = None
    k: int = 4
    mode: str = "multi-step"
    standardize: bool = True


@dataclass(frozen=True)
class TrainSettings:
    method: str = "ddpm_mlp"
    epochs: int = 500
    batch: int = 128
    lr: float = 1e-3
    seed: int = 0


@dataclass(frozen=True)
class Config:
    datasets: list[DatasetSpec] = field(default_factory=list)
    methods: list[str] = field(default_factory=list)
    seeds: list[int] = field(default_factory=list)
    master_seed: int = 0
    jobs: int = 1
    roc_dir: str | None = None
    train_frac: float = 0.6
    contamination: float = 0.0
    train: TrainSettings = TrainSettings()
    diffusion: DiffusionSettings = DiffusionSettings()
    mlp: dict = field(default_factory=dict)
    dit: dict = field(default_factory=dict)
    iforest: dict = field(default_factory=dict)
    ocsvm: dict = field(default_factory=dict)

    def validate_bench(self) -> None:
        if not self.datasets:
            raise ConfigError("bench config needs at least one [dataset.NAME] section")
        if not self.methods:
            raise ConfigError("[bench] methods must list at least one method")
        if not self.seeds:
            raise ConfigError("[bench] seeds must list at least one seed")


def _int(section, key, raw) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: expected an integer, got {raw!r}") from None


def _float(section, key, raw) -> float:
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: expected a number, got {raw!r}") from None


def _bool(section, key, raw) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"[{section}] {key}: expected true/false, got {raw!r}")


def _list(raw: str) -> list[str]:
    return [p.strip() for p in raw.split(",") if p.strip()]


def parse_config(text: str) -> Config:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keys are case-sensitive (T)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax error: {exc}") from None
    if cp.defaults():
        raise ConfigError("keys outside any section are not allowed")

    datasets = []
    for section in cp.sections():
        keys = set(cp[section])
        if section.startswith("dataset."):
            allowed = _DATASET_KEYS
        elif section in _KEYS:
            allowed = _KEYS[section]
        else:
            raise ConfigError(f"unknown section [{section}]")
        unknown = keys - allowed
        if unknown:
            raise ConfigError(f"[{section}] unknown key(s): {', '.join(sorted(unknown))}")

    for section in cp.sections():
        if not section.startswith("dataset."):
            continue
        s = cp[section]
        name = section[len("dataset."):]
        if not name:
            raise ConfigError("dataset section needs a name: [dataset.NAME]")
        if ("generator" in s) == ("path" in s):
            raise ConfigError(f"[{section}] needs exactly one of generator= or path=")
        if "generator" in s and s["generator"] not in ("ring", "blobs"):
            raise ConfigError(f"[{section}] unknown generator {s['generator']!r}; valid: blobs, ring")
        datasets.append(DatasetSpec(
            name=name,
            generator=s.get("generator"),
            path=s.get("path"),
            n=_int(section, "n", s.get("n", "2000")),
            anomaly_frac=_float(section, "anomaly_frac", s.get("anomaly_frac", "0.1")),
            d=_int(section, "d", s.get("d", "8")),
            seed=_int(section, "seed", s["seed"]) if "seed" in s else None,
        ))

    get = lambda sec: cp[sec] if cp.has_section(sec) else {}  # noqa: E731
    b, dt, tr, df = get("bench"), get("data"), get("train"), get("diffusion")

    methods = _list(b.get("methods", ""))
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"[bench] unknown method {m!r}; valid: {', '.join(METHODS)}")
    if len(set(methods)) != len(methods):
        raise ConfigError("[bench] methods contains duplicates")
    seeds = [_int("bench", "seeds", v) for v in _list(b.get("seeds", ""))]
    if any(s < 0 or s >= 2**64 for s in seeds):
        raise ConfigError("[bench] seeds must be unsigned 64-bit integers")

    train = TrainSettings(
        method=tr.get("method", "ddpm_mlp"),
        epochs=_int("train", "epochs", tr.get("epochs", "500")),
        batch=_int("train", "batch", tr.get("batch", "128")),
        lr=_float("train", "lr", tr.get("lr", "0.001")),
        seed=_int("train", "seed", tr.get("seed", "0")),
    )
    if train.method not in METHODS:
        raise ConfigError(f"[train] unknown method {train.method!r}; valid: {', '.join(METHODS)}")
    if train.epochs < 1 or train.batch < 1 or train.lr <= 0:
        raise ConfigError("[train] epochs and batch must be >= 1 and lr > 0")

    diffusion = DiffusionSettings(
        T=_int("diffusion", "T", df.get("T", "100")),
        beta_start=_float("diffusion", "beta_start", df.get("beta_start", "0.0001")),
        beta_end=_float("diffusion", "beta_end", df["beta_end"]) if "beta_end" in df else None,
        t_star=_int("diffusion", "t_star", df["t_star"]) if "t_star" in df else None,
        k=_int("diffusion", "k", df.get("k", "4")),
        mode=df.get("mode", "multi-step"),
        standardize=_bool("diffusion", "standardize", df.get("standardize", "true")),
    )

    mlp = {}
    if cp.has_section("mlp"):
        s = cp["mlp"]
        if "hidden" in s:
            mlp["hidden"] = tuple(_int("mlp", "hidden", v) for v in _list(s["hidden"]))
        if "emb_dim" in s:
            mlp["emb_dim"] = _int("mlp", "emb_dim", s["emb_dim"])
        if "activation" in s:
            acts = _list(s["activation"])
            mlp["activation"] = acts[0] if len(acts) == 1 else tuple(acts)
    dit = {}
    if cp.has_section("dit"):
        s = cp["dit"]
        for key in ("patch", "width", "n_blocks", "emb_dim", "ff_mult"):
            if key in s:
                dit[key] = _int("dit", key, s[key])
        if "pos_embedding" in s:
            dit["pos_embedding"] = _bool("dit", "pos_embedding", s["pos_embedding"])
    iforest = {}
    if cp.has_section("iforest"):
        s = cp["iforest"]
        for key in ("n_trees", "subsample"):
            if key in s:
                iforest[key] = _int("iforest", key, s[key])
    ocsvm = {}
    if cp.has_section("ocsvm"):
        s = cp["ocsvm"]
        for key in ("nu", "gamma"):
            if key in s:
                ocsvm[key] = _float("ocsvm", key, s[key])
        for key in ("n_features", "epochs"):
            if key in s:
                ocsvm[key] = _int("ocsvm", key, s[key])

    return Config(
        datasets=datasets,
        methods=methods,
        seeds=seeds,
        master_seed=_int("bench", "master_seed", b.get("master_seed", "0")),
        jobs=_int("bench", "jobs", b.get("jobs", "1")),
        roc_dir=b.get("roc_dir") or None,
        train_frac=_float("data", "train_frac", dt.get("train_frac", "0.6")),
        contamination=_float("data", "contamination", dt.get("contamination", "0.0")),
        train=train,
        diffusion=diffusion,
        mlp=mlp,
        dit=dit,
        iforest=iforest,
        ocsvm=ocsvm,
    )


def load_config(path) -> Config:
    return parse_config(Path(path).read_text())
