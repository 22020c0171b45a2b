"""Datasets: synthetic generators, CSV and ADT1 binary files, one-class splits."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from diffad.binio import Reader, Writer
from diffad.errors import ConfigError, FormatError, ParseError, SplitError
from diffad.numcore import RngStream

DATA_MAGIC = b"ADT1"
DATA_VERSION = 1


@dataclass(frozen=True, eq=False)
class Dataset:
    X: np.ndarray
    labels: np.ndarray | None = None
    name: str = ""
    provenance: dict | None = None
    rows: np.ndarray | None = field(default=None, repr=False)  # source row indices after a split

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim != 2:
            raise FormatError(f"feature matrix must be 2-D, got shape {X.shape}")
        if not np.all(np.isfinite(X)):
            raise FormatError("feature matrix contains non-finite values")
        X.setflags(write=False)
        object.__setattr__(self, "X", X)
        if self.labels is not None:
            y = np.asarray(self.labels)
            if y.shape != (X.shape[0],) or not np.all((y == 0) | (y == 1)):
                raise FormatError("labels must be a 0/1 vector with one entry per row")
            y = y.astype(np.int8)
            y.setflags(write=False)
            object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]


def _check_frac(anomaly_frac: float) -> None:
    if not (0 < anomaly_frac < 0.5):
        raise ConfigError(f"anomaly_frac must be in (0, 0.5), got {anomaly_frac}")


def _assemble(normals, anomalies, rng: RngStream, name, provenance) -> Dataset:
    X = np.vstack([normals, anomalies])
    y = np.concatenate([np.zeros(len(normals), np.int8), np.ones(len(anomalies), np.int8)])
    order = rng.permutation(len(X))
    return Dataset(X[order], y[order], name, provenance)


def gen_blobs(n: int, d: int, anomaly_frac: float, seed: int) -> Dataset:
    """Standard-normal inliers; outliers uniform in [-6, 6]^d with norm > 4."""
    _check_frac(anomaly_frac)
    n_anom = int(np.floor(n * anomaly_frac))
    rng = RngStream(seed)
    normals = rng.gaussian((n - n_anom, d))
    anomalies = np.empty((0, d))
    while len(anomalies) < n_anom:
        cand = rng.uniform((2 * (n_anom - len(anomalies)) + 8, d)) * 12.0 - 6.0
        cand = cand[np.linalg.norm(cand, axis=1) > 4.0]
        anomalies = np.vstack([anomalies, cand])
    prov = {"generator": "blobs", "n": n, "d": d, "anomaly_frac": anomaly_frac, "seed": seed}
    return _assemble(normals, anomalies[:n_anom], rng, "blobs", prov)


def gen_ring(n: int, anomaly_frac: float, seed: int) -> Dataset:
    """Inliers on the annulus 0.8 <= r <= 1.2.

    Half of the outliers (rounded down) are uniform in the disk r < 0.6, the
    rest uniform in [-2, 2]^2 outside the band 0.7 <= r <= 1.3.
    """
    _check_frac(anomaly_frac)
    n_anom = int(np.floor(n * anomaly_frac))
    rng = RngStream(seed)
    m = n - n_anom
    r = rng.uniform(m) * 0.4 + 0.8
    theta = rng.uniform(m) * 2.0 * np.pi
    normals = np.column_stack([r * np.cos(theta), r * np.sin(theta)])
    n_center = n_anom // 2
    rc = 0.6 * np.sqrt(rng.uniform(n_center))
    tc = rng.uniform(n_center) * 2.0 * np.pi
    center = np.column_stack([rc * np.cos(tc), rc * np.sin(tc)])
    outer = np.empty((0, 2))
    while len(outer) < n_anom - n_center:
        cand = rng.uniform((2 * (n_anom - n_center - len(outer)) + 8, 2)) * 4.0 - 2.0
        rad = np.linalg.norm(cand, axis=1)
        outer = np.vstack([outer, cand[(rad < 0.7) | (rad > 1.3)]])
    anomalies = np.vstack([center, outer[:n_anom - n_center]])
    prov = {"generator": "ring", "n": n, "anomaly_frac": anomaly_frac, "seed": seed}
    return _assemble(normals, anomalies, rng, "ring", prov)


GENERATORS = {"blobs": gen_blobs, "ring": gen_ring}


def generate(generator: str, n: int, anomaly_frac: float, seed: int, d: int = 8) -> Dataset:
    if generator == "blobs":
        return gen_blobs(n, d, anomaly_frac, seed)
    if generator == "ring":
        return gen_ring(n, anomaly_frac, seed)
    raise ConfigError(f"unknown generator {generator!r}; valid: {', '.join(sorted(GENERATORS))}")


# --- CSV ---------------------------------------------------------------------


def save_csv(path, ds: Dataset) -> None:
    header = [f"f{j}" for j in range(ds.d)] + (["label"] if ds.labels is not None else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(ds.n):
            row = [repr(float(v)) for v in ds.X[i]]
            if ds.labels is not None:
                row.append(str(int(ds.labels[i])))
            w.writerow(row)


def load_csv(path, name: str | None = None) -> Dataset:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(f"{path}:1: empty file, expected a header row")
    header = [h.strip() for h in rows[0]]
    has_label = bool(header) and header[-1] == "label"
    feats = header[:-1] if has_label else header
    if not feats or feats != [f"f{j}" for j in range(len(feats))]:
        raise ParseError(f"{path}:1: header must be f0,...,f<d-1>[,label], got {','.join(header)}")
    d = len(feats)
    X = np.empty((len(rows) - 1, d))
    y = np.empty(len(rows) - 1, np.int8) if has_label else None
    for i, row in enumerate(rows[1:]):
        line = i + 2
        if len(row) != len(header):
            raise ParseError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
        try:
            X[i] = [float(v) for v in row[:d]]
        except ValueError as exc:
            raise ParseError(f"{path}:{line}: non-numeric feature value ({exc})") from None
        if not np.all(np.isfinite(X[i])):
            raise ParseError(f"{path}:{line}: non-finite feature value")
        if has_label:
            if row[d].strip() not in ("0", "1"):
                raise ParseError(f"{path}:{line}: label must be 0 or 1, got {row[d]!r}")
            y[i] = int(row[d])
    return Dataset(X, y, name if name is not None else path.stem)


# --- ADT1 binary ---------------------------------------------------------------


def dataset_to_bytes(ds: Dataset) -> bytes:
    """magic, u8 version, u8 has_labels, u8 ndim, u64 dims, f64 payload, [u8 labels],
    then a u64-length-prefixed UTF-8 JSON trailer with name and provenance."""
    w = Writer()
    w.raw(DATA_MAGIC)
    w.u8(DATA_VERSION)
    w.u8(ds.labels is not None)
    w.u8(ds.X.ndim)
    for dim in ds.X.shape:
        w.u64(dim)
    w.f64_array(ds.X)
    if ds.labels is not None:
        w.raw(ds.labels.astype(np.uint8).tobytes())
    meta = {"name": ds.name, "provenance": ds.provenance}
    w.text(json.dumps(meta, sort_keys=True, separators=(",", ":")))
    return w.getvalue()


def dataset_from_bytes(data: bytes, what: str = "dataset") -> Dataset:
    r = Reader(data, what)
    r.magic(DATA_MAGIC)
    version = r.u8()
    if version != DATA_VERSION:
        raise FormatError(f"{what}: unsupported version {version}")
    has_labels = r.u8()
    if has_labels not in (0, 1):
        raise FormatError(f"{what}: has_labels flag must be 0 or 1")
    ndim = r.u8()
    if ndim != 2:
        raise FormatError(f"{what}: expected a 2-D feature matrix, header says ndim={ndim}")
    shape = (r.u64(), r.u64())
    X = r.f64_array(shape[0] * shape[1]).reshape(shape)
    y = np.frombuffer(r.take(shape[0]), dtype=np.uint8).astype(np.int8) if has_labels else None
    name, prov = "", None
    if not r.at_end():
        try:
            meta = json.loads(r.text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{what}: bad metadata trailer ({exc})") from None
        name, prov = meta.get("name", ""), meta.get("provenance")
    r.expect_end()
    return Dataset(X, y, name, prov)


def save_bin(path, ds: Dataset) -> None:
    Path(path).write_bytes(dataset_to_bytes(ds))


def load_bin(path) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes(), str(path))


def load(path) -> Dataset:
    """Dispatch on extension: ``.csv`` or ``.bin``."""
    suffix = Path(path).suffix.lower()
    if suffix == ".csv":
        return load_csv(path)
    if suffix == ".bin":
        return load_bin(path)
    raise ConfigError(f"unknown dataset extension {suffix!r} (use .csv or .bin)")


def save(path, ds: Dataset) -> None:
    suffix = Path(path).suffix.lower()
    if suffix == ".csv":
        save_csv(path, ds)
    elif suffix == ".bin":
        save_bin(path, ds)
    else:
        raise ConfigError(f"unknown dataset extension {suffix!r} (use .csv or .bin)")


# --- splitting ---------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.6
    contamination: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.train_frac < 1):
            raise ConfigError(f"train_frac must be in (0, 1), got {self.train_frac}")
        if not (0 <= self.contamination <= 0.5):
            raise ConfigError(f"contamination must be in [0, 0.5], got {self.contamination}")


def split(ds: Dataset, spec: SplitSpec = SplitSpec()) -> tuple[Dataset, Dataset]:
    """One-class split: a random ``train_frac`` of the normals, plus enough
    anomalies that they make up ``contamination`` of the training set.
    Every other row goes to the test set."""
    if ds.labels is None:
        raise SplitError("split needs labels")
    normals = np.flatnonzero(ds.labels == 0)
    anomalies = np.flatnonzero(ds.labels == 1)
    n_train_norm = int(round(spec.train_frac * len(normals)))
    c = spec.contamination
    n_train_anom = int(round(c * n_train_norm / (1.0 - c))) if c > 0 else 0
    if n_train_norm < 1 or n_train_norm >= len(normals):
        raise SplitError(f"cannot take {n_train_norm} of {len(normals)} normals and leave some for testing")
    if n_train_anom > 0 and n_train_anom >= len(anomalies):
        raise SplitError(f"contamination needs {n_train_anom} anomalies but only {len(anomalies)} exist")
    rng = RngStream(spec.seed)
    normals = normals[rng.permutation(len(normals))]
    anomalies = anomalies[rng.permutation(len(anomalies))]
    train_idx = np.sort(np.concatenate([normals[:n_train_norm], anomalies[:n_train_anom]]))
    mask = np.ones(ds.n, bool)
    mask[train_idx] = False
    test_idx = np.flatnonzero(mask)
    assert not np.intersect1d(train_idx, test_idx).size
    prov = ds.provenance

    def part(idx, suffix):
        return Dataset(ds.X[idx], ds.labels[idx], f"{ds.name}:{suffix}", prov, rows=idx)

    return part(train_idx, "train"), part(test_idx, "test")
