"""Command-line harness.

Exit codes: 0 ok, 1 partial bench failure, 2 usage/config, 3 I/O or file
format, 4 non-finite numerics, 5 contract violation (e.g. dimension mismatch).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from diffad import datasets as dsets
from diffad.baselines import BASELINE_MAGIC, baseline_from_bytes, baseline_to_bytes
from diffad.bench import ScoredDiffusion, fit_method, run_bench
from diffad.config import load_config
from diffad.denoisers import MODEL_MAGIC
from diffad.diffusion import DiffusionDetector, anomaly_score, detector_from_bytes, detector_to_bytes
from diffad.errors import ContractError, DiffadError, FormatError
from diffad.evalmetrics import aggregate, markdown_table, results_csv
from diffad.numcore import RngStream

log = logging.getLogger("diffad")

EXIT_OK, EXIT_PARTIAL, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_CONTRACT = 0, 1, 2, 3, 4, 5


def _write_text(path, text: str) -> None:
    Path(path).write_text(text)


def load_model(path):
    data = Path(path).read_bytes()
    if data[:4] == MODEL_MAGIC:
        return detector_from_bytes(data)
    if data[:4] == BASELINE_MAGIC:
        return baseline_from_bytes(data)
    raise FormatError(f"{path}: not a model file (magic {data[:4]!r})")


def cmd_gen_data(args) -> int:
    ds = dsets.generate(args.generator, args.n, args.anomaly_frac, args.seed, d=args.d)
    dsets.save(args.out, ds)
    print(f"wrote {ds.n} rows ({int(ds.labels.sum())} anomalies) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    ds = dsets.load(args.data)
    train_x = ds.X if ds.labels is None else ds.X[ds.labels == 0]
    method = args.method or cfg.train.method
    model = fit_method(method, train_x, cfg, cfg.train.seed)
    if isinstance(model, ScoredDiffusion):
        print("epoch,loss")
        for i, loss in enumerate(model.losses, 1):
            print(f"{i},{loss!r}")
        blob = detector_to_bytes(model.detector)
    else:
        blob = baseline_to_bytes(model)
    Path(args.model_out).write_bytes(blob)
    return EXIT_OK


def cmd_score(args) -> int:
    model = load_model(args.model)
    ds = dsets.load(args.data)
    if isinstance(model, DiffusionDetector):
        scores = anomaly_score(model, ds.X, RngStream(args.seed))
    else:
        scores = model.score(ds.X)
    lines = ["row,score"] + [f"{i},{s!r}" for i, s in enumerate(np.asarray(scores, float).tolist())]
    _write_text(args.out, "\n".join(lines) + "\n")
    return EXIT_OK


def cmd_sample(args) -> int:
    model = load_model(args.model)
    if not isinstance(model, DiffusionDetector):
        raise ContractError(f"{args.model} is a baseline model; sampling needs a diffusion detector")
    x = model.sample(args.n, RngStream(args.seed))
    dsets.save_csv(args.out, dsets.Dataset(x, None, "samples"))
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = load_config(args.config)
    cfg.validate_bench()
    results = run_bench(cfg, jobs=args.jobs)
    _write_text(args.out_csv, results_csv(results))
    if args.out_md:
        _write_text(args.out_md, markdown_table(aggregate(results), cfg.methods))
    failed = [r for r in results if r.auc is None]
    for r in failed:
        print(f"cell failed: {r.dataset}/{r.method}/seed={r.seed}: {r.error}", file=sys.stderr)
    return EXIT_PARTIAL if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diffad", description="Diffusion anomaly-detection benchmark harness")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset (.csv or .bin)")
    g.add_argument("--generator", required=True, choices=sorted(dsets.GENERATORS))
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--anomaly-frac", type=float, default=0.1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--d", type=int, default=8, help="feature count (blobs only)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="fit a detector on the normal rows of a dataset")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--model-out", required=True)
    t.add_argument("--method", choices=["ddpm_mlp", "ddpm_dit", "iforest", "ocsvm", "copod"])
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("score", help="write one anomaly score per row")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_score)

    sm = sub.add_parser("sample", help="draw samples from a diffusion detector")
    sm.add_argument("--model", required=True)
    sm.add_argument("--n", type=int, required=True)
    sm.add_argument("--seed", type=int, default=0)
    sm.add_argument("--out", required=True)
    sm.set_defaults(func=cmd_sample)

    b = sub.add_parser("bench", help="run the dataset x method x seed benchmark")
    b.add_argument("--config", required=True)
    b.add_argument("--out-csv", required=True)
    b.add_argument("--out-md")
    b.add_argument("--jobs", type=int)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DiffadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
