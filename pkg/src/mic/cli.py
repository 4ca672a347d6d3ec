"""Command-line entry point: ``mic {simulate,preprocess,fit,select,summarize}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io, pipeline
from .model import MicData
from .summaries import frobenius_distances, summarize_trace

logger = logging.getLogger("mic")


def _config(path) -> pipeline.RunConfig:
    return pipeline.RunConfig.from_dict(io.load_config(path))


def cmd_simulate(args):
    cfg = _config(args.config)
    recs, truth = pipeline.simulate(cfg.simulation, args.seed)
    io.write_recordings(args.out, recs, truth)
    logger.info("wrote %d subjects to %s", len(recs), args.out)


def cmd_preprocess(args):
    cfg = _config(args.config)
    recs = io.read_recordings(args.inp)
    io.write_features(args.out, pipeline.preprocess(recs, cfg.epochs), cfg.epochs)
    logger.info("wrote features for %d subjects to %s", len(recs), args.out)


def _load_data(features_dir, d: int) -> MicData:
    blocks = io.read_feature_blocks(features_dir)
    if all(b["X"].shape[-1] == d for b in blocks):
        return MicData.from_subjects([b["X"] for b in blocks])
    # stored embedding has another dimension: rebuild it from the dissimilarities
    return pipeline.mic_data(io.read_features(features_dir), d)


def cmd_fit(args):
    cfg = _config(args.config)
    if args.print_config:
        json.dump(cfg.to_dict(), sys.stdout, indent=2, sort_keys=True)
        sys.stdout.write("\n")
        return
    if args.features is None or args.out is None:
        raise SystemExit("fit: --features and --out are required")
    if args.seed is not None:
        cfg.chain.seed = args.seed
    data = _load_data(args.features, cfg.epochs.d)
    traces = pipeline.fit(data, cfg.K, cfg.priors, cfg.chain, args.chains)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    chains = []
    for c, tr in enumerate(traces):
        name = f"chain_{c:03d}"
        chain_cfg = pipeline.ChainConfig(**{**cfg.chain.to_dict(), "seed": tr.extra["seed"]})
        io.write_trace(out / name, tr, chain_cfg, tr.extra["priors"])
        chains.append({"dir": name, "seed": chain_cfg.seed})
    io.write_json({"run_seed": cfg.chain.seed, "n_chains": len(traces), "chains": chains,
                   "config": cfg.to_dict()}, out / "manifest.json")


def cmd_select(args):
    cfg = _config(args.config)
    if args.max_d is not None:
        cfg.selection.max_d = args.max_d
    features = io.read_features(args.features_src)
    d, K, st = pipeline.select(features, cfg.selection, cfg.chain, cfg.priors, seed=cfg.chain.seed)
    result = {"d": d, "K": K, "mode": cfg.selection.mode, **st.to_dict()}
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    io.write_json(result, args.out)
    logger.info("selected d=%d, K=%d after %d evaluations", d, K, st.path_length)


def _read_layout(path, p):
    if path is None:
        return None
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    if len(rows) != p:
        raise ValueError(f"layout has {len(rows)} rows, expected {p} channels")
    return [(r.get("channel", str(j)), float(r["x"]), float(r["y"])) for j, r in enumerate(rows)]


def _chain_dirs(trace_dir: Path) -> list[Path]:
    man = json.loads((trace_dir / "manifest.json").read_text())
    if "chains" in man:
        return [trace_dir / c["dir"] for c in man["chains"]]
    return [trace_dir]


def _summarize_one(trace_dir: Path, out: Path, truth, layout_path):
    tr = io.read_trace(trace_dir)
    summary = summarize_trace(tr, truth)
    out.mkdir(parents=True, exist_ok=True)
    io.write_json(summary, out / "summary.json")
    p = tr.S.shape[1]
    layout = _read_layout(layout_path, p) or [(str(j), "", "") for j in range(p)]

    with open(out / "entropy.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["level", "channel", "x", "y", "entropy"])
        for j, (name, x, y) in enumerate(layout):
            w.writerow(["population", name, x, y, repr(summary["entropy_population"][j])])
        for i, ent in enumerate(summary["entropy_subjects"]):
            for j, (name, x, y) in enumerate(layout):
                w.writerow([f"subject_{i}", name, x, y, repr(ent[j])])

    with open(out / "cluster_variance.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["level", "draw", "iteration", "D"])
        levels = [("population", tr.S)] + [(f"subject_{i}", tr.C[:, i]) for i in range(tr.C.shape[1])]
        for level, draws in levels:
            for r, v in enumerate(frobenius_distances(draws.astype(np.int64))):
                w.writerow([level, r, int(tr.iterations[r]), repr(float(v))])


def cmd_summarize(args):
    truth = io.read_truth(args.truth) if args.truth else None
    trace_dir, out = Path(args.trace), Path(args.out)
    dirs = _chain_dirs(trace_dir)
    for cdir in dirs:
        _summarize_one(cdir, out if cdir == trace_dir else out / cdir.name, truth, args.layout)
    logger.info("summarized %d chain(s) into %s", len(dirs), out)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mic", description="Multilevel spectral-synchronicity clustering")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate piecewise AR(2) recordings")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("preprocess", help="segments to TVD / eigen-Laplacian features")
    s.add_argument("--config")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("fit", help="run the Gibbs sampler")
    s.add_argument("--config")
    s.add_argument("--features")
    s.add_argument("--out")
    s.add_argument("--seed", type=int)
    s.add_argument("--chains", type=int, default=1)
    s.add_argument("--print-config", action="store_true", help="print the resolved configuration and exit")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("select", help="search (d, K) by BIC")
    s.add_argument("--config")
    s.add_argument("--features-src", required=True)
    s.add_argument("--max-d", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_select)

    s = sub.add_parser("summarize", help="posterior summaries of a fitted trace")
    s.add_argument("--trace", required=True)
    s.add_argument("--truth")
    s.add_argument("--layout", help="CSV with columns channel,x,y")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_summarize)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "chains", 1) < 1:
        raise SystemExit("--chains must be >= 1")
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
