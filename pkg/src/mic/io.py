"""On-disk formats for recordings, features and chain traces.

Recordings
    ``subject_XXX.bin``: three little-endian int64 (p, segment length,
    n_segments) followed by float64 samples in row-major
    ``(n_segments, p, segment_length)`` order.  ``manifest.json`` lists the
    subjects, sampling rate and retained segment indices; ``truth.json``
    holds simulated ground truth when present.
Features
    ``subject_XXX_features.bin``: float64 blocks ``D (T,p,p)``, ``A (T,p,p)``,
    ``X (T,p,d)`` back to back; the ``.json`` sidecar records shapes, byte
    offsets, epoch windows, the frequency grid and the epoch settings.
Traces
    One ``.npy`` file per retained quantity, ``manifest.json`` with dims,
    priors, seed and schedule, and ``log_density.csv`` (one row per
    iteration, row 0 being the initial state).
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np
import yaml

from .model import MicState, PriorConfig
from .preprocess import EpochConfig, SubjectFeatures, subject_from_dissimilarity
from .sampler import ChainConfig, ChainTrace
from .simulate import GroundTruth, SegmentedRecording

_HEADER = np.dtype("<i8")
_F64 = np.dtype("<f8")


def load_config(path) -> dict:
    """YAML or JSON run configuration (JSON is valid YAML)."""
    if path is None:
        return {}
    with open(path) as fh:
        return yaml.safe_load(fh) or {}


def write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_json(path):
    with open(path) as fh:
        return json.load(fh)


# ---------------------------------------------------------------- recordings

def write_recordings(out_dir, recordings: list[SegmentedRecording], truth: GroundTruth | None = None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    subjects = []
    for i, rec in enumerate(recordings):
        name = f"subject_{i:03d}.bin"
        with open(out / name, "wb") as fh:
            fh.write(np.array([rec.n_channels, rec.segment_length, rec.n_segments], dtype=_HEADER).tobytes())
            fh.write(np.ascontiguousarray(rec.data, dtype=_F64).tobytes())
        subjects.append({"id": str(rec.subject), "file": name,
                         "segment_index": np.asarray(rec.segment_index).tolist()})
    fs = recordings[0].fs if recordings else None
    write_json({"fs": fs, "subjects": subjects}, out / "manifest.json")
    if truth is not None:
        write_json(truth.to_dict(), out / "truth.json")


def read_recordings(in_dir) -> list[SegmentedRecording]:
    src = Path(in_dir)
    man = _read_json(src / "manifest.json")
    recs = []
    for entry in man["subjects"]:
        raw = (src / entry["file"]).read_bytes()
        p, n, m = np.frombuffer(raw[:24], dtype=_HEADER)
        data = np.frombuffer(raw[24:], dtype=_F64)
        if data.size != p * n * m:
            raise ValueError(f"{entry['file']}: expected {p * n * m} samples, found {data.size}")
        recs.append(SegmentedRecording(data.reshape(m, p, n).copy(), man["fs"], entry["id"],
                                       np.asarray(entry["segment_index"])))
    return recs


def read_truth(path) -> GroundTruth:
    return GroundTruth.from_dict(_read_json(path))


# ---------------------------------------------------------------- features

def write_features(out_dir, features: list[SubjectFeatures], cfg: EpochConfig):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for i, sf in enumerate(features):
        base = f"subject_{i:03d}_features"
        T, p = sf.D.shape[:2]
        X = sf.X(cfg.d)
        blocks = {"D": sf.D, "A": sf.A, "X": X}
        offsets, pos = {}, 0
        with open(out / f"{base}.bin", "wb") as fh:
            for key, arr in blocks.items():
                buf = np.ascontiguousarray(arr, dtype=_F64).tobytes()
                offsets[key] = {"offset": pos, "shape": list(arr.shape)}
                fh.write(buf)
                pos += len(buf)
        write_json({
            "subject": str(sf.subject),
            "blocks": offsets,
            "n_epochs": T,
            "p": p,
            "d": cfg.d,
            "gamma": cfg.gamma,
            "delta": cfg.delta,
            "taper": cfg.taper,
            "band": list(cfg.band),
            "smoothing_span": cfg.smoothing_span,
            "laplacian_exponent": cfg.laplacian_exponent,
            "freqs": np.asarray(sf.freqs).tolist(),
            "df": sf.df,
            "windows": [np.asarray(w).tolist() for w in sf.windows],
        }, out / f"{base}.json")
        names.append(base)
    write_json({"subjects": names, "epochs": asdict(cfg)}, out / "manifest.json")


def read_feature_blocks(in_dir) -> list[dict]:
    """Raw blocks per subject: ``{"D", "A", "X", "meta"}``."""
    src = Path(in_dir)
    man = _read_json(src / "manifest.json")
    out = []
    for base in man["subjects"]:
        meta = _read_json(src / f"{base}.json")
        raw = (src / f"{base}.bin").read_bytes()
        blocks = {}
        for key, info in meta["blocks"].items():
            n = int(np.prod(info["shape"]))
            arr = np.frombuffer(raw, dtype=_F64, count=n, offset=info["offset"])
            blocks[key] = arr.reshape(info["shape"]).copy()
        blocks["meta"] = meta
        out.append(blocks)
    return out


def read_features(in_dir) -> list[SubjectFeatures]:
    """Subject features with the eigenbasis rebuilt from the stored dissimilarities."""
    out = []
    for b in read_feature_blocks(in_dir):
        meta = b["meta"]
        out.append(subject_from_dissimilarity(
            b["D"], meta["subject"], meta["laplacian_exponent"],
            [np.asarray(w) for w in meta["windows"]], np.asarray(meta["freqs"]), meta["df"]))
    return out


# ---------------------------------------------------------------- traces

_TRACE_ARRAYS = ("iterations", "L", "C", "S", "alpha", "beta", "pi", "mu", "sigma2", "epoch_subject")
_STATE_FIELDS = ("L", "C", "S", "mu", "sigma2", "alpha", "beta", "pi")


def write_trace(out_dir, trace: ChainTrace, chain: ChainConfig, priors: PriorConfig, extra: dict | None = None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in _TRACE_ARRAYS:
        arr = getattr(trace, name)
        if arr is not None:
            np.save(out / f"{name}.npy", arr)
    for name in _STATE_FIELDS:
        np.save(out / f"initial_{name}.npy", getattr(trace.initial, name))
    with open(out / "log_density.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "log_density"])
        for it, v in enumerate(trace.log_density):
            w.writerow([it, repr(float(v))])
    n, p = trace.C.shape[1:] if trace.n_draws else trace.initial.C.shape
    write_json({
        "dims": {"n": int(n), "p": int(p), "E": int(len(trace.epoch_subject)), "K": trace.K,
                 "d": int(trace.initial.mu.shape[-1]),
                 "T": np.bincount(trace.epoch_subject, minlength=n).tolist()},
        "priors": priors.to_dict(),
        "chain": chain.to_dict(),
        "seed": chain.seed,
        "schedule": {"n_iterations": chain.n_iterations, "n_burnin": chain.n_burnin,
                     "thinning": chain.thinning, "n_draws": trace.n_draws},
        **(extra or {}),
    }, out / "manifest.json")


def read_trace(in_dir) -> ChainTrace:
    src = Path(in_dir)
    man = _read_json(src / "manifest.json")
    arrs = {n: np.load(src / f"{n}.npy") if (src / f"{n}.npy").exists() else None for n in _TRACE_ARRAYS}
    initial = MicState(**{n: np.load(src / f"initial_{n}.npy") for n in _STATE_FIELDS})
    with open(src / "log_density.csv") as fh:
        rows = list(csv.reader(fh))[1:]
    logd = np.array([float(r[1]) for r in rows])
    return ChainTrace(K=man["dims"]["K"], log_density=logd, initial=initial, **arrs)
