"""Posterior summaries: least-squares partitions, cluster variance, entropy, intervals, accuracy."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .labels import PERMUTATION_CAP, best_permutations, one_hot

logger = logging.getLogger(__name__)


def adjacency(labels) -> np.ndarray:
    """``A[j, l] = 1`` when channels ``j`` and ``l`` share a label."""
    labels = np.asarray(labels)
    return (labels[..., :, None] == labels[..., None, :]).astype(np.float64)


def mean_adjacency(draws) -> np.ndarray:
    """Posterior mean co-clustering matrix of ``draws`` with shape (M, p)."""
    draws = np.asarray(draws)
    K = int(draws.max()) + 1
    Z = one_hot(draws, K)
    return np.einsum("mpk,mqk->pq", Z, Z) / draws.shape[0]


def frobenius_distances(draws, Abar=None) -> np.ndarray:
    """``||A(draw_r) - Abar||_F`` for every draw, without materializing all adjacencies."""
    draws = np.asarray(draws)
    if Abar is None:
        Abar = mean_adjacency(draws)
    K = int(draws.max()) + 1
    Z = one_hot(draws, K)
    base = np.sum(Abar**2)
    # sum_{jl} A_r (1 - 2 Abar) for binary A_r
    cross = np.einsum("mpk,pq,mqk->m", Z, 1.0 - 2.0 * Abar, Z)
    return np.sqrt(np.maximum(base + cross, 0.0))


@dataclass
class PartitionEstimate:
    level: str
    labels: np.ndarray
    index: int
    loss: float

    def to_dict(self):
        return {"level": self.level, "labels": self.labels.tolist(), "index": self.index, "loss": self.loss}


def dahl_estimate(draws, level: str = "population") -> PartitionEstimate:
    """Retained draw closest to the mean adjacency in Frobenius norm; ties go to the earliest draw."""
    draws = np.asarray(draws)
    if draws.ndim != 2 or draws.shape[0] == 0:
        raise ValueError("dahl_estimate needs at least one retained draw of shape (M, p)")
    loss = frobenius_distances(draws)
    # exact ties can differ in the last ulp, so compare with a small tolerance
    r = int(np.flatnonzero(loss <= loss.min() + 1e-10)[0])
    return PartitionEstimate(level, draws[r].astype(np.int64), r, float(loss[r]))


@dataclass
class VarianceSummary:
    population: np.ndarray           # D_S samples
    subjects: list[np.ndarray]       # D_{C_i} samples per subject
    delta: float

    def quantiles(self, q=(0.025, 0.25, 0.5, 0.75, 0.975)) -> dict:
        out = {"population": np.quantile(self.population, q).tolist()}
        out["subjects"] = [np.quantile(s, q).tolist() for s in self.subjects]
        return {"q": list(q), **out}


def variance_summary(S_draws, C_draws) -> VarianceSummary:
    """Cluster-variance samples per level and their average difference.

    ``delta = E(D_S) - mean_i E(D_{C_i})``.
    """
    S_draws, C_draws = np.asarray(S_draws), np.asarray(C_draws)
    dS = frobenius_distances(S_draws)
    dC = [frobenius_distances(C_draws[:, i]) for i in range(C_draws.shape[1])]
    delta = float(dS.mean() - np.mean([c.mean() for c in dC]))
    return VarianceSummary(dS, dC, delta)


def label_frequencies(draws, K) -> np.ndarray:
    return one_hot(np.asarray(draws), K).mean(axis=0)


def entropy_map(draws, K) -> np.ndarray:
    """Per-channel entropy of posterior label frequencies, divided by ``log K``."""
    freq = label_frequencies(draws, K)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(freq > 0, freq * np.log(freq), 0.0)
    return np.clip(-terms.sum(axis=-1) / np.log(K), 0.0, 1.0)


def score_accuracy(estimate, truth, K: int | None = None, cap: int = PERMUTATION_CAP) -> float:
    """Fraction of channels correctly labeled under the best relabeling of ``estimate``."""
    estimate, truth = np.asarray(estimate), np.asarray(truth)
    if estimate.shape != truth.shape:
        raise ValueError("estimate and truth must have the same shape")
    K = K or int(max(estimate.max(), truth.max())) + 1
    perm = best_permutations(estimate, truth, K, cap)
    return float(np.mean(perm[estimate] == truth))


def credible_intervals(samples, level: float = 0.95, min_samples: int = 40) -> np.ndarray:
    """(median, lower, upper) along axis 0; returns shape ``(3,) + samples.shape[1:]``."""
    samples = np.asarray(samples, dtype=float)
    if samples.shape[0] < min_samples:
        warnings.warn(f"only {samples.shape[0]} samples for credible intervals", stacklevel=2)
    tail = 0.5 * (1.0 - level)
    return np.quantile(samples, [0.5, tail, 1.0 - tail], axis=0)


def summarize_trace(trace, truth=None) -> dict:
    """Everything the ``summarize`` command reports for one chain."""
    K = trace.K
    S = trace.S.astype(np.int64)
    C = trace.C.astype(np.int64)
    pop = dahl_estimate(S, "population")
    subj = [dahl_estimate(C[:, i], f"subject {i}") for i in range(C.shape[1])]
    var = variance_summary(S, C)
    a_ci = credible_intervals(trace.alpha)
    b_ci = credible_intervals(trace.beta)
    out = {
        "K": K,
        "n_draws": trace.n_draws,
        "population": pop.to_dict(),
        "subjects": [s.to_dict() for s in subj],
        "alpha": {"median": a_ci[0].tolist(), "lower": a_ci[1].tolist(), "upper": a_ci[2].tolist()},
        "beta": {"median": b_ci[0].tolist(), "lower": b_ci[1].tolist(), "upper": b_ci[2].tolist()},
        "delta_D": var.delta,
        "D_quantiles": var.quantiles(),
        "entropy_population": entropy_map(S, K).tolist(),
        "entropy_subjects": [entropy_map(C[:, i], K).tolist() for i in range(C.shape[1])],
    }
    if truth is not None:
        out["accuracy"] = {
            "population": score_accuracy(pop.labels, truth.S, K),
            "subjects": [score_accuracy(s.labels, truth.C[i], K) for i, s in enumerate(subj)],
        }
    return out
