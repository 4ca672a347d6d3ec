"""Segments to eigen-Laplacian features.

Per subject and epoch: average the segment periodograms of each channel,
normalize to a density over the analysis band, compare channels by total
variation distance, and embed the affinity ``1 - D`` with the top
eigenvectors of its normalized graph Laplacian.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter1d
from scipy.signal import periodogram

from .simulate import SegmentedRecording

logger = logging.getLogger(__name__)


class SpectrumWarning(UserWarning):
    pass


@dataclass
class EpochConfig:
    gamma: int = 8
    delta: float = 0.5
    d: int = 2
    taper: str = "cosine"
    band: tuple[float, float] = (0.5, 50.0)
    laplacian_exponent: float = -0.5
    smoothing_span: int = 1

    def __post_init__(self):
        self.band = tuple(float(b) for b in self.band)
        if self.gamma < 1:
            raise ValueError("gamma must be >= 1")
        if not 0.0 <= self.delta < 1.0:
            raise ValueError("delta must lie in [0, 1)")
        if self.step < 1:
            raise ValueError(f"epoch step round(gamma*(1-delta)) = {self.step} must be >= 1")
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if self.taper not in ("none", "cosine"):
            raise ValueError(f"unknown taper {self.taper!r}")
        if self.smoothing_span < 1 or self.smoothing_span % 2 == 0:
            raise ValueError("smoothing_span must be a positive odd number of bins")
        if not self.band[0] < self.band[1]:
            raise ValueError("band must be (low, high) with low < high")

    @property
    def step(self) -> int:
        return int(round(self.gamma * (1.0 - self.delta)))


@dataclass
class EpochSpectra:
    """Normalized spectra ``(p, n_freq)`` of one subject at one epoch."""

    subject: int | str
    epoch: int
    freqs: np.ndarray
    density: np.ndarray
    df: float


@dataclass
class EpochFeatures:
    D: np.ndarray
    A: np.ndarray
    G: np.ndarray
    X: np.ndarray
    eigenvalues: np.ndarray = field(default=None)


def build_epochs(rec: SegmentedRecording, cfg: EpochConfig) -> list[np.ndarray]:
    """Sliding windows of ``gamma`` retained segments advancing by ``cfg.step``.

    Windows run over the retained-segment sequence; gaps in
    ``rec.segment_index`` are ignored.
    """
    n = rec.n_segments
    if n < cfg.gamma:
        raise ValueError(
            f"subject {rec.subject!r} has {n} segments, fewer than gamma={cfg.gamma}"
        )
    starts = range(0, n - cfg.gamma + 1, cfg.step)
    return [np.arange(s, s + cfg.gamma) for s in starts]


def estimate_spectrum(segments: np.ndarray, fs: float, cfg: EpochConfig) -> tuple[np.ndarray, np.ndarray, float]:
    """Band-limited unit-integral spectra from the segments of one epoch.

    Parameters
    ----------
    segments : ndarray, shape (gamma, p, n)
    fs : float
        Sampling rate in Hz.

    Returns
    -------
    freqs : ndarray (n_freq,)
    density : ndarray (p, n_freq)
        Each row sums to 1 when multiplied by ``df``.
    df : float
    """
    segments = np.asarray(segments, dtype=np.float64)
    if segments.ndim == 2:
        segments = segments[:, None, :]
    n = segments.shape[-1]
    if n < 64:
        raise ValueError(f"segments must have at least 64 samples, got {n}")
    window = "hann" if cfg.taper == "cosine" else "boxcar"
    freqs, pxx = periodogram(segments, fs=fs, window=window, detrend="constant", axis=-1)
    pxx = pxx.mean(axis=0)
    if cfg.smoothing_span > 1:
        # Daniell (moving-average) smoothing across frequency, reflected at the edges
        pxx = uniform_filter1d(pxx, cfg.smoothing_span, axis=-1, mode="reflect")
    keep = (freqs >= cfg.band[0]) & (freqs <= cfg.band[1])
    if not keep.any():
        raise ValueError(f"no frequency bins inside band {cfg.band}")
    freqs, pxx = freqs[keep], pxx[:, keep]
    df = fs / n
    total = pxx.sum(axis=1) * df
    flat = ~(total > 0) | ~np.isfinite(total)
    if flat.any():
        warnings.warn(
            f"{int(flat.sum())} channel(s) with zero variance in band; using a uniform density",
            SpectrumWarning, stacklevel=2,
        )
        pxx[flat] = 1.0
        total[flat] = pxx.shape[1] * df
    return freqs, pxx / total[:, None], df


def tvd(f: np.ndarray, g: np.ndarray, df: float) -> float:
    """Total variation distance ``1 - sum(min(f, g)) * df``, clamped to [0, 1]."""
    f, g = np.asarray(f), np.asarray(g)
    if f.shape != g.shape:
        raise ValueError(f"density grids differ: {f.shape} vs {g.shape}")
    return float(np.clip(1.0 - np.minimum(f, g).sum() * df, 0.0, 1.0))


def tvd_matrix(density: np.ndarray, df: float) -> np.ndarray:
    """Pairwise TVD between the rows of ``density``."""
    overlap = np.minimum(density[:, None, :], density[None, :, :]).sum(axis=-1) * df
    D = np.clip(1.0 - overlap, 0.0, 1.0)
    D = 0.5 * (D + D.T)
    np.fill_diagonal(D, 0.0)
    return D


def _canonical_sign(vecs: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    vecs = vecs.copy()
    for c in range(vecs.shape[1]):
        nz = np.flatnonzero(np.abs(vecs[:, c]) > tol)
        if nz.size and vecs[nz[0], c] < 0:
            vecs[:, c] = -vecs[:, c]
    return vecs


def laplacian_eigs(D: np.ndarray, exponent: float = -0.5, tie_tol: float = 1e-10):
    """Affinity, normalized Laplacian and sorted eigenpairs for one epoch.

    Eigenpairs come in descending eigenvalue order with signs fixed so the
    first nonzero entry of every eigenvector is positive; numerically tied
    eigenvalues are ordered lexicographically by eigenvector.
    """
    D = np.asarray(D, dtype=np.float64)
    A = 1.0 - D
    np.fill_diagonal(A, 1.0)
    deg = A.sum(axis=1)
    if np.any(deg <= 0):
        raise ValueError("affinity matrix has a nonpositive row sum")
    scale = deg**exponent
    G = scale[:, None] * A * scale[None, :]
    G = 0.5 * (G + G.T)
    vals, vecs = np.linalg.eigh(G)
    vecs = _canonical_sign(vecs)
    # round eigenvalues so near-ties share a key, then break ties on the vectors
    keys = np.round(-vals / tie_tol) * tie_tol
    order = sorted(range(len(vals)), key=lambda c: (keys[c], tuple(vecs[:, c])))
    return A, G, vals[order], vecs[:, order]


def embed(vecs: np.ndarray, d: int) -> np.ndarray:
    """Top ``d`` eigenvectors with rows scaled to unit length."""
    X = vecs[:, :d].copy()
    norms = np.linalg.norm(X, axis=1)
    nz = norms > 0
    X[nz] /= norms[nz, None]
    return X


def laplacian_features(D: np.ndarray, d: int, exponent: float = -0.5) -> EpochFeatures:
    p = D.shape[0]
    if not 1 <= d <= p:
        raise ValueError(f"d must lie in [1, p={p}], got {d}")
    A, G, vals, vecs = laplacian_eigs(D, exponent)
    return EpochFeatures(D=np.asarray(D, dtype=np.float64), A=A, G=G, X=embed(vecs, d), eigenvalues=vals)


@dataclass
class SubjectFeatures:
    """All epochs of one subject: dissimilarities plus the eigenbasis used for any ``d``."""

    subject: int | str
    windows: list[np.ndarray]
    D: np.ndarray          # (T, p, p)
    eigvecs: np.ndarray    # (T, p, p), descending eigenvalue order
    eigvals: np.ndarray    # (T, p)
    freqs: np.ndarray
    df: float

    @property
    def n_epochs(self) -> int:
        return self.D.shape[0]

    def X(self, d: int) -> np.ndarray:
        """Embedding ``(T, p, d)``."""
        return np.stack([embed(v, d) for v in self.eigvecs])

    @property
    def A(self) -> np.ndarray:
        A = 1.0 - self.D
        idx = np.arange(self.D.shape[1])
        A[:, idx, idx] = 1.0
        return A


def preprocess_subject(rec: SegmentedRecording, cfg: EpochConfig) -> SubjectFeatures:
    windows = build_epochs(rec, cfg)
    Ds, vecs, vals = [], [], []
    freqs = df = None
    for w in windows:
        freqs, dens, df = estimate_spectrum(rec.data[w], rec.fs, cfg)
        D = tvd_matrix(dens, df)
        _, _, ev, V = laplacian_eigs(D, cfg.laplacian_exponent)
        Ds.append(D)
        vals.append(ev)
        vecs.append(V)
    return SubjectFeatures(rec.subject, windows, np.stack(Ds), np.stack(vecs), np.stack(vals), freqs, df)


def subject_from_dissimilarity(D: np.ndarray, subject=0, exponent: float = -0.5,
                               windows=None, freqs=None, df=float("nan")) -> SubjectFeatures:
    """Rebuild the eigenbasis from stored dissimilarity matrices ``(T, p, p)``."""
    D = np.asarray(D, dtype=np.float64)
    eig = [laplacian_eigs(Dt, exponent) for Dt in D]
    return SubjectFeatures(
        subject,
        windows if windows is not None else [np.array([], dtype=int)] * len(D),
        D,
        np.stack([e[3] for e in eig]),
        np.stack([e[2] for e in eig]),
        np.array([]) if freqs is None else freqs,
        df,
    )
