"""Piecewise-stationary multichannel signals from mixtures of AR(2) processes.

Each channel alternates between a *main* and an *off* spectral state.  The
cluster a channel belongs to picks which AR(2) mixture is used in each state,
so planting subject-level labels (and, above them, population labels) plants
a multilevel cluster structure in the spectra.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter

logger = logging.getLogger(__name__)

BAND_CENTERS = {"delta": 2.0, "theta": 6.0, "alpha": 10.0, "beta": 20.0, "gamma": 40.0}

# Peak configurations handed out to clusters in order; at most two bands each.
DEFAULT_CONFIGS = (
    ("alpha",),
    ("theta", "beta"),
    ("delta", "gamma"),
    ("beta",),
    ("theta",),
    ("alpha", "gamma"),
    ("delta",),
    ("gamma",),
)

_LABEL_STREAM = 2**31 - 1
_BURNIN = 500


class StationarityError(ValueError):
    """Raised when AR(2) coefficients have a root on or outside the unit circle."""


@dataclass(frozen=True)
class AR2Component:
    """One spectral peak: placed at ``freq`` Hz with pole radius ``radius``."""

    freq: float
    radius: float = 0.95
    weight: float = 1.0

    def coefficients(self, fs: float) -> tuple[float, float]:
        omega = 2.0 * np.pi * self.freq / fs
        return 2.0 * self.radius * np.cos(omega), -self.radius**2


@dataclass
class SpectralState:
    """Per-cluster AR(2) mixtures sharing one sampling rate."""

    clusters: list[list[AR2Component]]
    fs: float = 250.0

    def __post_init__(self):
        for k, comps in enumerate(self.clusters):
            if not comps:
                raise ValueError(f"cluster {k} has no AR(2) components")
            w = np.array([c.weight for c in comps])
            if np.any(w < 0) or not np.isclose(w.sum(), 1.0):
                raise ValueError(f"cluster {k} weights must be nonnegative and sum to 1, got {w}")
            for c in comps:
                check_stationary(*c.coefficients(self.fs))

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)

    def density(self, freqs: np.ndarray, cluster: int) -> np.ndarray:
        """Theoretical spectral density of ``cluster`` at ``freqs`` (Hz), up to a constant."""
        return sum(
            c.weight * ar2_density(freqs, *c.coefficients(self.fs), fs=self.fs, unit_variance=True)
            for c in self.clusters[cluster]
        )


def check_stationary(phi1: float, phi2: float) -> None:
    # roots of z^2 - phi1 z - phi2 strictly inside the unit circle <=> the stationarity triangle
    if not (abs(phi2) < 1.0 and phi1 + phi2 < 1.0 and phi2 - phi1 < 1.0):
        roots = np.roots([1.0, -phi1, -phi2])
        raise StationarityError(
            f"AR(2) coefficients phi1={phi1:.6g}, phi2={phi2:.6g} are not stationary "
            f"(root moduli {np.abs(roots).round(6).tolist()})"
        )


def ar2_variance(phi1: float, phi2: float) -> float:
    """Process variance of an AR(2) with unit innovation variance."""
    return (1.0 - phi2) / ((1.0 + phi2) * ((1.0 - phi2) ** 2 - phi1**2))


def ar2_density(freqs, phi1, phi2, fs, sigma2=1.0, unit_variance=False):
    """Closed-form AR(2) spectral density ``sigma2 / |1 - phi1 e^{-iw} - phi2 e^{-2iw}|^2``.

    With ``unit_variance`` the innovation variance is rescaled so that the
    process itself has unit variance; mixture weights then act as power
    fractions.
    """
    if unit_variance:
        sigma2 = 1.0 / ar2_variance(phi1, phi2)
    w = 2.0 * np.pi * np.asarray(freqs, dtype=float) / fs
    z = np.exp(-1j * w)
    return sigma2 / np.abs(1.0 - phi1 * z - phi2 * z**2) ** 2


def default_states(n_clusters: int, fs: float = 250.0, radius: float = 0.95,
                   off_shift: int = 1) -> tuple[SpectralState, SpectralState]:
    """Main and off states for ``n_clusters`` clusters.

    Main-state cluster ``k`` takes the ``k``-th entry of ``DEFAULT_CONFIGS``;
    its off-state borrows the main configuration of cluster ``k + off_shift``
    (mod K), so a channel in its off state looks like a different cluster.
    """
    if n_clusters > len(DEFAULT_CONFIGS):
        raise ValueError(f"at most {len(DEFAULT_CONFIGS)} default clusters, got {n_clusters}")

    def build(names):
        return [AR2Component(BAND_CENTERS[b], radius, 1.0 / len(names)) for b in names]

    main = [build(DEFAULT_CONFIGS[k]) for k in range(n_clusters)]
    off = [main[(k + off_shift) % n_clusters] for k in range(n_clusters)]
    return SpectralState(main, fs), SpectralState(off, fs)


def simulate_ar2_mixture(state: SpectralState, cluster: int, n_samples: int,
                         rng: np.random.Generator) -> np.ndarray:
    """Zero-mean realization of one cluster's AR(2) mixture.

    Components are simulated independently with unit process variance and
    summed with ``sqrt(weight)`` gains, which makes the spectrum exactly the
    weighted sum of component spectra.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be at least 2")
    out = np.zeros(n_samples)
    for comp in state.clusters[cluster]:
        phi1, phi2 = comp.coefficients(state.fs)
        check_stationary(phi1, phi2)
        # draw even for zero weight so every component consumes the same stream
        e = rng.standard_normal(n_samples + _BURNIN)
        if comp.weight == 0.0:
            continue
        x = lfilter([1.0], [1.0, -phi1, -phi2], e)[_BURNIN:]
        out += np.sqrt(comp.weight / ar2_variance(phi1, phi2)) * x
    return out


def plant_labels(S: np.ndarray, alpha: float, n_clusters: int,
                 rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Copy population labels with probability ``alpha``, else pick one of the other K-1.

    ``size`` draws that many independent rows; otherwise a single vector.
    """
    if not (1.0 / n_clusters - 1e-12 <= alpha <= 1.0):
        raise ValueError(f"alpha must lie in [1/K, 1] = [{1 / n_clusters:.4g}, 1], got {alpha}")
    S = np.asarray(S)
    shape = S.shape if size is None else (size,) + S.shape
    keep = rng.random(shape) < alpha
    shift = rng.integers(1, n_clusters, size=shape)
    return np.where(keep, S, (S + shift) % n_clusters)


@dataclass
class SimPlan:
    n_subjects: int = 9
    n_channels: int = 100
    n_clusters: int = 4
    alpha: float = 0.75
    duration: float = 50.0
    main_rate: float = 0.05
    off_mean: float = 5.0
    off_sd: float = 1.0
    segment_ms: float = 1024.0
    sync_switching: bool = True
    seed: int = 0
    S: np.ndarray | None = None

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if not (1.0 / self.n_clusters - 1e-12 <= self.alpha <= 1.0):
            raise ValueError(f"alpha {self.alpha} outside [1/K, 1]")
        if self.S is None:
            self.S = balanced_labels(self.n_channels, self.n_clusters)
        self.S = np.asarray(self.S, dtype=np.int64)
        if self.S.shape != (self.n_channels,):
            raise ValueError("S must have one label per channel")
        if self.S.min() < 0 or self.S.max() >= self.n_clusters:
            raise ValueError("population labels must lie in 0..K-1")


def balanced_labels(p: int, K: int) -> np.ndarray:
    """Contiguous, as-equal-as-possible blocks: ``[0, 0, .., 1, 1, .., K-1]``."""
    return (np.arange(p) * K) // p


@dataclass
class SegmentedRecording:
    """Fixed-length multichannel segments of one subject.

    ``data`` has shape ``(n_segments, p, segment_length)``; ``segment_index``
    holds the original position of each retained segment (gaps allowed).
    """

    data: np.ndarray
    fs: float
    subject: int | str = 0
    segment_index: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError("segment data must be (n_segments, p, segment_length)")
        if self.segment_index is None:
            self.segment_index = np.arange(self.data.shape[0])

    @property
    def n_segments(self) -> int:
        return self.data.shape[0]

    @property
    def n_channels(self) -> int:
        return self.data.shape[1]

    @property
    def segment_length(self) -> int:
        return self.data.shape[2]


@dataclass
class GroundTruth:
    S: np.ndarray
    C: np.ndarray
    alpha: float
    # switches[i][j] is a list of (start_s, stop_s, state) with state in {"main", "off"}
    switches: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "S": self.S.tolist(),
            "C": self.C.tolist(),
            "alpha": self.alpha,
            "switches": self.switches,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "GroundTruth":
        return cls(np.asarray(obj["S"]), np.asarray(obj["C"]), float(obj["alpha"]),
                   obj.get("switches", []))


def switch_timeline(duration: float, rate: float, off_mean: float, off_sd: float,
                    rng: np.random.Generator) -> list[tuple[float, float, str]]:
    """Alternate main (exponential dwell) and off (normal dwell, truncated at 0) until ``duration``."""
    t, state, out = 0.0, "main", []
    while t < duration:
        if state == "main":
            dwell = rng.exponential(1.0 / rate)
        else:
            dwell = max(rng.normal(off_mean, off_sd), 0.0)
        stop = min(t + dwell, duration)
        if stop > t:
            out.append((t, stop, state))
        t = stop
        state = "off" if state == "main" else "main"
    return out


def _mask_from_timeline(timeline, n_samples: int, fs: float) -> np.ndarray:
    """Boolean mask, True where the off state is active."""
    off = np.zeros(n_samples, dtype=bool)
    for start, stop, state in timeline:
        if state == "off":
            off[int(round(start * fs)):int(round(stop * fs))] = True
    return off


def simulate_piecewise(plan: SimPlan, main: SpectralState, off: SpectralState
                       ) -> tuple[list[SegmentedRecording], GroundTruth]:
    """Simulate every subject of ``plan``; deterministic in ``plan.seed``."""
    K = plan.n_clusters
    if main.n_clusters < K or off.n_clusters < K:
        raise ValueError(f"spectral states must define {K} clusters")
    if main.fs != off.fs:
        raise ValueError("main and off states must share a sampling rate")
    fs = main.fs
    seg_len = int(round(plan.segment_ms * fs / 1000.0))
    n_samples = int(round(plan.duration * fs))
    n_seg = n_samples // seg_len
    if n_seg < 1:
        raise ValueError(f"duration {plan.duration}s is shorter than one {plan.segment_ms} ms segment")

    label_rng = np.random.default_rng(np.random.SeedSequence(plan.seed, spawn_key=(_LABEL_STREAM,)))
    C = plant_labels(plan.S, plan.alpha, K, label_rng, size=plan.n_subjects)

    recordings, switches = [], []
    for i in range(plan.n_subjects):
        data = np.empty((n_seg, plan.n_channels, seg_len))
        shared = {}
        if plan.sync_switching:
            for k in range(K):
                rng = np.random.default_rng(np.random.SeedSequence(plan.seed, spawn_key=(i, _LABEL_STREAM, k)))
                shared[k] = switch_timeline(plan.duration, plan.main_rate, plan.off_mean, plan.off_sd, rng)
        subj_switches = []
        for j in range(plan.n_channels):
            rng = np.random.default_rng(np.random.SeedSequence(plan.seed, spawn_key=(i, j)))
            k = int(C[i, j])
            if plan.sync_switching:
                timeline = shared[k]
            else:
                timeline = switch_timeline(plan.duration, plan.main_rate, plan.off_mean, plan.off_sd, rng)
            x_main = simulate_ar2_mixture(main, k, n_samples, rng)
            x_off = simulate_ar2_mixture(off, k, n_samples, rng)
            x = np.where(_mask_from_timeline(timeline, n_samples, fs), x_off, x_main)
            data[:, j, :] = x[: n_seg * seg_len].reshape(n_seg, seg_len)
            subj_switches.append([[round(a, 6), round(b, 6), s] for a, b, s in timeline])
        recordings.append(SegmentedRecording(data, fs, subject=i))
        switches.append(subj_switches)
    return recordings, GroundTruth(plan.S.copy(), C, plan.alpha, switches)
