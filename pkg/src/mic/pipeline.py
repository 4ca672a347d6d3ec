"""Config-driven glue between the stages, shared by the CLI and the test studies."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .model import MicData, PriorConfig
from .preprocess import EpochConfig, SubjectFeatures, preprocess_subject
from .sampler import ChainConfig, ChainTrace, run_chain
from .selection import SearchState, select_dk
from .simulate import GroundTruth, SegmentedRecording, SimPlan, default_states, simulate_piecewise

logger = logging.getLogger(__name__)


@dataclass
class SimulationConfig:
    plan: SimPlan = field(default_factory=SimPlan)
    fs: float = 250.0
    radius: float = 0.95
    off_shift: int = 1


@dataclass
class SelectionConfig:
    mode: str = "surrogate"
    max_d: int = 6
    max_k: int = 12
    budget: int = 60
    covariance: str = "diag"
    inner_iterations: int = 500
    inner_burnin: int = 200


@dataclass
class RunConfig:
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    epochs: EpochConfig = field(default_factory=EpochConfig)
    priors: PriorConfig = field(default_factory=PriorConfig)
    chain: ChainConfig = field(default_factory=ChainConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    K: int = 4

    @classmethod
    def from_dict(cls, obj: dict | None) -> "RunConfig":
        obj = dict(obj or {})
        unknown = set(obj) - {"simulation", "epochs", "priors", "chain", "selection", "model"}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        sim = dict(obj.get("simulation") or {})
        extras = {k: sim.pop(k) for k in ("fs", "radius", "off_shift") if k in sim}
        _check_keys(SimPlan, sim, "simulation")
        model = dict(obj.get("model") or {})
        return cls(
            simulation=SimulationConfig(SimPlan(**sim), **extras),
            epochs=_build(EpochConfig, obj.get("epochs"), "epochs"),
            priors=PriorConfig.from_dict(_checked(PriorConfig, obj.get("priors"), "priors")),
            chain=_build(ChainConfig, obj.get("chain"), "chain"),
            selection=_build(SelectionConfig, obj.get("selection"), "selection"),
            K=int(model.get("K", 4)),
        )

    def to_dict(self) -> dict:
        plan = asdict(self.simulation.plan)
        plan["S"] = None if plan["S"] is None else np.asarray(plan["S"]).tolist()
        epochs = asdict(self.epochs)
        epochs["band"] = list(epochs["band"])
        return {
            "simulation": {**plan, "fs": self.simulation.fs, "radius": self.simulation.radius,
                           "off_shift": self.simulation.off_shift},
            "epochs": epochs,
            "priors": self.priors.to_dict(),
            "chain": self.chain.to_dict(),
            "selection": asdict(self.selection),
            "model": {"K": self.K},
        }


def _check_keys(cls, obj, section):
    allowed = {f.name for f in fields(cls)}
    bad = set(obj) - allowed
    if bad:
        raise ValueError(f"unknown keys in [{section}]: {sorted(bad)}")


def _checked(cls, obj, section):
    obj = dict(obj or {})
    _check_keys(cls, obj, section)
    return obj


def _build(cls, obj, section):
    return cls(**_checked(cls, obj, section))


# ---------------------------------------------------------------- stages

def simulate(cfg: SimulationConfig, seed: int | None = None) -> tuple[list[SegmentedRecording], GroundTruth]:
    plan = cfg.plan if seed is None else SimPlan(**{**asdict(cfg.plan), "seed": seed})
    main, off = default_states(plan.n_clusters, cfg.fs, cfg.radius, cfg.off_shift)
    return simulate_piecewise(plan, main, off)


def preprocess(recordings: list[SegmentedRecording], cfg: EpochConfig) -> list[SubjectFeatures]:
    return [preprocess_subject(rec, cfg) for rec in recordings]


def mic_data(features: list[SubjectFeatures], d: int) -> MicData:
    return MicData.from_subjects([sf.X(d) for sf in features])


def chain_seeds(seed: int, n_chains: int) -> list[int]:
    """Independent per-chain seeds spawned from the run seed."""
    return [int(s.generate_state(1, np.uint64)[0]) for s in np.random.SeedSequence(seed).spawn(n_chains)]


def fit(data: MicData, K: int, priors: PriorConfig, chain: ChainConfig,
        n_chains: int = 1) -> list[ChainTrace]:
    """One chain runs at ``chain.seed``; several chains get spawned seeds."""
    seeds = [chain.seed] if n_chains == 1 else chain_seeds(chain.seed, n_chains)
    traces = []
    for c, s in enumerate(seeds):
        logger.info("chain %d/%d (seed %d)", c + 1, len(seeds), s)
        tr = run_chain(data, K, priors, ChainConfig(**{**chain.to_dict(), "seed": s}))
        tr.extra["seed"] = s
        traces.append(tr)
    return traces


def select(features: list[SubjectFeatures], cfg: SelectionConfig, chain: ChainConfig,
           priors: PriorConfig, seed: int = 0) -> tuple[int, int, SearchState]:
    return select_dk(lambda d: mic_data(features, d), cfg.max_d, mode=cfg.mode, max_k=cfg.max_k,
                     budget=cfg.budget, seed=seed, covariance=cfg.covariance,
                     chain=ChainConfig(**{**chain.to_dict(), "n_iterations": cfg.inner_iterations,
                                          "n_burnin": cfg.inner_burnin}),
                     priors=priors)
