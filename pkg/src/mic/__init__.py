"""Multilevel clustering of spectrally synchronized channels.

Pipeline: segment spectra -> total variation dissimilarities -> normalized
Laplacian embedding -> three-level Bayesian mixture (Gibbs) -> (d, K)
selection by BIC -> posterior summaries.
"""

from .model import MicData, MicState, PriorConfig, log_joint
from .preprocess import EpochConfig, preprocess_subject
from .sampler import ChainConfig, ChainTrace, run_chain
from .selection import select_dk
from .simulate import SimPlan, default_states, simulate_piecewise
from .summaries import dahl_estimate, entropy_map, score_accuracy, summarize_trace, variance_summary

__version__ = "0.1.0"
