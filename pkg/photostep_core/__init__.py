# photostep_core/__init__.py

# Make exceptions available directly
from .exceptions import (
    ConfigError,
    ConvergenceError,
    DegenerateConfigurationError,
    InvalidConfigurationError,
    PhotostepError,
    TraceFormatError,
    ValidationError,
)

# Public API functions (via the api.py facade)
from .api import (
    RunManifest,
    Settings,
    analyze_traces,
    compute_metrics,
    estimate_hyperparams,
    load_hyperparams,
    load_settings,
    simulate_pool,
)

# --- Core types and operations ---
from .config import CONFIG_DIR, CONFIG_FILE, DEFAULT_CONFIG
from .metrics import FramewiseReport, framewise_report, param_abs_errors, rmse_intensity
from .model import ChangePointState, Hyperparams, IntensityParams, Trace
from .proposal import ProposalDistribution, build_proposal
from .sampler import ChainConfig, ChainSample, PosteriorSummary, analyze, check_convergence, run_chain
from .simulator import GroundTruth, SimConfig, simulate_trace

__all__ = [
    # Constants from config.py
    "CONFIG_DIR",
    "CONFIG_FILE",
    "DEFAULT_CONFIG",
    # Exceptions
    "ConfigError",
    "ConvergenceError",
    "DegenerateConfigurationError",
    "InvalidConfigurationError",
    "PhotostepError",
    "TraceFormatError",
    "ValidationError",
    # API functions (from api.py facade)
    "RunManifest",
    "Settings",
    "analyze_traces",
    "compute_metrics",
    "estimate_hyperparams",
    "load_hyperparams",
    "load_settings",
    "simulate_pool",
    # Model and sampler
    "ChainConfig",
    "ChainSample",
    "ChangePointState",
    "Hyperparams",
    "IntensityParams",
    "PosteriorSummary",
    "ProposalDistribution",
    "Trace",
    "analyze",
    "build_proposal",
    "check_convergence",
    "run_chain",
    # Simulation and evaluation
    "FramewiseReport",
    "GroundTruth",
    "SimConfig",
    "framewise_report",
    "param_abs_errors",
    "rmse_intensity",
    "simulate_trace",
]
