"""Federated harmonisation simulator.

Sites train a shared three-part network (feature extractor, label head,
domain head) and share only weights plus per-feature Gaussian summaries of
their extracted features; an adversarial confusion loss pushes the features
towards carrying no site information.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ConfigError,
    DimensionError,
    DivergenceError,
    HarmsimError,
    InsufficientDataError,
    OracleError,
    ParseError,
    ProtocolError,
)
from .federation import (  # noqa: E402
    AggregationStrategy,
    Hyper,
    TrainingMode,
    aggregate_fedavg,
    aggregate_fedequal,
    method_preset,
    run_protocol,
)
from .model import ModelParams, NetworkSpec, init_params, predict  # noqa: E402
from .synthdata import default_benchmark, generate_multisite  # noqa: E402
