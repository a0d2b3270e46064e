"""Row-selective sparse fine-tuning at desk scale."""

from ._spruft import (
    ConfigError,
    ContractError,
    DimensionError,
    DivergenceError,
    IoError,
    Model,
    magnitude_importance,
    pair_rank_probability,
    qm_taylor_importance,
    quantiles_mean,
    run_cli,
    select_top_r,
    spsa_moments,
    taylor_importance,
)

__all__ = [
    "ConfigError",
    "ContractError",
    "DimensionError",
    "DivergenceError",
    "IoError",
    "Model",
    "magnitude_importance",
    "pair_rank_probability",
    "qm_taylor_importance",
    "quantiles_mean",
    "run_cli",
    "select_top_r",
    "spsa_moments",
    "taylor_importance",
]
