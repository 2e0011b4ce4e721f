"""Hybrid attention/SSM toolkit.

Thin python surface over the C++ core: recency-ratio analysis, selective
state-space blocks, head-replacement models, cache accounting, and the
HashHop / MQAR synthetic tasks.
"""

from recurformer._core import (
    ConfigError,
    ContractError,
    DataError,
    HashHopInstance,
    MQARInstance,
    MambaBlock,
    Model,
    cache_fraction,
    generate_hashhop,
    generate_mqar,
    mamba_state_element_count,
    recency_ratio,
    softmax_rows,
)

__all__ = [
    "ConfigError",
    "ContractError",
    "DataError",
    "HashHopInstance",
    "MQARInstance",
    "MambaBlock",
    "Model",
    "cache_fraction",
    "generate_hashhop",
    "generate_mqar",
    "mamba_state_element_count",
    "recency_ratio",
    "softmax_rows",
]

__version__ = "0.1.0"
