"""Covariance-aware low-rank KV conversion toolkit.

Pipeline: accumulate activation covariance from calibration batches, whiten
the grouped key/value projections, allocate a global rank budget by greedy
water-filling over the whitened spectra, factorize each projection into
down/up latent factors, and verify the converted layer against the source
with toy attention forward passes and drift/loss metrics.
"""

__version__ = "0.1.0"

from .calibration import (
    CalibrationBatch,
    CovarianceAccumulator,
    ShrinkageParams,
    accumulate,
    finalize,
    merge,
    shrunk_sqrt,
    whitening_operator,
)
from .factorizer import (
    FactorizationReport,
    FactorPair,
    GqaLayer,
    MlaFactors,
    care_factorize,
    convert_layer,
    kv_parity_rank,
    plain_factorize,
    replicate_groups,
)
from .scheduler import RankProfile, SpectrumTable, uniform_profile, waterfill

__all__ = [
    "CalibrationBatch",
    "CovarianceAccumulator",
    "FactorPair",
    "FactorizationReport",
    "GqaLayer",
    "MlaFactors",
    "RankProfile",
    "ShrinkageParams",
    "SpectrumTable",
    "accumulate",
    "care_factorize",
    "convert_layer",
    "finalize",
    "kv_parity_rank",
    "merge",
    "plain_factorize",
    "replicate_groups",
    "shrunk_sqrt",
    "uniform_profile",
    "waterfill",
    "whitening_operator",
]
