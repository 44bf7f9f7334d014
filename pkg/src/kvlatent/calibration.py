"""Calibration-batch ingestion and covariance estimation.

The second moment is accumulated uncentered and unnormalized per batch:
C = (1/N) sum_b X_b^T X_b over the N batches of one layer. Whitening and
the rank scheduler both rely on the identity between the batch-averaged
activation error and the covariance-weighted weight error, which holds only
for this raw form; the textbook centered covariance (subtract the empirical
mean, optionally 1/(N-1)) is deliberately not used anywhere in the pipeline.
"""

from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .errors import ValidationError

WEIGHTING_SQRT = "sqrtC"
WEIGHTING_COV = "C"
WEIGHTINGS = (WEIGHTING_SQRT, WEIGHTING_COV)


@dataclass(frozen=True)
class CalibrationBatch:
    """One batch of layer-input activations, shape (tokens, dim)."""

    layer: int
    x: np.ndarray

    def __post_init__(self):
        x = linalg.as_matrix(self.x, "batch activations")
        if x.shape[0] < 1:
            raise ValidationError("a calibration batch needs at least one token")
        object.__setattr__(self, "x", x)


@dataclass(frozen=True)
class CovarianceAccumulator:
    """Running uncentered second-moment sum over a layer's batches."""

    dim: int
    batch_count: int = 0
    sum_xtx: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.dim < 1:
            raise ValidationError("dim must be positive")
        if self.batch_count < 0:
            raise ValidationError("batch_count cannot be negative")
        s = self.sum_xtx
        if s is None:
            s = np.zeros((self.dim, self.dim))
        s = linalg.as_matrix(s, "sum_xtx")
        if s.shape != (self.dim, self.dim):
            raise ValidationError(
                f"sum_xtx shape {s.shape} does not match dim {self.dim}"
            )
        object.__setattr__(self, "sum_xtx", s)


def accumulate(acc: CovarianceAccumulator, batch: CalibrationBatch) -> CovarianceAccumulator:
    """Fold one batch into the accumulator, returning a new accumulator."""
    if batch.x.shape[1] != acc.dim:
        raise ValidationError(
            f"batch dim {batch.x.shape[1]} does not match accumulator dim {acc.dim}"
        )
    update = batch.x.T @ batch.x
    update = (update + update.T) / 2.0
    return CovarianceAccumulator(acc.dim, acc.batch_count + 1, acc.sum_xtx + update)


def merge(a: CovarianceAccumulator, b: CovarianceAccumulator) -> CovarianceAccumulator:
    """Combine two accumulators built over disjoint batch shards."""
    if a.dim != b.dim:
        raise ValidationError(f"dimension mismatch: {a.dim} vs {b.dim}")
    return CovarianceAccumulator(
        a.dim, a.batch_count + b.batch_count, a.sum_xtx + b.sum_xtx
    )


def finalize(acc: CovarianceAccumulator) -> np.ndarray:
    """Average the accumulated sum into the covariance matrix."""
    if acc.batch_count < 1:
        raise ValidationError("no calibration data: zero batches accumulated")
    c = acc.sum_xtx / acc.batch_count
    return (c + c.T) / 2.0


@dataclass(frozen=True)
class ShrinkageParams:
    """Ridge blend (1 - alpha) * base + alpha * lam * I keeping the whitener
    invertible. lam may be the string "auto", which resolves to the mean
    eigenvalue of the base operator (trace / dim)."""

    alpha: float = 0.01
    lam: float | str = "auto"

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValidationError(f"alpha must be in (0, 1), got {self.alpha}")
        if isinstance(self.lam, str):
            if self.lam != "auto":
                raise ValidationError(f"lam must be positive or 'auto', got {self.lam!r}")
        elif not self.lam > 0.0:
            raise ValidationError(f"lam must be positive, got {self.lam}")


def resolve_lambda(base: np.ndarray, params: ShrinkageParams) -> float:
    """Concrete ridge scale for `base` (the operator being shrunk).

    "auto" is trace(base) / dim; a zero-trace base falls back to 1.0 so the
    resolved value is always positive.
    """
    if params.lam != "auto":
        return float(params.lam)
    mean_eig = float(np.trace(base)) / base.shape[0]
    return mean_eig if mean_eig > 0.0 else 1.0


def shrunk_sqrt(c, params: ShrinkageParams) -> np.ndarray:
    """(1 - alpha) * sqrt(C) + alpha * lam * I. Minimum eigenvalue >= alpha * lam."""
    root = linalg.sqrt_psd(c)
    lam = resolve_lambda(root, params)
    return (1.0 - params.alpha) * root + params.alpha * lam * np.eye(root.shape[0])


def whitening_operator(c, params: ShrinkageParams, weighting: str = WEIGHTING_SQRT) -> np.ndarray:
    """The shrunk operator that multiplies weights before factorization.

    weighting "sqrtC" (default) shrinks the PSD square root of C; "C" uses
    the covariance itself, shrunk the same way with its own auto scale.
    """
    if weighting == WEIGHTING_SQRT:
        return shrunk_sqrt(c, params)
    if weighting == WEIGHTING_COV:
        c = linalg.as_matrix(c, "c")
        sym = (c + c.T) / 2.0
        lam = resolve_lambda(sym, params)
        return (1.0 - params.alpha) * sym + params.alpha * lam * np.eye(sym.shape[0])
    raise ValidationError(f"unknown weighting {weighting!r}; expected one of {WEIGHTINGS}")
