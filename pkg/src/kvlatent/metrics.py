"""Evaluable losses over logit sequences: cross-entropy, temperature KD, and
their weighted combination. Natural-log units throughout; the same
temperature feeds both the target probabilities and the distillation term
unless callers pass different values.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

# Student probabilities are clamped here before the log so a fully collapsed
# distribution yields a large finite penalty instead of -inf.
_P_FLOOR = 1e-300


@dataclass(frozen=True)
class LogitSequence:
    """Per-position logits (T x V) with optional next-token targets."""

    logits: np.ndarray
    targets: np.ndarray | None = None

    def __post_init__(self):
        logits = np.asarray(self.logits, dtype=np.float64)
        if logits.ndim != 2:
            raise ValidationError(f"logits must be 2-D, got shape {logits.shape}")
        if not np.all(np.isfinite(logits)):
            raise ValidationError("logits contain non-finite entries")
        object.__setattr__(self, "logits", logits)
        if self.targets is not None:
            targets = np.asarray(self.targets)
            if targets.shape != (logits.shape[0],):
                raise ValidationError(
                    f"targets shape {targets.shape} does not match positions "
                    f"{logits.shape[0]}"
                )
            if not np.issubdtype(targets.dtype, np.integer):
                raise ValidationError("targets must be integers")
            if np.any(targets < 0) or np.any(targets >= logits.shape[1]):
                raise ValidationError("targets out of vocabulary range")
            object.__setattr__(self, "targets", targets.copy())


@dataclass(frozen=True)
class LossParams:
    tau: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if not self.tau > 0.0:
            raise ValidationError("tau must be positive")
        if self.beta < 0.0:
            raise ValidationError("beta cannot be negative")


def _check_tau(tau: float) -> float:
    if not tau > 0.0:
        raise ValidationError("tau must be positive")
    return float(tau)


def _log_softmax(logits: np.ndarray, tau: float) -> np.ndarray:
    z = logits / tau
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(row, tau: float) -> np.ndarray:
    """Temperature softmax of one logit row, max-subtracted for stability."""
    tau = _check_tau(tau)
    row = np.asarray(row, dtype=np.float64)
    if row.ndim != 1 or row.size == 0:
        raise ValidationError("row must be a non-empty 1-D array")
    if not np.all(np.isfinite(row)):
        raise ValidationError("row contains non-finite entries")
    return np.exp(_log_softmax(row, tau))


def cross_entropy(student: LogitSequence, tau: float = 1.0) -> float:
    """Mean negative log probability of the targets at temperature tau."""
    tau = _check_tau(tau)
    if student.targets is None:
        raise ValidationError("cross_entropy requires targets")
    logp = _log_softmax(student.logits, tau)
    picked = logp[np.arange(student.logits.shape[0]), student.targets]
    return float(-picked.mean())


def kd_loss(teacher: LogitSequence, student: LogitSequence, tau: float = 1.0) -> float:
    """Position-averaged KL(teacher || student), both at temperature tau."""
    tau = _check_tau(tau)
    if teacher.logits.shape != student.logits.shape:
        raise ValidationError(
            f"shape mismatch: {teacher.logits.shape} vs {student.logits.shape}"
        )
    log_pt = _log_softmax(teacher.logits, tau)
    log_ps = np.maximum(_log_softmax(student.logits, tau), np.log(_P_FLOOR))
    pt = np.exp(log_pt)
    terms = np.where(pt > 0.0, pt * (log_pt - log_ps), 0.0)
    return float(terms.sum(axis=-1).mean())


def total_loss(ce: float, kd: float, params: LossParams) -> float:
    """Combined objective: ce + beta * tau^2 * kd."""
    if not (np.isfinite(ce) and np.isfinite(kd)):
        raise ValidationError("loss terms must be finite")
    return float(ce + params.beta * params.tau**2 * kd)
