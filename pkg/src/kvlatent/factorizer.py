"""Whitened low-rank factorization and the GQA-to-latent weight mapping.

A grouped projection is first replicated to full head width, then factorized
against the layer's whitening operator S: factor S @ W, truncate to rank r,
and unwhiten the left factor, giving

    w_a = S^-1 U_r Sigma_r        (down-projection, D x r)
    w_b = V_r^T                   (up-projection, r x n_heads*head_dim)

so that w_a @ w_b is the best rank-r approximation of W in the metric
||S (W - W_hat)||_F. With S = I this reduces to plain SVD truncation. The
latent width that leaves the per-token cache unchanged is exactly the
grouped width n_groups * head_dim, at which the factorization is exact
because the replicated weight has that rank.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import linalg
from .calibration import CalibrationBatch
from .errors import NumericalError, ValidationError

# Whitener eigenvalues below this fraction of the largest are treated as
# singular; shrinkage keeps real pipelines well away from it.
_WHITENER_FLOOR_REL = 1e-12


@dataclass(frozen=True)
class GqaLayer:
    """Weight bundle of one grouped-query attention layer."""

    d_model: int
    n_heads: int
    head_dim: int
    n_groups: int
    w_q: np.ndarray
    w_k_g: np.ndarray
    w_v_g: np.ndarray

    def __post_init__(self):
        if self.n_heads * self.head_dim != self.d_model:
            raise ValidationError(
                f"n_heads * head_dim must equal d_model: "
                f"{self.n_heads} * {self.head_dim} != {self.d_model}"
            )
        if self.n_groups < 1 or self.n_groups > self.n_heads:
            raise ValidationError("n_groups must lie in [1, n_heads]")
        if self.n_heads % self.n_groups != 0:
            raise ValidationError(
                f"n_groups {self.n_groups} does not divide n_heads {self.n_heads}"
            )
        wq = linalg.as_matrix(self.w_q, "w_q")
        wk = linalg.as_matrix(self.w_k_g, "w_k_g")
        wv = linalg.as_matrix(self.w_v_g, "w_v_g")
        if wq.shape != (self.d_model, self.n_heads * self.head_dim):
            raise ValidationError(f"w_q has shape {wq.shape}")
        grouped = (self.d_model, self.n_groups * self.head_dim)
        if wk.shape != grouped or wv.shape != grouped:
            raise ValidationError(
                f"grouped projections must have shape {grouped}, "
                f"got {wk.shape} and {wv.shape}"
            )
        object.__setattr__(self, "w_q", wq)
        object.__setattr__(self, "w_k_g", wk)
        object.__setattr__(self, "w_v_g", wv)

    @property
    def grouped_width(self) -> int:
        return self.n_groups * self.head_dim


class FactorPair(NamedTuple):
    """Down/up projection pair whose product approximates one weight."""

    w_a: np.ndarray
    w_b: np.ndarray


@dataclass(frozen=True)
class MlaFactors:
    """Latent factor bundle for one converted layer."""

    w_a_k: np.ndarray
    w_b_k: np.ndarray
    w_a_v: np.ndarray
    w_b_v: np.ndarray
    r_k: int
    r_v: int

    def __post_init__(self):
        wak = linalg.as_matrix(self.w_a_k, "w_a_k")
        wbk = linalg.as_matrix(self.w_b_k, "w_b_k")
        wav = linalg.as_matrix(self.w_a_v, "w_a_v")
        wbv = linalg.as_matrix(self.w_b_v, "w_b_v")
        if wak.shape[1] != self.r_k or wbk.shape[0] != self.r_k:
            raise ValidationError("K factors do not match r_k")
        if wav.shape[1] != self.r_v or wbv.shape[0] != self.r_v:
            raise ValidationError("V factors do not match r_v")
        if wak.shape[0] != wav.shape[0]:
            raise ValidationError("K and V down-projections disagree on d_model")
        if wbk.shape[1] != wbv.shape[1]:
            raise ValidationError("K and V up-projections disagree on output width")
        for name, arr in (("w_a_k", wak), ("w_b_k", wbk), ("w_a_v", wav), ("w_b_v", wbv)):
            object.__setattr__(self, name, arr)

    @property
    def d_model(self) -> int:
        return self.w_a_k.shape[0]

    @property
    def out_width(self) -> int:
        return self.w_b_k.shape[1]


@dataclass(frozen=True)
class FactorizationReport:
    """Residuals of one factorization.

    activation_residual_sq needs calibration batches and is filled in by the
    evaluation stage; it stays None straight out of the factorizer.
    """

    weight_residual_sq: float
    whitened_residual_sq: float
    rank_used: int
    activation_residual_sq: float | None = None


def replicate_groups(w_g, n_heads: int, n_groups: int, head_dim: int) -> np.ndarray:
    """Expand a grouped projection to full head width.

    Head h receives the column block of group floor(h * n_groups / n_heads),
    so consecutive runs of n_heads/n_groups heads share one group block.
    """
    w_g = linalg.as_matrix(w_g, "w_g")
    if n_groups < 1 or n_heads < 1 or head_dim < 1:
        raise ValidationError("head counts and head_dim must be positive")
    if n_heads % n_groups != 0:
        raise ValidationError(f"n_groups {n_groups} does not divide n_heads {n_heads}")
    if w_g.shape[1] != n_groups * head_dim:
        raise ValidationError(
            f"grouped weight has {w_g.shape[1]} columns, expected {n_groups * head_dim}"
        )
    out = np.empty((w_g.shape[0], n_heads * head_dim))
    for h in range(n_heads):
        g = (h * n_groups) // n_heads
        out[:, h * head_dim : (h + 1) * head_dim] = w_g[
            :, g * head_dim : (g + 1) * head_dim
        ]
    return out


def kv_parity_rank(n_groups: int, head_dim: int) -> int:
    """Latent rank matching the grouped per-token KV width."""
    if n_groups < 1 or head_dim < 1:
        raise ValidationError("n_groups and head_dim must be positive")
    return n_groups * head_dim


def whitened_error_sq(whitener, w, w_hat) -> float:
    """||whitener @ (w - w_hat)||_F^2."""
    whitener = linalg.as_matrix(whitener, "whitener")
    w = linalg.as_matrix(w, "w")
    w_hat = linalg.as_matrix(w_hat, "w_hat")
    if w.shape != w_hat.shape:
        raise ValidationError(f"shape mismatch: {w.shape} vs {w_hat.shape}")
    return linalg.frobenius_norm_sq(whitener @ (w - w_hat))


def care_factorize(w, whitener, r: int) -> tuple[FactorPair, FactorizationReport]:
    """Rank-r factorization of w minimizing the whitened residual.

    The whitener must be symmetric positive definite (shrinkage-regularized
    upstream); its inverse maps the truncated factors back to weight space.
    """
    w = linalg.as_matrix(w, "w")
    whitener = linalg.as_matrix(whitener, "whitener")
    if whitener.shape != (w.shape[0], w.shape[0]):
        raise ValidationError(
            f"whitener shape {whitener.shape} does not match weight rows {w.shape[0]}"
        )
    p = min(w.shape)
    if not 1 <= r <= p:
        raise ValidationError(f"rank {r} out of range [1, {p}]")

    eig = linalg.sym_eig(whitener)
    lam_max = max(float(eig.eigenvalues[0]), 0.0)
    if lam_max <= 0.0 or float(eig.eigenvalues[-1]) <= _WHITENER_FLOOR_REL * lam_max:
        raise NumericalError("singular whitener: apply shrinkage before factorizing")
    unwhiten = (eig.eigenvectors / eig.eigenvalues) @ eig.eigenvectors.T
    unwhiten = (unwhiten + unwhiten.T) / 2.0

    top = linalg.truncate_svd(linalg.svd(whitener @ w), r)
    w_a = unwhiten @ (top.u * top.singular_values)
    w_b = top.v_t.copy()
    w_hat = w_a @ w_b
    report = FactorizationReport(
        weight_residual_sq=linalg.frobenius_norm_sq(w - w_hat),
        whitened_residual_sq=whitened_error_sq(whitener, w, w_hat),
        rank_used=r,
    )
    return FactorPair(w_a, w_b), report


def plain_factorize(w, r: int) -> tuple[FactorPair, FactorizationReport]:
    """Rank-r factorization minimizing the plain weight residual (identity whitener)."""
    w = linalg.as_matrix(w, "w")
    return care_factorize(w, np.eye(w.shape[0]), r)


def activation_residual(batches: list[CalibrationBatch], w, w_hat) -> float:
    """Batch-averaged squared activation error (1/N) sum ||X_b w - X_b w_hat||_F^2."""
    if not batches:
        raise ValidationError("empty batch list")
    w = linalg.as_matrix(w, "w")
    w_hat = linalg.as_matrix(w_hat, "w_hat")
    if w.shape != w_hat.shape:
        raise ValidationError(f"shape mismatch: {w.shape} vs {w_hat.shape}")
    total = 0.0
    for batch in batches:
        if batch.x.shape[1] != w.shape[0]:
            raise ValidationError(
                f"batch dim {batch.x.shape[1]} does not match weight rows {w.shape[0]}"
            )
        total += linalg.frobenius_norm_sq(batch.x @ w - batch.x @ w_hat)
    return total / len(batches)


def join_weights(w_b_k, w_b_v) -> np.ndarray:
    """Block-diagonal join of the two up-projections.

    Multiplying the concatenated latents by the joined matrix reproduces the
    concatenated K and V reconstructions in one product.
    """
    w_b_k = linalg.as_matrix(w_b_k, "w_b_k")
    w_b_v = linalg.as_matrix(w_b_v, "w_b_v")
    if w_b_k.shape[1] != w_b_v.shape[1]:
        raise ValidationError(
            f"output widths differ: {w_b_k.shape[1]} vs {w_b_v.shape[1]}"
        )
    rk, cols = w_b_k.shape
    rv = w_b_v.shape[0]
    joined = np.zeros((rk + rv, 2 * cols))
    joined[:rk, :cols] = w_b_k
    joined[rk:, cols:] = w_b_v
    return joined


def ablate_singular_value(w, i: int) -> np.ndarray:
    """Zero the i-th largest singular value (1-based) and reconstruct."""
    w = linalg.as_matrix(w, "w")
    res = linalg.svd(w)
    p = int(res.singular_values.shape[0])
    if not 1 <= i <= p:
        raise ValidationError(f"index {i} out of range [1, {p}]")
    damped = res.singular_values.copy()
    damped[i - 1] = 0.0
    return (res.u * damped) @ res.v_t


def convert_layer(
    layer: GqaLayer, whitener, r_k: int, r_v: int
) -> tuple[MlaFactors, FactorizationReport, FactorizationReport]:
    """Replicate the grouped projections and factorize K and V independently."""
    w_k = replicate_groups(layer.w_k_g, layer.n_heads, layer.n_groups, layer.head_dim)
    w_v = replicate_groups(layer.w_v_g, layer.n_heads, layer.n_groups, layer.head_dim)
    (pair_k, report_k) = care_factorize(w_k, whitener, r_k)
    (pair_v, report_v) = care_factorize(w_v, whitener, r_v)
    factors = MlaFactors(
        w_a_k=pair_k.w_a,
        w_b_k=pair_k.w_b,
        w_a_v=pair_v.w_a,
        w_b_v=pair_v.w_b,
        r_k=r_k,
        r_v=r_v,
    )
    return factors, report_k, report_v
