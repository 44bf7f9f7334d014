"""Shared helpers for the test suite."""

import numpy as np

from kvlatent.rng import make_generator


def gen(seed: int) -> np.random.Generator:
    return make_generator(seed)


def random_orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def random_psd(rng: np.random.Generator, n: int, cond: float = 10.0) -> np.ndarray:
    """Symmetric PSD matrix with eigenvalues spanning [1/cond, 1]."""
    q = random_orthogonal(rng, n)
    eigs = np.geomspace(1.0, 1.0 / cond, n)
    return (q * eigs) @ q.T


def anisotropic_batches(rng, n_batches, tokens, dim, cond=900.0):
    """Calibration batches whose rows follow an anisotropic Gaussian.

    The population covariance has condition number `cond`; the empirical
    second moment lands close to it given enough rows.
    """
    from kvlatent.calibration import CalibrationBatch

    q = random_orthogonal(rng, dim)
    scales = np.geomspace(1.0, 1.0 / np.sqrt(cond), dim)
    mix = q * scales
    return [
        CalibrationBatch(0, rng.standard_normal((tokens, dim)) @ mix.T)
        for _ in range(n_batches)
    ]


def covariance_of(batches):
    from kvlatent import calibration

    acc = calibration.CovarianceAccumulator(batches[0].x.shape[1])
    for batch in batches:
        acc = calibration.accumulate(acc, batch)
    return calibration.finalize(acc)
