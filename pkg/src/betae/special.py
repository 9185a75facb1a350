"""Beta-distribution special functions, vectorised over numpy arrays.

log-gamma, digamma and trigamma use upward recurrence into the asymptotic
regime followed by a truncated Stirling-type series. Everything else
(log-beta, densities, entropy, KL and its partials) is built on top.
"""

from __future__ import annotations

import math

import numpy as np

ALPHA_MIN = 0.05
ALPHA_MAX = 1e6

_LN_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
_SHIFT = 6.0
_LGAMMA_SHIFT = 10.0

# B_2k / (2k (2k-1)) for the log-gamma series, k = 1..7
_LGAMMA_COEF = (1 / 12, -1 / 360, 1 / 1260, -1 / 1680, 1 / 1188, -691 / 360360, 1 / 156)
# B_2k / (2k) for the digamma series, k = 1..7
_DIGAMMA_COEF = (1 / 12, -1 / 120, 1 / 252, -1 / 240, 1 / 132, -691 / 32760, 1 / 12)
# B_2k for the trigamma series, k = 1..7
_TRIGAMMA_COEF = (1 / 6, -1 / 30, 1 / 42, -1 / 30, 5 / 66, -691 / 2730, 7 / 6)


def _check_positive(x, name="x"):
    x = np.asarray(x, dtype=np.float64)
    if not np.all(x > 0):
        raise ValueError(f"{name} must be positive")
    return x


def lgamma(x):
    x = _check_positive(x)
    z = x.copy()
    log_prod = np.zeros_like(z)
    # accumulate the product x(x+1)...(x+k-1) and take a single log
    prod = np.ones_like(z)
    while True:
        m = z < _LGAMMA_SHIFT
        if not m.any():
            break
        prod = np.where(m, prod * z, prod)
        z = np.where(m, z + 1.0, z)
        big = prod > 1e250
        if big.any():
            log_prod = log_prod + np.where(big, np.log(prod), 0.0)
            prod = np.where(big, 1.0, prod)
    log_prod = log_prod + np.log(prod)
    inv = 1.0 / z
    inv2 = inv * inv
    series = np.zeros_like(z)
    for c in reversed(_LGAMMA_COEF):
        series = series * inv2 + c
    series = series * inv
    out = (z - 0.5) * np.log(z) - z + _LN_SQRT_2PI + series - log_prod
    return out[()] if out.ndim == 0 else out


def digamma(x):
    x = _check_positive(x)
    z = x.copy()
    acc = np.zeros_like(z)
    while True:
        m = z < _SHIFT
        if not m.any():
            break
        acc = np.where(m, acc - 1.0 / z, acc)
        z = np.where(m, z + 1.0, z)
    inv2 = 1.0 / (z * z)
    series = np.zeros_like(z)
    for c in reversed(_DIGAMMA_COEF):
        series = series * inv2 + c
    series = series * inv2
    out = acc + np.log(z) - 0.5 / z - series
    return out[()] if out.ndim == 0 else out


def trigamma(x):
    x = _check_positive(x)
    z = x.copy()
    acc = np.zeros_like(z)
    while True:
        m = z < _SHIFT
        if not m.any():
            break
        acc = np.where(m, acc + 1.0 / (z * z), acc)
        z = np.where(m, z + 1.0, z)
    inv = 1.0 / z
    inv2 = inv * inv
    series = np.zeros_like(z)
    for c in reversed(_TRIGAMMA_COEF):
        series = series * inv2 + c
    series = series * inv2 * inv
    out = acc + inv + 0.5 * inv2 + series
    return out[()] if out.ndim == 0 else out


def log_beta_fn(a, b):
    """ln B(a, b)."""
    a = _check_positive(a, "a")
    b = _check_positive(b, "b")
    return lgamma(a) + lgamma(b) - lgamma(a + b)


def log_pdf(alpha, beta, x):
    x = np.asarray(x, dtype=np.float64)
    if not np.all((x > 0) & (x < 1)):
        raise ValueError("x must lie in the open interval (0, 1)")
    alpha = np.asarray(alpha, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    return (alpha - 1) * np.log(x) + (beta - 1) * np.log1p(-x) - log_beta_fn(alpha, beta)


def pdf(alpha, beta, x):
    return np.exp(log_pdf(alpha, beta, x))


def entropy(alpha, beta):
    """Differential entropy of Beta(alpha, beta)."""
    a = _check_positive(alpha, "alpha")
    b = _check_positive(beta, "beta")
    dab = digamma(a + b)
    return log_beta_fn(a, b) - (a - 1) * (digamma(a) - dab) - (b - 1) * (digamma(b) - dab)


def kl(alpha_p, beta_p, alpha_q, beta_q):
    """KL(Beta(alpha_p, beta_p) || Beta(alpha_q, beta_q))."""
    ap = _check_positive(alpha_p, "alpha_p")
    bp = _check_positive(beta_p, "beta_p")
    aq = _check_positive(alpha_q, "alpha_q")
    bq = _check_positive(beta_q, "beta_q")
    return (log_beta_fn(aq, bq) - log_beta_fn(ap, bp)
            + (ap - aq) * digamma(ap) + (bp - bq) * digamma(bp)
            + (aq - ap + bq - bp) * digamma(ap + bp))


def kl_grad(alpha_p, beta_p, alpha_q, beta_q):
    """Partials of :func:`kl` w.r.t. (alpha_p, beta_p, alpha_q, beta_q)."""
    ap = _check_positive(alpha_p, "alpha_p")
    bp = _check_positive(beta_p, "beta_p")
    aq = _check_positive(alpha_q, "alpha_q")
    bq = _check_positive(beta_q, "beta_q")
    s = aq - ap + bq - bp
    t_sum = trigamma(ap + bp)
    d_ap = (ap - aq) * trigamma(ap) + s * t_sum
    d_bp = (bp - bq) * trigamma(bp) + s * t_sum
    dq_sum = digamma(aq + bq)
    dp_sum = digamma(ap + bp)
    d_aq = digamma(aq) - dq_sum - digamma(ap) + dp_sum
    d_bq = digamma(bq) - dq_sum - digamma(bp) + dp_sum
    return d_ap, d_bp, d_aq, d_bq
