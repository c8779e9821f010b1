"""Numerical substrate: distributions, simplex transforms and GP kernels.

Every density here returns the exact log density (normalizing constant
included) together with an analytic gradient.  Out-of-support arguments give
``-inf`` and a zero gradient, and emit :class:`SupportWarning`.

Gamma is always parametrized by (shape, rate).
"""

from __future__ import annotations

import math
import re
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import digamma, gammaln

LOG_2PI = math.log(2.0 * math.pi)

ALPHA_MIN = 1e-8
ALPHA_MAX = 1e8

JITTER_START = 1e-8
JITTER_MAX = 1e-2


class SupportWarning(RuntimeWarning):
    """Density evaluated outside the support of a distribution."""


class NumericalError(ArithmeticError):
    """A linear-algebra step failed even after stabilization."""


def _support_violation(family):
    warnings.warn(f"{family} evaluated outside its support", SupportWarning, stacklevel=3)


# ---------------------------------------------------------------------------
# Univariate families (elementwise, numpy broadcasting)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Normal:
    mu: float = 0.0
    sd: float = 1.0

    def __post_init__(self):
        if not self.sd > 0:
            raise ValueError(f"Normal sd must be positive, got {self.sd}")

    @property
    def mean(self):
        return self.mu

    @property
    def std(self):
        return self.sd

    def in_support(self, x):
        return np.isfinite(x)

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        z = (x - self.mu) / self.sd
        return -0.5 * z * z - math.log(self.sd) - 0.5 * LOG_2PI

    def grad_logpdf(self, x):
        x = np.asarray(x, dtype=float)
        return -(x - self.mu) / self.sd**2

    def sample(self, rng, size=None):
        return rng.normal(self.mu, self.sd, size=size)


@dataclass(frozen=True)
class Gamma:
    """Gamma distribution with shape ``a`` and rate ``b`` (mean a/b)."""

    a: float
    b: float

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ValueError(f"Gamma needs shape > 0 and rate > 0, got ({self.a}, {self.b})")

    @property
    def mean(self):
        return self.a / self.b

    @property
    def std(self):
        return math.sqrt(self.a) / self.b

    def in_support(self, x):
        return np.asarray(x) > 0

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        ok = x > 0
        if ok.all():
            return self._norm + (self.a - 1.0) * np.log(x) - self.b * x
        _support_violation("Gamma")
        xs = np.where(ok, x, 1.0)
        out = self._norm + (self.a - 1.0) * np.log(xs) - self.b * xs
        return np.where(ok, out, -np.inf)

    @property
    def _norm(self):
        return self.a * math.log(self.b) - math.lgamma(self.a)

    def grad_logpdf(self, x):
        x = np.asarray(x, dtype=float)
        ok = x > 0
        if ok.all():
            return (self.a - 1.0) / x - self.b
        xs = np.where(ok, x, 1.0)
        return np.where(ok, (self.a - 1.0) / xs - self.b, 0.0)

    def sample(self, rng, size=None):
        return rng.gamma(self.a, 1.0 / self.b, size=size)


@dataclass(frozen=True)
class HalfNormal:
    sd: float = 1.0

    def __post_init__(self):
        if not self.sd > 0:
            raise ValueError(f"HalfNormal sd must be positive, got {self.sd}")

    @property
    def mean(self):
        return self.sd * math.sqrt(2.0 / math.pi)

    @property
    def std(self):
        return self.sd * math.sqrt(1.0 - 2.0 / math.pi)

    def in_support(self, x):
        return np.asarray(x) >= 0

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        ok = x >= 0
        z = x / self.sd
        out = 0.5 * math.log(2.0 / math.pi) - math.log(self.sd) - 0.5 * z * z
        if ok.all():
            return out
        _support_violation("HalfNormal")
        return np.where(ok, out, -np.inf)

    def grad_logpdf(self, x):
        x = np.asarray(x, dtype=float)
        g = -x / self.sd**2
        return g if (x >= 0).all() else np.where(x >= 0, g, 0.0)

    def sample(self, rng, size=None):
        return np.abs(rng.normal(0.0, self.sd, size=size))


@dataclass(frozen=True)
class Uniform:
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"Uniform needs lo < hi, got ({self.lo}, {self.hi})")

    @property
    def mean(self):
        return 0.5 * (self.lo + self.hi)

    @property
    def std(self):
        return (self.hi - self.lo) / math.sqrt(12.0)

    def in_support(self, x):
        x = np.asarray(x)
        return (x >= self.lo) & (x <= self.hi)

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        ok = self.in_support(x)
        if not ok.all():
            _support_violation("Uniform")
        return np.where(ok, -math.log(self.hi - self.lo), -np.inf)

    def grad_logpdf(self, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    def sample(self, rng, size=None):
        return rng.uniform(self.lo, self.hi, size=size)


# ---------------------------------------------------------------------------
# Dirichlet
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Dirichlet:
    """Dirichlet distribution on the (p-1)-simplex.

    ``alpha`` may be any sequence of positive concentrations; ``logpdf`` and
    ``grad_logpdf`` broadcast over leading axes of ``x``.
    """

    alpha: tuple

    def __post_init__(self):
        alpha = tuple(float(a) for a in np.ravel(self.alpha))
        if len(alpha) < 2 or not all(a > 0 for a in alpha):
            raise ValueError(f"Dirichlet needs >= 2 positive concentrations, got {alpha}")
        object.__setattr__(self, "alpha", alpha)

    @property
    def mean(self):
        a = np.asarray(self.alpha)
        return a / a.sum()

    @property
    def std(self):
        a = np.asarray(self.alpha)
        a0 = a.sum()
        m = a / a0
        return np.sqrt(m * (1 - m) / (a0 + 1))

    def in_support(self, x):
        x = np.asarray(x, dtype=float)
        return np.all(x > 0, axis=-1) & (np.abs(x.sum(axis=-1) - 1.0) <= 1e-9)

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        a = np.asarray(self.alpha)
        ok = self.in_support(x)
        if not np.all(ok):
            _support_violation("Dirichlet")
        xs = np.where(ok[..., None], x, 1.0)
        out = dirichlet_logpdf(np.log(xs), a)
        return np.where(ok, out, -np.inf)

    def grad_logpdf(self, x):
        """Gradient with respect to the ambient coordinates ``x``."""
        x = np.asarray(x, dtype=float)
        a = np.asarray(self.alpha)
        ok = self.in_support(x)
        xs = np.where(ok[..., None], x, 1.0)
        return np.where(ok[..., None], (a - 1.0) / xs, 0.0)

    def sample(self, rng, size=None):
        shape = () if size is None else (size,) if np.isscalar(size) else tuple(size)
        a = np.broadcast_to(np.asarray(self.alpha), shape + (len(self.alpha),))
        return sample_dirichlet(a, rng)


def dirichlet_logpdf(log_omega, alpha):
    """Dirichlet log density given ``log(omega)``; broadcasts over rows."""
    return (
        gammaln(alpha.sum(axis=-1))
        - gammaln(alpha).sum(axis=-1)
        + ((alpha - 1.0) * log_omega).sum(axis=-1)
    )


def dirichlet_grad_alpha(log_omega, alpha):
    """d/d alpha of :func:`dirichlet_logpdf`."""
    return digamma(alpha.sum(axis=-1, keepdims=True)) - digamma(alpha) + log_omega


def sample_dirichlet(alpha, rng):
    """Draw Dirichlet vectors row-wise in log space.

    Works for concentrations down to ``ALPHA_MIN`` where direct gamma draws
    underflow: for shape < 1 we use ``G(a) = G(a+1) * U**(1/a)``.
    """
    alpha = np.asarray(alpha, dtype=float)
    small = alpha < 1.0
    g = rng.standard_gamma(np.where(small, alpha + 1.0, alpha))
    log_g = np.log(g)
    u = rng.random(alpha.shape)
    log_g = np.where(small, log_g + np.log(u) / alpha, log_g)
    log_g -= log_g.max(axis=-1, keepdims=True)
    w = np.exp(log_g)
    return w / w.sum(axis=-1, keepdims=True)


def clamp_concentration(log_alpha):
    """Exponentiate log concentrations into ``[ALPHA_MIN, ALPHA_MAX]``.

    Returns ``(alpha, clamped)`` where ``clamped`` flags entries that hit a
    bound (their gradient is zero).
    """
    lo, hi = math.log(ALPHA_MIN), math.log(ALPHA_MAX)
    clamped = (log_alpha < lo) | (log_alpha > hi)
    return np.exp(np.clip(log_alpha, lo, hi)), clamped


# ---------------------------------------------------------------------------
# Simplex bijections
# ---------------------------------------------------------------------------


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def stick_breaking(z):
    """Centered stick-breaking map from ``(..., p-1)`` reals to the simplex.

    Returns ``(omega, log_omega, s)``; ``s`` are the break fractions, needed
    by :func:`stick_breaking_vjp`.  ``z = 0`` maps to the barycenter.
    """
    z = np.asarray(z, dtype=float)
    km1 = z.shape[-1]
    offsets = np.log(np.arange(km1, 0, -1, dtype=float))
    x = z - offsets
    log_s = _log_sigmoid(x)
    log_1ms = _log_sigmoid(-x)
    # log of the stick remaining before each break
    log_r = np.concatenate(
        [np.zeros(z.shape[:-1] + (1,)), np.cumsum(log_1ms, axis=-1)], axis=-1
    )
    log_omega = log_r.copy()
    log_omega[..., :-1] += log_s
    omega = np.exp(log_omega)
    # renormalize away rounding so the sum is 1 to machine precision
    omega /= omega.sum(axis=-1, keepdims=True)
    return omega, log_omega, np.exp(log_s)


def stick_breaking_vjp(s, coef):
    """Gradient of ``sum_k coef[..., k] * log(omega_k)`` w.r.t. ``z``.

    ``coef`` has shape ``(..., p)``; ``s`` comes from :func:`stick_breaking`.
    A likelihood gradient ``g`` with respect to omega enters as
    ``coef = g * omega``.
    """
    tail = np.cumsum(coef[..., ::-1], axis=-1)[..., ::-1]  # sum_{k>=j}
    after = tail[..., 1:]  # sum_{k>j} for j = 0..p-2
    return coef[..., :-1] * (1.0 - s) - s * after


def stick_breaking_small(z):
    """Scalar-loop version of :func:`stick_breaking` for one short vector.

    Returns ``(omega, log_omega, s)`` as lists; avoids numpy call overhead
    when p is a handful of models.
    """
    km1 = len(z)
    log_omega, s = [], []
    log_r = 0.0
    for j, zj in enumerate(z):
        x = zj - math.log(km1 - j)
        if x > 0:
            log_s = -math.log1p(math.exp(-x))
            log_1ms = -x + log_s
        else:
            log_1ms = -math.log1p(math.exp(x))
            log_s = x + log_1ms
        log_omega.append(log_r + log_s)
        s.append(math.exp(log_s))
        log_r += log_1ms
    log_omega.append(log_r)
    omega = [math.exp(v) for v in log_omega]
    total = sum(omega)
    return [w / total for w in omega], log_omega, s


def stick_breaking_vjp_small(s, coef):
    """Scalar-loop version of :func:`stick_breaking_vjp`."""
    out = [0.0] * len(s)
    after = coef[-1]
    for j in range(len(s) - 1, -1, -1):
        out[j] = coef[j] * (1.0 - s[j]) - s[j] * after
        after += coef[j]
    return out


def digamma_scalar(x):
    """Digamma for a positive float (recurrence plus asymptotic series)."""
    r = 0.0
    while x < 10.0:
        r -= 1.0 / x
        x += 1.0
    f = 1.0 / (x * x)
    return r + math.log(x) - 0.5 / x - f * (
        1.0 / 12 - f * (1.0 / 120 - f * (1.0 / 252 - f * (1.0 / 240 - f / 132)))
    )


def simplex_transform(z):
    """Map unconstrained ``z`` (length p-1) to ``(omega, log_jac)``.

    ``log_jac`` is ``log|det d omega_{1..p-1} / d z|``, which for the
    stick-breaking map equals ``sum(log omega)``.
    """
    omega, log_omega, _ = stick_breaking(z)
    return omega, log_omega.sum(axis=-1)


def simplex_inverse(omega):
    """Inverse of :func:`simplex_transform`."""
    omega = np.asarray(omega, dtype=float)
    p = omega.shape[-1]
    offsets = np.log(np.arange(p - 1, 0, -1, dtype=float))
    remaining = 1.0 - np.concatenate(
        [np.zeros(omega.shape[:-1] + (1,)), np.cumsum(omega[..., :-2], axis=-1)], axis=-1
    )
    s = omega[..., :-1] / remaining
    return np.log(s) - np.log1p(-s) + offsets


def project_simplex(omega):
    """Clip negatives to zero and renormalize onto the simplex."""
    omega = np.asarray(omega, dtype=float)
    pos = np.maximum(omega, 0.0)
    total = pos.sum(axis=-1, keepdims=True)
    if np.any(total <= 0):
        raise ValueError("cannot project onto the simplex: all weights are <= 0")
    return pos / total


# ---------------------------------------------------------------------------
# Squared-exponential kernels and Gaussian conditionals
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KernelParams:
    """Per-model marginal variances ``eta`` and shared length scales ``rho``.

    For nuclear inputs ``rho = (rho_Z, rho_N)``.
    """

    eta: tuple
    rho: tuple

    def __post_init__(self):
        eta = tuple(float(e) for e in np.ravel(self.eta))
        rho = tuple(float(r) for r in np.ravel(self.rho))
        if not all(e > 0 for e in eta) or not all(r > 0 for r in rho):
            raise ValueError("kernel parameters must be strictly positive")
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "rho", rho)


def se_kernel(x, x2, kp, k):
    """``eta_k * exp(-sum_d (x_d - x2_d)^2 / (2 rho_d^2))`` for a single pair."""
    x = np.asarray(x, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    r = (x - x2) / np.asarray(kp.rho)
    return kp.eta[k] * math.exp(-0.5 * float(r @ r))


def se_correlation(X, X2, rho):
    """Unit-variance SE kernel matrix between point sets ``X`` (n, q) and ``X2`` (m, q)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    X2 = np.atleast_2d(np.asarray(X2, dtype=float))
    rho = np.asarray(rho, dtype=float)
    d2 = np.zeros((X.shape[0], X2.shape[0]))
    for j in range(X.shape[1]):
        diff = (X[:, j, None] - X2[None, :, j]) / rho[j]
        d2 += diff * diff
    return np.exp(-0.5 * d2)


def se_gram(X, kp, k):
    return kp.eta[k] * se_correlation(X, X, kp.rho)


@dataclass(frozen=True)
class CholFactor:
    """Lower Cholesky factor ``L`` with ``L @ L.T == K + jitter * I``."""

    L: np.ndarray
    jitter: float


def cholesky_jitter(K, who="matrix"):
    """Cholesky factor with escalating diagonal jitter.

    Jitter starts at ``1e-8 * mean(diag K)`` and is multiplied by 10 until the
    factorization succeeds or it would exceed ``1e-2 * mean(diag K)``.
    """
    K = np.asarray(K, dtype=float)
    scale = float(np.mean(np.diag(K)))
    if not np.isfinite(scale) or scale <= 0:
        raise NumericalError(f"Cholesky failed for {who}: non-positive diagonal")
    rel = JITTER_START
    eye = np.eye(K.shape[0])
    while rel <= JITTER_MAX * (1 + 1e-9):
        jitter = rel * scale
        try:
            L = np.linalg.cholesky(K + jitter * eye)
        except np.linalg.LinAlgError:
            rel *= 10.0
            continue
        return CholFactor(L, jitter)
    raise NumericalError(
        f"Cholesky failed for {who} after jitter escalation to {JITTER_MAX:g} x mean(diag)"
    )


def gp_conditional(train_pts, train_vals, new_pts, mean, kp, k):
    """Gaussian conditional of a constant-mean SE GP given exact latent values.

    Returns ``(cond_mean, cond_cov)`` at ``new_pts``.
    """
    X = np.atleast_2d(np.asarray(train_pts, dtype=float))
    Xs = np.atleast_2d(np.asarray(new_pts, dtype=float))
    vals = np.asarray(train_vals, dtype=float)
    chol = cholesky_jitter(se_gram(X, kp, k), who=f"GP of model {k}")
    Ks = kp.eta[k] * se_correlation(X, Xs, kp.rho)
    Kss = kp.eta[k] * se_correlation(Xs, Xs, kp.rho)
    V = solve_triangular(chol.L, Ks, lower=True)
    w = solve_triangular(chol.L, vals - mean, lower=True)
    return mean + V.T @ w, Kss - V.T @ V


# ---------------------------------------------------------------------------
# Parsing "Family(args)" strings from config files
# ---------------------------------------------------------------------------

_FAMILIES = {
    "normal": Normal,
    "gamma": Gamma,
    "halfnormal": HalfNormal,
    "uniform": Uniform,
}


def parse_dist(text):
    """Parse e.g. ``"Gamma(5, 10)"`` or ``"HalfNormal(2)"``."""
    m = re.fullmatch(r"\s*([A-Za-z\-_]+)\s*\(([^)]*)\)\s*", text)
    if not m:
        raise ValueError(f"cannot parse distribution {text!r}")
    name = m.group(1).lower().replace("-", "").replace("_", "")
    if name not in _FAMILIES:
        raise ValueError(f"unknown distribution family {m.group(1)!r}")
    args = [float(a) for a in m.group(2).split(",") if a.strip()]
    return _FAMILIES[name](*args)


def format_dist(dist):
    name = type(dist).__name__
    args = ", ".join(f"{getattr(dist, f)!r}" for f in dist.__dataclass_fields__)
    return f"{name}({args})"
