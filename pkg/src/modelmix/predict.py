"""Posterior predictive draws, rms, empirical coverage and weight fields.

Prediction pushes every retained posterior draw through the generative
hierarchy at the grid locations:

* global variants use the draw's weights (GBMM+D may instead redraw them
  from ``Dirichlet(alpha)``);
* GLD evaluates ``alpha(x*) = exp(beta x*)`` on the standardized features;
* GPD conditions the latent GP on the draw's values at the training sites
  and takes the per-location marginal conditional at each new site.

For the local variants the latent weights already sampled at training
locations are reused there; new locations get fresh Dirichlet draws.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.stats import binom

from .dataset import DataError
from .prob import clamp_concentration, sample_dirichlet, se_correlation

DEFAULT_LEVELS = (0.5, 0.68, 0.9, 0.95)
SUMMARY_QUANTILES = (0.05, 0.16, 0.5, 0.84, 0.95)


def _check_grid(spec, grid):
    if list(grid.model_names) != list(spec.model_names):
        raise DataError(
            f"grid models {list(grid.model_names)} differ from fitted models {spec.model_names}"
        )
    return np.asarray(grid.effective(spec.use_corrections), dtype=float)


def _draw_rows(samples, max_draws):
    S = len(samples.draws)
    if max_draws is None or max_draws >= S:
        return np.arange(S)
    return np.unique(np.linspace(0, S - 1, int(max_draws)).round().astype(int))


class _WeightPropagator:
    """Per-draw weights at grid locations for one fitted spec."""

    def __init__(self, spec, grid, resample_weights=False, reuse_training=True):
        self.spec = spec
        self.variant = spec.variant
        self.resample = resample_weights
        self.m = grid.n
        train_index = {loc: i for i, loc in enumerate(spec.data.locations)}
        rows = [train_index.get(loc, -1) for loc in grid.locations]
        self.train_rows = np.array(rows, dtype=int)
        self.is_train = (self.train_rows >= 0) & bool(reuse_training) & (not resample_weights)
        if self.variant == "lbmm-gld":
            self.X_new = spec.features(grid.locations)
        elif self.variant == "lbmm-gpd":
            X_new = grid.coords
            if X_new.shape[1] != spec.q:
                raise DataError("grid coordinates do not match the fitted input dimension")
            self.X_new = X_new

    def __call__(self, theta, rng):
        spec, m = self.spec, self.m
        c = spec.constrained(theta)
        if self.variant == "gbmm-l":
            return np.broadcast_to(c["omega"], (m, spec.p)), c["sigma"]
        if self.variant == "gbmm-d":
            omega = sample_dirichlet(c["alpha"], rng) if self.resample else c["omega"]
            return np.broadcast_to(omega, (m, spec.p)), c["sigma"]
        if self.variant == "lbmm-gld":
            alpha, _ = clamp_concentration(self.X_new @ c["beta"].T)
        else:
            alpha = self._gp_alpha(c, rng)
        omega = sample_dirichlet(alpha, rng)
        if self.is_train.any():
            omega[self.is_train] = c["omega"][self.train_rows[self.is_train]]
        return omega, c["sigma"]

    def _gp_alpha(self, c, rng):
        spec = self.spec
        chol = spec.factor(c["rho"])
        Ks = se_correlation(spec.X, self.X_new, c["rho"])  # (n, m)
        V = solve_triangular(chol.L, Ks, lower=True)  # (n, m)
        var = np.clip(1.0 - np.einsum("nm,nm->m", V, V), 0.0, None)  # unit-variance part
        sq_eta = np.sqrt(c["eta"])
        mean = c["gamma_inf"][None, :] + sq_eta[None, :] * (V.T @ c["u"].T)  # (m, p)
        sd = sq_eta[None, :] * np.sqrt(var)[:, None]
        gamma = mean + sd * rng.standard_normal(mean.shape)
        alpha, _ = clamp_concentration(gamma)
        return alpha


def posterior_predictive(spec, samples, grid, rng=None, resample_weights=False, max_draws=None,
                         noise=True, reuse_training=True):
    """Predictive draws, shape ``(draws, grid.n)``.

    Parameters
    ----------
    spec : ModelSpec
        The fitted model.
    samples : PosteriorSamples
        Draws from :func:`modelmix.samplers.sample`.
    grid : AlignedDataset
        Model outputs (and corrections when the fit used them) at the
        prediction locations; ``grid.y`` is ignored.
    resample_weights : bool
        Draw fresh weights from ``Dirichlet(alpha)`` for every draw instead of
        reusing the sampled weights (Dirichlet variants only).
    max_draws : int, optional
        Thin evenly to at most this many posterior draws.
    noise : bool
        Add the ``sigma * eps`` observation noise.
    """
    rng = np.random.default_rng(rng)
    F = _check_grid(spec, grid)
    if resample_weights and spec.variant == "gbmm-l":
        raise ValueError("gbmm-l has no Dirichlet concentration to resample from")
    prop = _WeightPropagator(spec, grid, resample_weights, reuse_training)
    rows = _draw_rows(samples, max_draws)
    out = np.empty((len(rows), grid.n))
    for j, r in enumerate(rows):
        omega, sigma = prop(samples.draws[r], rng)
        mu = np.einsum("mk,mk->m", omega, F)
        out[j] = mu + sigma * rng.standard_normal(grid.n) if noise else mu
    return out


@dataclass
class PredictiveSummary:
    locations: list
    mean: np.ndarray
    sd: np.ndarray
    quantiles: dict
    draws: np.ndarray | None = None

    @classmethod
    def from_draws(cls, locations, draws, probs=SUMMARY_QUANTILES, keep_draws=False):
        draws = np.asarray(draws, dtype=float)
        qs = np.quantile(draws, probs, axis=0)
        # np.quantile is monotone in the level already; enforce against round-off
        qs = np.maximum.accumulate(qs, axis=0)
        return cls(
            list(locations),
            draws.mean(axis=0),
            draws.std(axis=0, ddof=1) if len(draws) > 1 else np.zeros(draws.shape[1]),
            {float(p): q for p, q in zip(probs, qs)},
            draws if keep_draws else None,
        )

    def point(self, kind="mean"):
        if kind == "mean":
            return self.mean
        if kind == "median":
            return self.quantiles[0.5] if 0.5 in self.quantiles else np.median(self.draws, axis=0)
        raise ValueError(f"unknown point estimate {kind!r}")

    def write_csv(self, path, coords=("Z", "N")):
        probs = sorted(self.quantiles)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(list(coords) + ["mean", "sd"] + [f"q{round(100 * p):02d}" for p in probs])
            for i, loc in enumerate(self.locations):
                w.writerow([f"{c:g}" for c in loc] + [repr(float(self.mean[i])), repr(float(self.sd[i]))]
                           + [repr(float(self.quantiles[p][i])) for p in probs])


def rms(pred, obs):
    """Root-mean-square deviation."""
    pred = np.asarray(pred, dtype=float).ravel()
    obs = np.asarray(obs, dtype=float).ravel()
    if pred.shape != obs.shape:
        raise ValueError(f"length mismatch: {pred.size} predictions vs {obs.size} observations")
    if pred.size < 1:
        raise ValueError("rms of an empty vector")
    return float(np.sqrt(np.mean((pred - obs) ** 2)))


@dataclass
class ECPCurve:
    levels: np.ndarray
    coverage: np.ndarray
    n_test: int

    def band(self, conf=0.95):
        return binomial_band(self.levels, self.n_test, conf)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["level", "coverage"])
            for lv, cv in zip(self.levels, self.coverage):
                w.writerow([repr(float(lv)), repr(float(cv))])


def ecp(draws, obs, levels=DEFAULT_LEVELS, min_draws=100):
    """Empirical coverage of equal-tailed predictive intervals.

    ``draws`` has shape ``(draws, n_test)``.  Each tail needs at least one
    draw beyond the interval end, otherwise the level is rejected.
    """
    draws = np.asarray(draws, dtype=float)
    obs = np.asarray(obs, dtype=float).ravel()
    if draws.ndim != 2 or draws.shape[1] != obs.size:
        raise ValueError(f"draws shape {draws.shape} does not match {obs.size} observations")
    S = draws.shape[0]
    if S < min_draws:
        raise ValueError(f"ECP needs at least {min_draws} draws per location, got {S}")
    levels = np.asarray(levels, dtype=float)
    cov = np.empty(len(levels))
    for i, c in enumerate(levels):
        if not 0.0 < c < 1.0:
            raise ValueError(f"level {c} outside (0, 1)")
        tail = 0.5 * (1.0 - c)
        if tail * S < 1.0:
            raise ValueError(f"level {c:g} needs at least {math.ceil(1.0 / tail)} draws, got {S}")
        lo, hi = np.quantile(draws, [tail, 1.0 - tail], axis=0)
        cov[i] = np.mean((obs >= lo) & (obs <= hi))
    return ECPCurve(levels, cov, obs.size)


def binomial_band(levels, n, conf=0.95):
    """Central ``conf`` band of Binomial(n, level)/n for each nominal level."""
    levels = np.asarray(levels, dtype=float)
    a = 0.5 * (1.0 - conf)
    return binom.ppf(a, n, levels) / n, binom.ppf(1.0 - a, n, levels) / n


@dataclass
class WeightField:
    locations: list
    model_names: list
    mean: np.ndarray
    sd: np.ndarray
    n_draws: int
    notes: list = field(default_factory=list)

    @property
    def mc_se(self):
        return self.sd / math.sqrt(max(self.n_draws, 1))

    def write_csv(self, path, coords=("Z", "N")):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(list(coords) + ["model", "mean", "sd"])
            for i, loc in enumerate(self.locations):
                for k, name in enumerate(self.model_names):
                    w.writerow([f"{c:g}" for c in loc] + [name, repr(float(self.mean[i, k])),
                                                          repr(float(self.sd[i, k]))])


def weight_field(spec, samples, grid, rng=None, resample_weights=False, max_draws=None,
                 reuse_training=True):
    """Posterior mean and sd of ``omega_k(x)`` over ``grid``."""
    rng = np.random.default_rng(rng)
    _check_grid(spec, grid)
    notes = []
    if spec.variant == "gbmm-l":
        notes.append("gbmm-l weights are global and not constrained to sum to one")
        resample_weights = False
    elif spec.variant == "gbmm-d":
        notes.append("gbmm-d weights are global: the field is constant over the grid")
    prop = _WeightPropagator(spec, grid, resample_weights, reuse_training)
    rows = _draw_rows(samples, max_draws)
    total = np.zeros((grid.n, spec.p))
    total2 = np.zeros((grid.n, spec.p))
    for r in rows:
        omega, _ = prop(samples.draws[r], rng)
        total += omega
        total2 += omega * omega
    S = len(rows)
    mean = total / S
    var = np.clip(total2 / S - mean * mean, 0.0, None) * (S / max(S - 1, 1))
    return WeightField(list(grid.locations), list(spec.model_names), mean, np.sqrt(var), S, notes)
