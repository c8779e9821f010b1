"""Convergence diagnostics: split R-hat, bulk ESS and trace export.

R-hat and ESS follow Vehtari et al. (2021): chains are split in half and
draws are rank-normalized before the classic formulas are applied.
"""

from __future__ import annotations

import csv
import json

import numpy as np
from scipy.special import ndtri
from scipy.stats import rankdata


def _split(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    half = x.shape[1] // 2
    return np.concatenate([x[:, :half], x[:, x.shape[1] - half:]], axis=0)


def _rank_normalize(x):
    r = rankdata(x, method="average").reshape(x.shape)
    return ndtri((r - 0.375) / (x.size + 0.25))


def _rhat_raw(x):
    m, n = x.shape
    chain_mean = x.mean(axis=1)
    W = x.var(axis=1, ddof=1).mean()
    B = n * chain_mean.var(ddof=1)
    var_plus = (n - 1) / n * W + B / n
    if W == 0:
        return np.nan
    return float(np.sqrt(var_plus / W))


def split_rhat(x):
    """Rank-normalized split R-hat for draws shaped (chains, draws)."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1 or x.shape[0] < 2:
        raise ValueError("R-hat needs at least two chains")
    return _rhat_raw(_rank_normalize(_split(x)))


def _autocov(x):
    """Autocovariance of each row via FFT (biased, lag 0..n-1)."""
    n = x.shape[-1]
    size = 1 << (2 * n - 1).bit_length()
    xc = x - x.mean(axis=-1, keepdims=True)
    f = np.fft.rfft(xc, size)
    acov = np.fft.irfft(f * np.conj(f), size)[..., :n]
    return acov / n


def ess(x, rank_normalize=True, split=True):
    """Effective sample size from draws shaped (chains, draws) or (draws,).

    Multi-chain autocorrelation with Geyer's initial monotone sequence.
    ``ess(..., rank_normalize=True)`` is the bulk ESS.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if split and x.shape[1] >= 4:
        x = _split(x)
    if rank_normalize:
        x = _rank_normalize(x)
    m, n = x.shape
    if n < 4 or np.all(x == x.flat[0]):
        return float(m * n) if n >= 1 else 0.0
    acov = _autocov(x)
    chain_var = acov[:, 0] * n / (n - 1.0)
    W = chain_var.mean()
    var_plus = W * (n - 1.0) / n
    if m > 1:
        var_plus += x.mean(axis=1).var(ddof=1)
    rho = 1.0 - (W - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # Geyer: sum consecutive pairs while positive, enforce monotonicity
    total = 0.0
    prev = np.inf
    t = 0
    while t + 1 < n:
        pair = rho[t] + rho[t + 1]
        if pair <= 0:
            break
        pair = min(pair, prev)
        total += pair
        prev = pair
        t += 2
    tau = -1.0 + 2.0 * total
    tau = max(tau, 1.0 / np.log10(m * n))
    return float(m * n / tau)


def summarize(samples, spec=None):
    """Per-parameter ``{name: {mean, sd, rhat, ess}}`` plus sampler statistics.

    With a ``spec``, the low-dimensional constrained parameters are reported
    by name; per-location blocks are summarized by their worst coordinate.
    """
    chains = samples.n_chains
    report = {"parameters": {}, "blocks": {}, "notes": []}
    if chains < 2:
        report["notes"].append("single chain: R-hat omitted")

    def stats(values):
        v = samples.by_chain(values)
        out = {"mean": float(values.mean()), "sd": float(values.std(ddof=1)) if len(values) > 1 else 0.0,
               "ess": ess(v)}
        out["rhat"] = split_rhat(v) if chains >= 2 else None
        return out

    if spec is not None:
        scal = np.array([spec.scalar_values(t) for t in samples.draws])
        for j, name in enumerate(spec.scalar_names()):
            report["parameters"][name] = stats(scal[:, j])
        for b in spec.packing.blocks:
            cols = samples.draws[:, b.slice]
            per = [stats(cols[:, j]) for j in range(cols.shape[1])]
            rh = [s["rhat"] for s in per if s["rhat"] is not None and np.isfinite(s["rhat"])]
            report["blocks"][b.name] = {
                "min_ess": float(min(s["ess"] for s in per)),
                "max_rhat": float(max(rh)) if rh else None,
            }
    else:
        for j in range(samples.draws.shape[1]):
            report["parameters"][f"theta[{j}]"] = stats(samples.draws[:, j])

    diag = samples.diagnostics
    report["divergences"] = {
        "total": diag.get("n_divergent", 0),
        "by_chain": [c.get("divergences", []) for c in diag.get("chains", [])],
    }
    report["sampler"] = {k: v for k, v in diag.items() if k not in ("chains",)}
    report["chains"] = diag.get("chains", [])
    return report


def write_diagnostics(report, path):
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, default=float)
        fh.write("\n")


def write_trace(samples, spec, path):
    """Trace CSV: iteration, chain, then one column per named scalar parameter."""
    names = spec.scalar_names()
    per = len(samples.chain) // max(samples.n_chains, 1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "chain"] + names)
        for row, (theta, c) in enumerate(zip(samples.draws, samples.chain)):
            vals = spec.scalar_values(theta)
            w.writerow([row % per, int(c)] + [repr(float(v)) for v in vals])
