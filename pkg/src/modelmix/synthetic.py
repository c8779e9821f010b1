"""Synthetic mixtures with known weights, and the bundled fixture.

Model outputs are smooth random sums of sinusoids on a 2-D integer grid,
so the mixing weights are identifiable without the outputs being nearly
collinear.
"""

from __future__ import annotations

import configparser
import csv
from importlib import resources
from pathlib import Path

import numpy as np

from .dataset import AlignedDataset, ModelTable, ObservationSet

FIXTURE_SEED = 20240601
FIXTURE_OMEGA = (0.3, 0.7)
FIXTURE_SIGMA = 0.1


def grid_locations(nx, ny, x0=0.0, y0=0.0):
    """Integer grid ``(x, y)`` locations, row-major in ``x``."""
    return [(float(x0 + i), float(y0 + j)) for i in range(nx) for j in range(ny)]


def smooth_outputs(locations, p, rng, amplitude=1.5, terms=3, offsets=None):
    """``p`` smooth functions evaluated at ``locations``, shape ``(n, p)``."""
    X = np.asarray(locations, dtype=float).reshape(len(locations), -1)
    F = np.zeros((len(X), p))
    for k in range(p):
        for _ in range(terms):
            w = rng.uniform(0.15, 0.6, X.shape[1]) * rng.choice([-1, 1], X.shape[1])
            F[:, k] += amplitude / terms * np.sin(X @ w + rng.uniform(0, 2 * np.pi))
        if offsets is not None:
            F[:, k] += offsets[k]
    return F


def global_mixture(n=200, omega=FIXTURE_OMEGA, sigma=FIXTURE_SIGMA, seed=0, n_test=0):
    """Data from ``y = F @ omega + sigma * eps`` with fixed global weights.

    Returns ``(train, test)``; ``test`` is None when ``n_test == 0``.
    Train and test locations are disjoint cells of one grid.
    """
    rng = np.random.default_rng(seed)
    omega = np.asarray(omega, dtype=float)
    total = n + n_test
    ny = int(np.ceil(np.sqrt(total)))
    nx = int(np.ceil(total / ny))
    locs = grid_locations(nx, ny)
    pick = rng.permutation(len(locs))[:total]
    locs = [locs[i] for i in pick]
    F = smooth_outputs(locs, len(omega), rng)
    y = F @ omega + sigma * rng.standard_normal(total)
    names = [f"m{k}" for k in range(len(omega))]
    train = AlignedDataset(locs[:n], y[:n], F[:n], names)
    test = AlignedDataset(locs[n:], y[n:], F[n:], names) if n_test else None
    return train, test


def regional_weight(locations, boundary, high=0.9):
    """True weight of model 0: ``high`` left of ``boundary`` in the first coordinate."""
    x = np.asarray(locations, dtype=float).reshape(len(locations), -1)[:, 0]
    return np.where(x < boundary, high, 1.0 - high)


def regional_mixture(side=8, sigma=0.1, seed=0, high=0.9, grid_step=0.5):
    """Two models whose true weights swap at ``x = boundary``.

    Training data sit on an integer ``side x side`` grid; ``grid`` is a
    finer prediction grid (step ``grid_step``) covering the same square.
    The outputs differ by about 2 everywhere, so each observation pins
    down its local weight to roughly ``sigma / 2``.

    Returns ``(train, grid, boundary)``.
    """
    rng = np.random.default_rng(seed)
    boundary = (side - 1) / 2.0
    locs = grid_locations(side, side)
    coarse = set(locs)
    steps = np.arange(0.0, side - 1 + 1e-9, grid_step)
    fine = [(float(a), float(b)) for a in steps for b in steps]
    all_locs = locs + [c for c in fine if c not in coarse]
    F_all = smooth_outputs(all_locs, 2, rng, amplitude=0.5, offsets=(1.0, -1.0))
    n = len(locs)
    w = regional_weight(locs, boundary, high)
    F = F_all[:n]
    y = w * F[:, 0] + (1 - w) * F[:, 1] + sigma * rng.standard_normal(n)
    names = ["left", "right"]
    train = AlignedDataset(locs, y, F, names)
    index = {loc: i for i, loc in enumerate(all_locs)}
    grid = AlignedDataset(fine, None, F_all[[index[c] for c in fine]], names)
    return train, grid, boundary


def as_tables(data, extra=None):
    """Split an AlignedDataset back into an ObservationSet and ModelTables.

    ``extra`` is an optional second AlignedDataset whose model outputs are
    added to the tables (its observations are not).
    """
    obs = ObservationSet(list(data.locations), data.y)
    tables = []
    for k, name in enumerate(data.model_names):
        preds = {loc: float(v) for loc, v in zip(data.locations, data.F[:, k])}
        corr = None
        if data.D is not None:
            corr = {loc: float(v) for loc, v in zip(data.locations, data.D[:, k])}
        if extra is not None:
            preds.update({loc: float(v) for loc, v in zip(extra.locations, extra.F[:, k])})
            if corr is not None:
                corr.update({loc: float(v) for loc, v in zip(extra.locations, extra.D[:, k])})
        tables.append(ModelTable(name, preds, corr))
    return obs, tables


# ---------------------------------------------------------------------------
# bundled fixture
# ---------------------------------------------------------------------------


def fixture_dir():
    """Directory holding the bundled synthetic CSVs and example config."""
    return Path(str(resources.files("modelmix") / "data" / "synthetic"))


def make_fixture(seed=FIXTURE_SEED):
    """Build the 2-model fixture: 200 train, 100 test, 100 grid-only cells.

    Model tables carry a small smooth ``delta`` column so correction
    handling can be exercised; the observations are generated from the raw
    outputs with weights ``FIXTURE_OMEGA`` and noise ``FIXTURE_SIGMA``.
    """
    rng = np.random.default_rng(seed)
    locs = grid_locations(20, 20, x0=10.0, y0=10.0)
    F = smooth_outputs(locs, 2, rng)
    D = 0.05 * smooth_outputs(locs, 2, rng, amplitude=1.0)
    y = F @ np.asarray(FIXTURE_OMEGA) + FIXTURE_SIGMA * rng.standard_normal(len(locs))
    order = rng.permutation(len(locs))
    return {
        "locations": locs,
        "F": F,
        "D": D,
        "y": y,
        "train": sorted(order[:200].tolist()),
        "test": sorted(order[200:300].tolist()),
        "models": ["model_a", "model_b"],
    }


def _fmt(v):
    return f"{v:.12g}"


def write_fixture(outdir, seed=FIXTURE_SEED):
    """Write the fixture CSVs and ``example.ini`` into ``outdir``."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    fx = make_fixture(seed)
    locs = fx["locations"]
    for name, rows in (("train", fx["train"]), ("test", fx["test"])):
        with open(out / f"{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["Z", "N", "value"])
            for i in rows:
                w.writerow([f"{locs[i][0]:g}", f"{locs[i][1]:g}", _fmt(fx["y"][i])])
    for k, name in enumerate(fx["models"]):
        with open(out / f"{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["Z", "N", "f", "delta"])
            for i, loc in enumerate(locs):
                w.writerow([f"{loc[0]:g}", f"{loc[1]:g}", _fmt(fx["F"][i, k]), _fmt(fx["D"][i, k])])
    cfg = configparser.ConfigParser()
    cfg["data"] = {
        "train": "train.csv",
        "test": "test.csv",
        "models": "model_a.csv, model_b.csv",
        "use_corrections": "false",
    }
    cfg["model"] = {"variant": "gbmm-d"}
    cfg["sampler"] = {"algorithm": "nuts", "total_draws": "2000", "chains": "4", "seed": "1"}
    cfg["predict"] = {"domain": "common"}
    cfg["output"] = {"dir": "runs/example"}
    with open(out / "example.ini", "w") as fh:
        fh.write("# Synthetic 2-model fixture; true weights (0.3, 0.7), noise sd 0.1.\n")
        cfg.write(fh)
    return out
