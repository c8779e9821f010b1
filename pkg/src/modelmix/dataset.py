"""Observation and model-prediction tables, alignment and data splits.

Locations are tuples of floats compared by exact equality after parsing;
for nuclear data they are ``(Z, N)``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

Location = tuple

DEFAULT_COORDS = ("Z", "N")

# Evidence nuclei (Z, N): 148Er, 188Po, 242Cf, 64Cr, 116Ru, 160Nd, 168Hf, 232Ra.
NUCLEAR_EVIDENCE = (
    (68.0, 80.0),
    (84.0, 104.0),
    (98.0, 144.0),
    (24.0, 40.0),
    (44.0, 72.0),
    (60.0, 100.0),
    (72.0, 96.0),
    (88.0, 144.0),
)


class DataError(ValueError):
    """Malformed or inconsistent input data."""


def format_location(loc):
    return "(" + ",".join(f"{c:g}" for c in loc) + ")"


@dataclass
class ObservationSet:
    locations: list
    values: np.ndarray
    ids: list = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if not self.ids:
            self.ids = [None] * len(self.locations)
        if len(self.locations) != len(self.values):
            raise DataError("locations and values differ in length")
        seen = set()
        for loc in self.locations:
            if loc in seen:
                raise DataError(f"duplicate location {format_location(loc)}")
            seen.add(loc)
        if not np.all(np.isfinite(self.values)):
            raise DataError("observation values must be finite")

    def __len__(self):
        return len(self.locations)

    def subset(self, locations):
        index = {loc: i for i, loc in enumerate(self.locations)}
        rows = [index[loc] for loc in locations]
        return ObservationSet(
            [self.locations[i] for i in rows], self.values[rows], [self.ids[i] for i in rows]
        )


@dataclass
class ModelTable:
    name: str
    predictions: dict
    corrections: dict | None = None

    def __post_init__(self):
        if self.corrections is not None and set(self.corrections) != set(self.predictions):
            raise DataError(f"{self.name}: corrections must cover the prediction domain")


@dataclass
class AlignedDataset:
    """Observations joined row-wise with model predictions.

    ``y`` is None for prediction grids without observations.  ``D`` holds
    the systematic corrections, or None when they are unavailable/disabled.
    """

    locations: list
    y: np.ndarray | None
    F: np.ndarray
    model_names: list
    D: np.ndarray | None = None

    @property
    def n(self):
        return len(self.locations)

    @property
    def p(self):
        return len(self.model_names)

    @property
    def coords(self):
        return np.array(self.locations, dtype=float).reshape(self.n, -1)

    def effective(self, use_corrections):
        """Model outputs entering the mixture: ``F`` or ``F + D``."""
        if use_corrections:
            if self.D is None:
                raise DataError("use_corrections requested but no corrections are loaded")
            return self.F + self.D
        return self.F

    def take(self, rows):
        rows = list(rows)
        return AlignedDataset(
            [self.locations[i] for i in rows],
            None if self.y is None else self.y[rows],
            self.F[rows],
            list(self.model_names),
            None if self.D is None else self.D[rows],
        )

    def select_models(self, names):
        cols = [self.model_names.index(n) for n in names]
        return AlignedDataset(
            list(self.locations),
            self.y,
            self.F[:, cols],
            list(names),
            None if self.D is None else self.D[:, cols],
        )


def _parse_float(text, path, row, col):
    try:
        v = float(text)
    except (TypeError, ValueError):
        raise DataError(f"{path}: row {row}: cannot parse column {col!r} value {text!r}") from None
    if not math.isfinite(v):
        raise DataError(f"{path}: row {row}: non-finite value in column {col!r}")
    return v


def _read_rows(path, required):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in required if c not in header]
        if missing:
            raise DataError(f"{path}: missing required column(s) {missing}")
        # row numbers count the header as row 1, like a spreadsheet
        for rownum, rec in enumerate(reader, start=2):
            if None in rec or any(rec.get(c) is None for c in required):
                raise DataError(f"{path}: row {rownum}: wrong number of fields")
            yield rownum, rec


def load_observations(path, coords=DEFAULT_COORDS, value_col="value", id_col="id"):
    """Read an observation CSV with columns ``Z, N, value`` (and optional ``id``)."""
    locations, values, ids = [], [], []
    seen = {}
    for rownum, rec in _read_rows(path, list(coords) + [value_col]):
        loc = tuple(_parse_float(rec[c], path, rownum, c) for c in coords)
        if loc in seen:
            raise DataError(
                f"{path}: row {rownum}: duplicate location {format_location(loc)}"
                f" (first seen at row {seen[loc]})"
            )
        seen[loc] = rownum
        locations.append(loc)
        values.append(_parse_float(rec[value_col], path, rownum, value_col))
        ids.append(rec.get(id_col) or None)
    return ObservationSet(locations, np.array(values, dtype=float), ids)


def load_model_table(path, name=None, coords=DEFAULT_COORDS, value_col="f", delta_col="delta"):
    """Read a per-model CSV with columns ``Z, N, f`` and optional ``delta``."""
    path = Path(path)
    name = name or path.stem
    preds, corr = {}, {}
    has_delta = None
    for rownum, rec in _read_rows(path, list(coords) + [value_col]):
        loc = tuple(_parse_float(rec[c], path, rownum, c) for c in coords)
        if loc in preds:
            raise DataError(f"{path}: row {rownum}: duplicate location {format_location(loc)}")
        preds[loc] = _parse_float(rec[value_col], path, rownum, value_col)
        raw = rec.get(delta_col)
        if has_delta is None:
            has_delta = raw not in (None, "")
        if has_delta:
            if raw in (None, ""):
                raise DataError(f"{path}: row {rownum}: missing {delta_col!r}")
            corr[loc] = _parse_float(raw, path, rownum, delta_col)
    return ModelTable(name, preds, corr if has_delta else None)


def _stack_corrections(tables, locations, corrections):
    have = [t.corrections is not None for t in tables]
    if corrections is False or not any(have):
        if corrections is True:
            raise DataError("corrections requested but no model table carries them")
        return None
    if not all(have):
        lacking = [t.name for t, h in zip(tables, have) if not h]
        raise DataError(
            f"mixed correction availability (missing for {lacking}); "
            "disable corrections explicitly"
        )
    return np.array([[t.corrections[loc] for t in tables] for loc in locations], dtype=float)


def _stack_predictions(tables, locations):
    F = np.empty((len(locations), len(tables)))
    for k, t in enumerate(tables):
        for i, loc in enumerate(locations):
            try:
                F[i, k] = t.predictions[loc]
            except KeyError:
                raise DataError(f"{t.name} missing {format_location(loc)}") from None
    return F


def align(obs, models, corrections=None):
    """Join observations with every model table.

    ``corrections``: None (use if every table has them, error if only some do),
    True (require) or False (ignore).
    """
    locations = list(obs.locations)
    F = _stack_predictions(models, locations)
    D = _stack_corrections(models, locations, corrections)
    return AlignedDataset(locations, obs.values.copy(), F, [m.name for m in models], D)


def common_domain(models):
    """Locations covered by every model table, sorted."""
    if not models:
        raise DataError("no model tables given")
    dom = set(models[0].predictions)
    for m in models[1:]:
        dom &= set(m.predictions)
    return sorted(dom)


def model_grid(models, locations=None, corrections=None):
    """Model outputs on a prediction grid (no observations)."""
    locations = common_domain(models) if locations is None else list(locations)
    F = _stack_predictions(models, locations)
    D = _stack_corrections(models, locations, corrections)
    return AlignedDataset(locations, None, F, [m.name for m in models], D)


def positive_domain(models, combine="mean", prediction=None):
    """Locations where the combined prediction is strictly positive.

    ``prediction`` (a map Location -> value, typically the posterior-mean
    mixture) takes precedence.  Otherwise ``combine="mean"`` averages the
    model outputs and ``combine="per-model"`` requires every model > 0.
    """
    if prediction is not None:
        if not prediction:
            raise DataError("empty prediction grid")
        return {loc for loc, v in prediction.items() if v > 0}
    grid = common_domain(models)
    if not grid:
        raise DataError("empty prediction grid")
    F = _stack_predictions(models, grid)
    if combine == "mean":
        keep = F.mean(axis=1) > 0
    elif combine == "per-model":
        keep = np.all(F > 0, axis=1)
    else:
        raise ValueError(f"unknown combine rule {combine!r}")
    return {loc for loc, k in zip(grid, keep) if k}


def even_even(locations):
    return [loc for loc in locations if all(float(c) % 2 == 0 for c in loc)]


@dataclass
class SplitSpec:
    """Index sets into an AlignedDataset.

    ``exclusions`` are training rows dropped when uncorrected models are fit.
    """

    train: list
    evidence: list = field(default_factory=list)
    test: list = field(default_factory=list)
    exclusions: list = field(default_factory=list)

    def __post_init__(self):
        self.train = sorted(int(i) for i in self.train)
        self.evidence = sorted(int(i) for i in self.evidence)
        self.test = sorted(int(i) for i in self.test)
        self.exclusions = sorted(int(i) for i in self.exclusions)
        if set(self.test) & set(self.train):
            raise DataError("test indices overlap training indices")

    def train_rows(self, use_corrections):
        if use_corrections:
            return list(self.train)
        drop = set(self.exclusions)
        return [i for i in self.train if i not in drop]

    def to_json(self):
        return json.dumps(
            {"train": self.train, "evidence": self.evidence, "test": self.test,
             "exclusions": self.exclusions}
        )

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(d["train"], d.get("evidence", []), d.get("test", []), d.get("exclusions", []))

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_json(Path(path).read_text())


def split_by_locations(data, train, evidence=(), test=(), exclusions=()):
    """Build a SplitSpec from location lists (every location must be in ``data``)."""
    index = {loc: i for i, loc in enumerate(data.locations)}

    def rows(locs):
        try:
            return [index[tuple(float(c) for c in loc)] for loc in locs]
        except KeyError as e:
            raise DataError(f"split location {format_location(e.args[0])} not in dataset") from None

    return SplitSpec(rows(train), rows(evidence), rows(test), rows(exclusions))


def nuclear_split(data, train_locations, test_locations, exclusions=()):
    """Default nuclear split: the 8 evidence nuclei are taken from the training set.

    The exclusion list defaults to empty.
    """
    missing = [loc for loc in NUCLEAR_EVIDENCE if loc not in set(train_locations)]
    if missing:
        raise DataError(
            "evidence nuclei absent from training data: "
            + ", ".join(format_location(m) for m in missing)
        )
    return split_by_locations(data, train_locations, NUCLEAR_EVIDENCE, test_locations, exclusions)
