"""INI run configuration: parsing, overrides, validation and object builders.

Sections: ``[data]``, ``[model]``, ``[priors]``, ``[sampler]``, ``[bma]``,
``[predict]``, ``[output]``.  Relative data paths resolve against the
directory of the config file; the snapshot written into a run directory
stores them absolute so a run can be rebuilt from the snapshot alone.
"""

from __future__ import annotations

import configparser
import csv
from pathlib import Path

from .bma import DEFAULT_DELTA_SCALE, ConjugatePrior, IndependentPrior
from .dataset import DataError, align, common_domain, even_even, load_model_table, load_observations, model_grid
from .mixtures import VARIANTS, PriorConfig
from .prob import Gamma, parse_dist
from .samplers import SamplerConfig

BMA_VARIANTS = {"bma-ex": "exact", "bma-mc": "mc", "bma-laplace": "laplace"}
ALL_VARIANTS = tuple(BMA_VARIANTS) + tuple(VARIANTS)

DEFAULTS = {
    "data": {
        "train": "",
        "test": "",
        "evidence": "",
        "grid": "",
        "models": "",
        "coords": "Z, N",
        "value_col": "value",
        "use_corrections": "false",
    },
    "model": {"variant": "", "intercept": "true", "resample_weights": "false"},
    "priors": {},
    "sampler": {},
    "bma": {
        "n_mc": "100000",
        "precision_shape": "0.252",
        "precision_rate": "0.030",
        "mu": "0.0",
        "sigma_prior": "Gamma(5, 10)",
        "delta_scale": str(DEFAULT_DELTA_SCALE),
        "approx_prior": "independent",
        "discrepancy": "true",
        "predictive_draws": "2000",
    },
    "predict": {
        "max_draws": "2000",
        "levels": "0.5, 0.68, 0.9, 0.95",
        "point": "mean",
        "seed": "0",
        "domain": "even-even",
    },
    "output": {"dir": "runs/default"},
}

PATH_KEYS = ("train", "test", "evidence", "grid")


class ConfigError(ValueError):
    """Invalid or incomplete run configuration (a usage error)."""


def _split_list(text):
    return [t.strip() for t in text.replace("\n", ",").split(",") if t.strip()]


class RunConfig:
    """A validated view over a ConfigParser."""

    def __init__(self, parser, base_dir="."):
        self.parser = parser
        self.base_dir = Path(base_dir)
        for section, values in DEFAULTS.items():
            if not parser.has_section(section):
                parser.add_section(section)
            for k, v in values.items():
                if not parser.has_option(section, k):
                    parser.set(section, k, v)
        self._absolutize()
        self.validate()

    # -- construction ------------------------------------------------------

    @classmethod
    def from_file(cls, path, overrides=()):
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser()
        try:
            parser.read(path)
        except configparser.Error as e:
            raise ConfigError(f"cannot parse {path}: {e}") from None
        apply_overrides(parser, overrides)
        return cls(parser, path.parent)

    def _absolutize(self):
        def resolve(p):
            p = Path(p).expanduser()
            return str(p if p.is_absolute() else (self.base_dir / p).resolve())

        d = self.parser["data"]
        for key in PATH_KEYS:
            if d.get(key):
                d[key] = resolve(d[key])
        if d.get("models"):
            d["models"] = ", ".join(resolve(m) for m in _split_list(d["models"]))

    def validate(self):
        v = self.variant
        if v not in ALL_VARIANTS:
            raise ConfigError(f"unknown variant {v!r}; choose one of {', '.join(ALL_VARIANTS)}")
        if not self.parser["data"].get("train"):
            raise ConfigError("[data] train is required")
        if len(self.model_paths) < (1 if self.is_bma else 2):
            raise ConfigError("[data] models must list the model tables (mixing needs two or more)")
        known = set(PriorConfig.__dataclass_fields__)
        for k in self.parser["priors"]:
            if k not in known:
                raise ConfigError(f"[priors] unknown key {k!r}")
        self.sampler_config()
        self.priors()
        self.levels
        if self.domain not in ("even-even", "common"):
            raise ConfigError("[predict] domain must be 'even-even' or 'common'")

    # -- accessors -------------------------------------------------------

    @property
    def variant(self):
        return self.parser["model"]["variant"].strip().lower()

    @property
    def is_bma(self):
        return self.variant in BMA_VARIANTS

    @property
    def model_paths(self):
        return _split_list(self.parser["data"]["models"])

    @property
    def coords(self):
        return tuple(_split_list(self.parser["data"]["coords"]))

    @property
    def use_corrections(self):
        return self._bool("data", "use_corrections")

    @property
    def seed(self):
        return self.sampler_config().seed

    @property
    def levels(self):
        try:
            lv = [float(x) for x in _split_list(self.parser["predict"]["levels"])]
        except ValueError:
            raise ConfigError("[predict] levels must be numbers") from None
        if not lv or any(not 0 < x < 1 for x in lv):
            raise ConfigError("[predict] levels must lie in (0, 1)")
        return sorted(lv)

    @property
    def domain(self):
        return self.parser["predict"]["domain"].strip().lower()

    def get(self, section, key, cast=str):
        raw = self.parser[section][key]
        try:
            return cast(raw)
        except ValueError:
            raise ConfigError(f"[{section}] {key} = {raw!r} is not a valid {cast.__name__}") from None

    def _bool(self, section, key):
        try:
            return self.parser.getboolean(section, key)
        except ValueError:
            raise ConfigError(f"[{section}] {key} must be true/false") from None

    def path(self, key):
        p = self.parser["data"].get(key, "")
        return Path(p) if p else None

    def sampler_config(self):
        sec = self.parser["sampler"]
        fields = SamplerConfig.__dataclass_fields__
        kw = {}
        for k, raw in sec.items():
            if k not in fields:
                raise ConfigError(f"[sampler] unknown key {k!r}")
            typ = type(fields[k].default)
            try:
                kw[k] = typ(raw) if typ is not str else raw.strip()
            except ValueError:
                raise ConfigError(f"[sampler] {k} = {raw!r} is not a valid {typ.__name__}") from None
        base = {"total_draws": 2000, "chains": 4}
        try:
            return SamplerConfig(**{**base, **kw})
        except ValueError as e:
            raise ConfigError(f"[sampler] {e}") from None

    def priors(self):
        kw = {}
        for k, raw in self.parser["priors"].items():
            try:
                kw[k] = parse_dist(raw)
            except ValueError as e:
                raise ConfigError(f"[priors] {k}: {e}") from None
        return PriorConfig(**kw)

    def bma_priors(self):
        """``(exact_prior, approx_prior)`` for the closed form and for MC/Laplace."""
        b = self.parser["bma"]
        mu = self.get("bma", "mu", float)
        try:
            exact = ConjugatePrior(mu, float(b["precision_shape"]), float(b["precision_rate"]))
            kind = b["approx_prior"].strip().lower()
            if kind == "conjugate":
                approx = exact
            elif kind == "independent":
                sig = parse_dist(b["sigma_prior"])
                if not isinstance(sig, Gamma):
                    raise ConfigError("[bma] sigma_prior must be a Gamma distribution")
                approx = IndependentPrior(sig, mu, float(b["delta_scale"]))
            else:
                raise ConfigError("[bma] approx_prior must be 'independent' or 'conjugate'")
        except ValueError as e:
            raise ConfigError(f"[bma] {e}") from None
        return exact, approx

    def output_dir(self):
        return Path(self.parser["output"]["dir"])

    # -- data --------------------------------------------------------------

    def model_tables(self):
        return [load_model_table(p, coords=self.coords) for p in self.model_paths]

    def load(self, key, tables=None):
        """Aligned dataset for the observation file under ``[data] key`` (None if unset)."""
        p = self.path(key)
        if p is None:
            return None
        tables = self.model_tables() if tables is None else tables
        obs = load_observations(p, coords=self.coords, value_col=self.parser["data"]["value_col"])
        return align(obs, tables, corrections=True if self.use_corrections else False)

    def grid(self, tables=None):
        """Prediction grid: ``[data] grid`` locations, else the models' common domain.

        With ``[predict] domain = even-even`` (the default) the common domain
        is restricted to locations whose coordinates are all even.
        """
        tables = self.model_tables() if tables is None else tables
        corr = True if self.use_corrections else False
        p = self.path("grid")
        if p is None:
            if self.domain == "even-even":
                locs = even_even(common_domain(tables))
                if not locs:
                    raise DataError("no even-even locations in the models' common domain")
                return model_grid(tables, locs, corrections=corr)
            return model_grid(tables, corrections=corr)
        locs = _read_locations(p, self.coords)
        return model_grid(tables, locs, corrections=corr)

    def write(self, path):
        with open(path, "w") as fh:
            self.parser.write(fh)


def _read_locations(path, coords):
    out = []
    with open(path, newline="") as fh:
        for rownum, rec in enumerate(csv.DictReader(fh), start=2):
            try:
                out.append(tuple(float(rec[c]) for c in coords))
            except (KeyError, TypeError, ValueError):
                raise DataError(f"{path}: row {rownum}: bad location") from None
    return out


def apply_overrides(parser, overrides):
    """Apply ``section.key=value`` strings to a ConfigParser."""
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        lhs, value = item.split("=", 1)
        section, key = lhs.split(".", 1)
        section, key = section.strip(), key.strip()
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, value.strip())
