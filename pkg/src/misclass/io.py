"""Configuration documents, CSV ingestion and report bundles."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .core import (
    CovariateDependentMC,
    Dataset,
    DifferentialMC,
    ExposureModel,
    FixedNoise,
    GlmSpec,
    NIGNoise,
    UniformMC,
    validate_mc_matrix,
)
from .errors import ConfigError, MisclassError, MissingColumn, ParseError

SCHEMA_VERSION = "1.0"
DEFAULT_QUANTILES = (0.025, 0.5, 0.975)
LATENT_GAUSSIAN = "latent-gaussian"


@dataclass(frozen=True)
class ExperimentSettings:
    replicates: int = 1
    output_dir: str | None = None
    emit_trace: bool = False
    quantile_levels: tuple = DEFAULT_QUANTILES


@dataclass(frozen=True, eq=False)
class ModelConfig:
    """Parsed model-specification document.

    ``glm_spec`` is ``None`` for the latent-Gaussian family, whose settings
    live in ``latent``.
    """

    family: str
    response: str
    covariates: tuple
    mc_covariate: str | None
    glm_spec: GlmSpec | None
    mc_model: Any
    exposure: ExposureModel | None
    iterations: int | None
    seed: int | None
    known_covariate: str | None = None
    truth_covariate: str | None = None
    latent: Mapping = field(default_factory=dict)
    experiment: ExperimentSettings = field(default_factory=ExperimentSettings)
    raw: Mapping = field(default_factory=dict)

    def exposure_columns(self) -> tuple:
        return () if self.exposure is None else self.exposure.columns

    def required_columns(self) -> list[str]:
        cols = [self.response, *self.covariates]
        if self.mc_covariate is not None:
            cols.append(self.mc_covariate)
        cols += list(self.exposure_columns())
        if isinstance(self.mc_model, CovariateDependentMC):
            cols.append(self.mc_model.z_column)
        for c in (self.known_covariate, self.truth_covariate):
            if c is not None:
                cols.append(c)
        return list(dict.fromkeys(cols))

    def with_overrides(self, iterations=None, seed=None) -> "ModelConfig":
        kw = dict(self.__dict__)
        if iterations is not None:
            kw["iterations"] = int(iterations)
        if seed is not None:
            kw["seed"] = int(seed)
        return ModelConfig(**kw)


def _need(doc, key, where="config"):
    if key not in doc:
        raise ConfigError(f"{where}: missing required field {key!r}")
    return doc[key]


def _levels(mapping, where):
    try:
        return {int(k): v for k, v in mapping.items()}
    except (AttributeError, TypeError, ValueError):
        raise ConfigError(f"{where}: expected an object keyed by response level 0/1") from None


def _parse_mc_model(doc):
    variant = _need(doc, "variant", "mc_model")
    if variant in ("uniform", "nondifferential"):
        return UniformMC(validate_mc_matrix(_need(doc, "entries", "mc_model")))
    if variant == "differential":
        per = _levels(_need(doc, "per_response", "mc_model"), "mc_model.per_response")
        return DifferentialMC({k: validate_mc_matrix(v) for k, v in per.items()})
    if variant in ("covariate", "covariate-dependent"):
        return CovariateDependentMC(tuple(_need(doc, "gamma", "mc_model")),
                                    _need(doc, "column", "mc_model"))
    raise ConfigError(f"mc_model.variant {variant!r} is not one of uniform, differential, covariate")


def _parse_exposure(doc):
    if "per_response" in doc:
        return ExposureModel(stratified_probs=_levels(doc["per_response"], "exposure.per_response"))
    alpha0 = float(doc.get("alpha0", 0.0))
    az = doc.get("alpha_z", {})
    if isinstance(az, Mapping):
        return ExposureModel(alpha0, tuple(az.values()), tuple(az.keys()))
    cols = tuple(doc.get("columns", ()))
    if len(cols) != len(az):
        raise ConfigError("exposure.alpha_z given as a list needs matching exposure.columns")
    return ExposureModel(alpha0, tuple(az), cols)


def _parse_noise(doc):
    if doc is None:
        return NIGNoise()
    kind = doc.get("type", "nig")
    if kind == "nig":
        return NIGNoise(float(doc.get("a", 0.01)), float(doc.get("b", 0.01)))
    if kind == "fixed":
        return FixedNoise(float(_need(doc, "sigma2", "priors.noise")))
    raise ConfigError(f"priors.noise.type {kind!r} is not nig or fixed")


def parse_config(doc: Mapping) -> ModelConfig:
    """Validate a configuration document (already decoded from JSON)."""
    if not isinstance(doc, Mapping):
        raise ConfigError("configuration must be a JSON object")
    family = doc.get("family", "gaussian")
    response = doc.get("response", "y")
    covariates = tuple(doc.get("covariates", ()))
    mc_cov = doc.get("mc_covariate", "w")
    priors = doc.get("priors", {})
    sampler = doc.get("sampler", {})
    exp_doc = doc.get("experiment", {})
    experiment = ExperimentSettings(
        replicates=int(exp_doc.get("replicates", 1)),
        output_dir=exp_doc.get("output_dir"),
        emit_trace=bool(exp_doc.get("emit_trace", False)),
        quantile_levels=tuple(float(a) for a in exp_doc.get("quantile_levels", DEFAULT_QUANTILES)))
    seed = sampler.get("seed")
    iterations = sampler.get("iterations")
    try:
        if family == LATENT_GAUSSIAN:
            return ModelConfig(family, response, covariates, mc_cov, None, None, None,
                               iterations, seed, latent=dict(doc.get("latent", {})),
                               experiment=experiment, raw=dict(doc))
        rmc = doc.get("response_mc", {})
        spec = GlmSpec(family=family, response=response, covariates=covariates,
                       mc_covariate=mc_cov, prior_beta_variance=priors.get("beta_variance", 1000.0),
                       noise=_parse_noise(priors.get("noise")),
                       pi00=rmc.get("pi00"), pi11=rmc.get("pi11"))
        mc_model = _parse_mc_model(doc["mc_model"]) if "mc_model" in doc else None
        exposure = _parse_exposure(doc["exposure"]) if "exposure" in doc else None
    except ConfigError:
        raise
    except (MisclassError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid model specification: {exc}") from exc
    if mc_cov is not None and family != "bernoulli-sslogit" and (mc_model is None or exposure is None):
        raise ConfigError("an error-prone covariate needs both mc_model and exposure blocks")
    return ModelConfig(family, response, covariates, mc_cov, spec, mc_model, exposure,
                       None if iterations is None else int(iterations),
                       None if seed is None else int(seed),
                       known_covariate=doc.get("known_covariate"),
                       truth_covariate=doc.get("truth_covariate"), experiment=experiment,
                       raw=dict(doc))


def load_config(path) -> ModelConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return parse_config(doc)


def read_table(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path}: no header row") from None
        rows = [r for r in reader if r]
    return header, rows


def load_csv(path, config: ModelConfig) -> Dataset:
    """Read a CSV into a ``Dataset`` typed by ``config``.

    Empty fields are allowed only in the error-prone covariate column (and
    in the optional known-covariate column) where they mark missing values.
    ``ParseError.row`` is the 1-based data row.
    """
    header, rows = read_table(path)
    for col in config.required_columns():
        if col not in header:
            raise MissingColumn(col)
    optional = {c for c in (config.mc_covariate, config.known_covariate) if c is not None}
    values: dict[str, list] = {c: [] for c in config.required_columns()}
    pos = {c: header.index(c) for c in values}
    for r, row in enumerate(rows, start=1):
        if len(row) != len(header):
            raise ParseError(f"row {r} has {len(row)} fields, header has {len(header)}", row=r)
        for c, j in pos.items():
            cell = row[j].strip()
            if cell == "":
                if c in optional:
                    values[c].append(None)
                    continue
                raise ParseError(f"empty field in column {c!r} at row {r}", row=r, column=c)
            try:
                v = float(cell)
            except ValueError:
                raise ParseError(f"non-numeric value {cell!r} in column {c!r} at row {r}",
                                 row=r, column=c) from None
            if not math.isfinite(v):
                raise ParseError(f"non-finite value in column {c!r} at row {r}", row=r, column=c)
            values[c].append(v)
    if config.mc_covariate is not None:
        values[config.mc_covariate] = [None if v is None else _as_binary(v, config.mc_covariate, r)
                                       for r, v in enumerate(values[config.mc_covariate], start=1)]
    special = (config.response, config.mc_covariate, config.known_covariate, config.truth_covariate)
    others = {c: values[c] for c in values if c not in special}
    w = None if config.mc_covariate is None else values[config.mc_covariate]
    known = None
    if config.known_covariate is not None:
        known = [None if v is None else _as_binary(v, config.known_covariate, r)
                 for r, v in enumerate(values[config.known_covariate], start=1)]
    truth = {}
    if config.truth_covariate is not None:
        truth["x"] = [_as_binary(v, config.truth_covariate, r)
                      for r, v in enumerate(values[config.truth_covariate], start=1)]
    return Dataset.from_columns(values[config.response], w, others, x_known=known, truth=truth)


def _as_binary(v, column, row):
    if v not in (0.0, 1.0):
        raise ParseError(f"column {column!r} must be 0/1, got {v!r} at row {row}", row=row, column=column)
    return int(v)


def write_dataset_csv(path, columns: Mapping[str, Any]) -> None:
    """Write aligned columns; ``None``/NaN become empty fields."""
    names = list(columns)
    n = len(next(iter(columns.values())))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(names)
        for i in range(n):
            wr.writerow([_fmt(columns[c][i]) for c in names])


def _fmt(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


# --------------------------------------------------------------------------- #
# Reports
# --------------------------------------------------------------------------- #


def to_jsonable(obj):
    """Make a structure JSON-serialisable with plain Python floats."""
    if isinstance(obj, Mapping):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [to_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


@dataclass
class ReportBundle:
    """Summary rows for every fitted model variant plus run metadata."""

    experiment: str
    metadata: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)
    wall_time: float | None = None

    def add(self, model_variant: str, coefficient: str, mean: float, lo95: float, hi95: float,
            replicate: int = 0, **extra) -> None:
        row = {"replicate": int(replicate), "model_variant": model_variant,
               "coefficient": coefficient, "mean": float(mean), "lo95": float(lo95),
               "hi95": float(hi95)}
        row.update(extra)
        self.rows.append(row)

    def find(self, model_variant: str, coefficient: str, replicate: int = 0) -> dict:
        for r in self.rows:
            if (r["model_variant"], r["coefficient"], r["replicate"]) == (model_variant, coefficient, replicate):
                return r
        raise KeyError((model_variant, coefficient, replicate))

    def to_dict(self, include_timing: bool = True) -> dict:
        meta = dict(self.metadata)
        if include_timing:
            meta["wall_time_seconds"] = self.wall_time
        return to_jsonable({"schema_version": SCHEMA_VERSION, "experiment": self.experiment,
                       "metadata": meta, "estimates": self.rows, "extras": self.extras})

    def to_json(self, include_timing: bool = True) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True) + "\n"

    def write(self, out_dir) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"json": out / f"{self.experiment}.json", "csv": out / f"{self.experiment}.csv"}
        paths["json"].write_text(self.to_json(), encoding="utf-8")
        with open(paths["csv"], "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh)
            wr.writerow(["replicate", "model_variant", "coefficient", "mean", "lo95", "hi95"])
            for r in self.rows:
                wr.writerow([r["replicate"], r["model_variant"], r["coefficient"],
                             repr(r["mean"]), repr(r["lo95"]), repr(r["hi95"])])
        return paths
