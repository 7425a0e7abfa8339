"""Domain types: misclassification mechanisms, exposure models, model specs, datasets.

Matrix orientation is fixed throughout the package: ``entries[l][k]`` is
``Pr(w = k | x = l)``, so rows index the true value and each row sums to one.
Specificity is ``entries[0][0]`` and sensitivity is ``entries[1][1]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence, Union

import numpy as np
from scipy.special import expit

from .errors import (
    DimensionMismatch,
    EmptyCell,
    InvalidDataset,
    MissingColumn,
    MissingStratum,
    NotSupported,
    OutOfRange,
    RowNotStochastic,
)

FAMILIES = ("gaussian", "bernoulli-logit", "bernoulli-probit", "bernoulli-sslogit")
BINARY_FAMILIES = FAMILIES[1:]

_ROW_TOL = 1e-9


def _frozen(a, dtype=float):
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class MisclassMatrix:
    """Validated 2x2 row-stochastic misclassification matrix.

    Build through :func:`validate_mc_matrix` rather than directly.
    """

    entries: np.ndarray

    @property
    def specificity(self) -> float:
        return float(self.entries[0, 0])

    @property
    def sensitivity(self) -> float:
        return float(self.entries[1, 1])

    def prob(self, observed: int, true: int) -> float:
        """``Pr(w = observed | x = true)``."""
        return float(self.entries[true, observed])

    def tolist(self):
        return self.entries.tolist()

    def __eq__(self, other):
        return isinstance(other, MisclassMatrix) and np.array_equal(self.entries, other.entries)

    def __hash__(self):
        return hash(self.entries.tobytes())


def validate_mc_matrix(entries) -> MisclassMatrix:
    """Validate a 2x2 table of conditional observation probabilities.

    Rows whose sums are off by less than 1e-9 are renormalised so that the
    stored matrix is stochastic to machine precision.

    Raises
    ------
    NotSupported
        For square tables with more than two levels.
    OutOfRange
        If any entry lies outside [0, 1] or is not finite.
    RowNotStochastic
        If a row sum deviates from one by more than 1e-9.
    """
    arr = np.array(entries, dtype=float)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise DimensionMismatch(f"misclassification matrix must be square, got shape {arr.shape}")
    if arr.shape != (2, 2):
        raise NotSupported(f"only binary (2x2) misclassification is supported, got {arr.shape}")
    if not np.all(np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0):
        raise OutOfRange(f"misclassification entries must lie in [0, 1]: {arr.tolist()}")
    sums = arr.sum(axis=1)
    bad = np.abs(sums - 1.0) > _ROW_TOL
    if np.any(bad):
        row = int(np.flatnonzero(bad)[0])
        raise RowNotStochastic(f"row {row} sums to {sums[row]!r}, expected 1")
    arr = arr / sums[:, None]
    return MisclassMatrix(_frozen(arr))


IDENTITY = validate_mc_matrix([[1.0, 0.0], [0.0, 1.0]])


# --------------------------------------------------------------------------- #
# Misclassification models
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class UniformMC:
    """Nondifferential misclassification: one matrix for every observation."""

    matrix: MisclassMatrix


@dataclass(frozen=True)
class DifferentialMC:
    """One matrix per response level (misclassification depends on y)."""

    by_response: Mapping[int, MisclassMatrix]

    def __post_init__(self):
        object.__setattr__(self, "by_response", MappingProxyType(
            {int(k): v for k, v in self.by_response.items()}))


@dataclass(frozen=True)
class CovariateDependentMC:
    """Misclassification probabilities that vary with a covariate ``z``.

    ``logit(Pr(w=1|x=0)) = g00 + g0z * z`` and
    ``logit(Pr(w=0|x=1)) = g10 + g1z * z``, with
    ``gamma = (g00, g0z, g10, g1z)``.
    """

    gamma: tuple
    z_column: str

    def __post_init__(self):
        g = tuple(float(v) for v in self.gamma)
        if len(g) != 4:
            raise DimensionMismatch("gamma must hold (g00, g0z, g10, g1z)")
        object.__setattr__(self, "gamma", g)

    def matrix_at(self, z: float) -> MisclassMatrix:
        g00, g0z, g10, g1z = self.gamma
        p10 = float(expit(g00 + g0z * z))
        p01 = float(expit(g10 + g1z * z))
        return validate_mc_matrix([[1.0 - p10, p10], [p01, 1.0 - p01]])


MisclassModel = Union[UniformMC, DifferentialMC, CovariateDependentMC]


def mc_matrix_for_observation(model: MisclassModel, obs_index: int | None = None,
                              response_level: int | None = None,
                              z_value: float | None = None) -> MisclassMatrix:
    """Effective misclassification matrix for a single observation."""
    if isinstance(model, UniformMC):
        return model.matrix
    if isinstance(model, DifferentialMC):
        if response_level is None or int(response_level) not in model.by_response:
            where = "" if obs_index is None else f" (row {obs_index})"
            raise MissingStratum(f"no misclassification matrix for response level {response_level!r}{where}")
        return model.by_response[int(response_level)]
    if isinstance(model, CovariateDependentMC):
        if z_value is None:
            raise MissingStratum(f"covariate {model.z_column!r} value required")
        return model.matrix_at(float(z_value))
    raise TypeError(f"unknown misclassification model {type(model).__name__}")


# --------------------------------------------------------------------------- #
# Exposure model
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class ExposureModel:
    """Logistic model for ``Pr(x = 1)`` with known coefficients.

    When ``stratified_probs`` is given the probability depends only on the
    response level (case-control style exposure), and the logistic
    coefficients are ignored.
    """

    alpha0: float = 0.0
    alpha_z: tuple = ()
    columns: tuple = ()
    stratified_probs: Mapping[int, float] | None = None

    def __post_init__(self):
        object.__setattr__(self, "alpha0", float(self.alpha0))
        object.__setattr__(self, "alpha_z", tuple(float(a) for a in self.alpha_z))
        object.__setattr__(self, "columns", tuple(self.columns))
        if self.columns and len(self.columns) != len(self.alpha_z):
            raise DimensionMismatch(
                f"{len(self.alpha_z)} exposure slopes for {len(self.columns)} columns")
        if self.stratified_probs is not None:
            probs = {int(k): float(v) for k, v in self.stratified_probs.items()}
            for k, v in probs.items():
                if not 0.0 < v < 1.0:
                    raise OutOfRange(f"stratified exposure probability for level {k} is {v}")
            object.__setattr__(self, "stratified_probs", MappingProxyType(probs))


def exposure_probability(model: ExposureModel, exposure_row: Sequence[float] = (),
                         response_level: int | None = None) -> float:
    """``Pr(x_i = 1)`` under the exposure model."""
    if model.stratified_probs is not None:
        if response_level is None or int(response_level) not in model.stratified_probs:
            raise MissingStratum(f"no exposure probability for response level {response_level!r}")
        return model.stratified_probs[int(response_level)]
    row = np.asarray(exposure_row, dtype=float).reshape(-1)
    if row.shape[0] != len(model.alpha_z):
        raise DimensionMismatch(f"exposure row has {row.shape[0]} values, model has {len(model.alpha_z)} slopes")
    return float(expit(model.alpha0 + row @ np.asarray(model.alpha_z, dtype=float)))


# --------------------------------------------------------------------------- #
# Model specification
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class FixedNoise:
    sigma2: float

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise OutOfRange("fixed noise variance must be positive")


@dataclass(frozen=True)
class NIGNoise:
    """Inverse-gamma prior IG(a, b) on the noise variance, with
    coefficient prior covariance scaled by the noise variance."""

    a: float = 0.01
    b: float = 0.01

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise OutOfRange("NIG hyperparameters a, b must be positive")


@dataclass(frozen=True)
class GlmSpec:
    """Regression model of interest.

    The design is ``[1, x, covariates...]``; ``prior_beta_variance`` is either
    a scalar applied to every coefficient or a sequence aligned to the design.
    For the ``bernoulli-sslogit`` family, ``pi00``/``pi11`` carry the assumed
    specificity and sensitivity of the response.
    """

    family: str = "gaussian"
    response: str = "y"
    covariates: tuple = ()
    mc_covariate: str | None = "w"
    prior_beta_variance: float | tuple = 1000.0
    noise: FixedNoise | NIGNoise = field(default_factory=NIGNoise)
    pi00: float | None = None
    pi11: float | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise NotSupported(f"family must be one of {FAMILIES}, got {self.family!r}")
        object.__setattr__(self, "covariates", tuple(self.covariates))
        v = self.prior_beta_variance
        if np.ndim(v) == 0:
            ok = float(v) > 0
        else:
            v = tuple(float(a) for a in v)
            object.__setattr__(self, "prior_beta_variance", v)
            ok = all(a > 0 for a in v) and len(v) == self.n_coef
        if not ok:
            raise OutOfRange("prior variances must be positive and match the design width")

    @property
    def coef_names(self) -> list[str]:
        names = ["beta_0"]
        if self.mc_covariate is not None:
            names.append("beta_x")
        names += [f"beta_{c}" for c in self.covariates]
        return names

    @property
    def n_coef(self) -> int:
        return 1 + (self.mc_covariate is not None) + len(self.covariates)

    def prior_variances(self) -> np.ndarray:
        v = self.prior_beta_variance
        if np.ndim(v) == 0:
            return np.full(self.n_coef, float(v))
        return np.asarray(v, dtype=float)


# --------------------------------------------------------------------------- #
# Dataset
# --------------------------------------------------------------------------- #


def _binary_with_mask(values, name):
    """Split a sequence that may contain None/NaN into (int8 values, missing mask)."""
    vals = list(values)
    missing = np.array([v is None or (isinstance(v, float) and np.isnan(v)) for v in vals], dtype=bool)
    out = np.zeros(len(vals), dtype=np.int8)
    for i, v in enumerate(vals):
        if missing[i]:
            continue
        if v not in (0, 1):
            raise InvalidDataset(f"{name}[{i}] = {v!r} is not in {{0, 1}}")
        out[i] = int(v)
    out.setflags(write=False)
    missing.setflags(write=False)
    return out, missing


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-aligned observation table.

    ``w`` holds the error-prone binary covariate with an explicit boolean
    ``w_missing`` mask (values under the mask are meaningless); passing
    ``w=None`` marks it absent, e.g. for response-only models.  ``x_known``
    optionally carries validated true covariate values (e.g. a validation
    sub-study) with its own mask; known rows are never resampled.  ``truth``
    is the hidden true covariate for simulated data and is used only for
    evaluation.
    """

    y: np.ndarray
    w: np.ndarray
    w_missing: np.ndarray
    columns: Mapping[str, np.ndarray]
    x_known: np.ndarray | None = None
    x_known_missing: np.ndarray | None = None
    truth: Mapping[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_columns(cls, y, w, columns: Mapping[str, Iterable[float]] | None = None,
                     x_known=None, truth: Mapping | None = None) -> "Dataset":
        y_arr = _frozen(y)
        n = y_arr.shape[0]
        if w is None:
            w = [None] * n
        w_vals, w_miss = _binary_with_mask(w, "w")
        cols = {}
        for name, col in (columns or {}).items():
            arr = _frozen(col)
            if arr.shape != (n,):
                raise InvalidDataset(f"column {name!r} has length {arr.shape[0]}, expected {n}")
            if not np.all(np.isfinite(arr)):
                raise InvalidDataset(f"column {name!r} has non-finite values")
            cols[name] = arr
        if w_vals.shape[0] != n:
            raise InvalidDataset(f"w has length {w_vals.shape[0]}, expected {n}")
        if not np.all(np.isfinite(y_arr)):
            raise InvalidDataset("response has non-finite values")
        xk = xk_miss = None
        if x_known is not None:
            xk, xk_miss = _binary_with_mask(x_known, "x_known")
            if xk.shape[0] != n:
                raise InvalidDataset("x_known length mismatch")
        tr = {k: _frozen(v) for k, v in (truth or {}).items()}
        return cls(y_arr, w_vals, w_miss, MappingProxyType(cols), xk, xk_miss, MappingProxyType(tr))

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    def column(self, name: str) -> np.ndarray:
        try:
            return self.columns[name]
        except KeyError:
            raise MissingColumn(name) from None

    def matrix(self, names: Sequence[str]) -> np.ndarray:
        if not names:
            return np.empty((self.n, 0))
        return np.column_stack([self.column(c) for c in names])

    def response_levels(self) -> np.ndarray:
        """Response as integer levels; fails unless y is binary."""
        if not np.all((self.y == 0) | (self.y == 1)):
            raise InvalidDataset("response is not binary; strata by response level undefined")
        return self.y.astype(np.int8)

    def check_family(self, family: str) -> None:
        if family in BINARY_FAMILIES:
            self.response_levels()

    def subset(self, rows) -> "Dataset":
        """Rows selected by an index array or boolean mask."""
        idx = np.arange(self.n)[np.asarray(rows)]
        w = [None if self.w_missing[i] else int(self.w[i]) for i in idx]
        known = None
        if self.x_known is not None:
            known = [None if self.x_known_missing[i] else int(self.x_known[i]) for i in idx]
        return Dataset.from_columns(self.y[idx], w, {k: v[idx] for k, v in self.columns.items()},
                                    x_known=known, truth={k: v[idx] for k, v in self.truth.items()})

    def observed_w(self) -> np.ndarray:
        """w as float with NaN at missing entries (for export only)."""
        out = self.w.astype(float)
        out[self.w_missing] = np.nan
        return out


def design_matrix(dataset: Dataset, spec: GlmSpec, x: np.ndarray | None = None) -> np.ndarray:
    """``[1, x, covariates]``; ``x`` defaults to the observed ``w``."""
    cols = [np.ones(dataset.n)]
    if spec.mc_covariate is not None:
        if x is None:
            if np.any(dataset.w_missing):
                raise InvalidDataset("observed covariate has missing entries; pass x explicitly")
            x = dataset.w
        cols.append(np.asarray(x, dtype=float))
    for c in spec.covariates:
        cols.append(dataset.column(c))
    return np.column_stack(cols)


# --------------------------------------------------------------------------- #
# Vectorised per-observation helpers
# --------------------------------------------------------------------------- #


def exposure_probabilities(model: ExposureModel, dataset: Dataset) -> np.ndarray:
    """Per-observation ``Pr(x_i = 1)``."""
    if model.stratified_probs is not None:
        levels = dataset.response_levels()
        out = np.empty(dataset.n)
        for lvl in (0, 1):
            rows = levels == lvl
            if np.any(rows):
                if lvl not in model.stratified_probs:
                    raise MissingStratum(f"no exposure probability for response level {lvl} "
                                         f"(row {int(np.flatnonzero(rows)[0])})")
                out[rows] = model.stratified_probs[lvl]
        return out
    Zt = dataset.matrix(model.columns)
    if Zt.shape[1] != len(model.alpha_z):
        raise DimensionMismatch("exposure columns do not match slopes")
    return expit(model.alpha0 + Zt @ np.asarray(model.alpha_z, dtype=float))


def observation_matrices(model: MisclassModel, dataset: Dataset) -> np.ndarray:
    """Stack of effective matrices, shape (n, 2, 2)."""
    n = dataset.n
    if isinstance(model, UniformMC):
        return np.broadcast_to(model.matrix.entries, (n, 2, 2))
    if isinstance(model, DifferentialMC):
        levels = dataset.response_levels()
        out = np.empty((n, 2, 2))
        for lvl in (0, 1):
            rows = levels == lvl
            if np.any(rows):
                out[rows] = mc_matrix_for_observation(model, int(np.flatnonzero(rows)[0]), lvl).entries
        return out
    if isinstance(model, CovariateDependentMC):
        z = dataset.column(model.z_column)
        g00, g0z, g10, g1z = model.gamma
        p10 = expit(g00 + g0z * z)
        p01 = expit(g10 + g1z * z)
        out = np.empty((n, 2, 2))
        out[:, 0, 0] = 1.0 - p10
        out[:, 0, 1] = p10
        out[:, 1, 0] = p01
        out[:, 1, 1] = 1.0 - p01
        return out
    raise TypeError(f"unknown misclassification model {type(model).__name__}")


# --------------------------------------------------------------------------- #
# Validation-data estimation
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class ValidationEstimate:
    matrices: Mapping[int, MisclassMatrix]
    exposure_probs: Mapping[int, float]
    stratum_totals: Mapping[tuple, int]      # (y, x) -> count
    response_totals: Mapping[int, int]       # y -> count


def estimate_mc_from_validation(counts: Iterable[tuple]) -> ValidationEstimate:
    """Sample proportions from validation rows ``(y, x, w, frequency)``.

    Returns ``Pr(w = k | x = l, y = m)`` as one matrix per response level
    and ``Pr(x = 1 | y = m)`` as the stratified exposure probability.
    """
    table = np.zeros((2, 2, 2))
    for y, x, w, freq in counts:
        if freq < 0:
            raise OutOfRange(f"negative frequency {freq}")
        table[int(y), int(x), int(w)] += freq
    matrices, exposure, totals, ytot = {}, {}, {}, {}
    for m in (0, 1):
        cell = table[m]
        if cell.sum() == 0:
            continue
        for l in (0, 1):
            totals[(m, l)] = int(cell[l].sum())
            if cell[l].sum() == 0:
                raise EmptyCell(f"no validation rows with y={m}, x={l}")
        matrices[m] = validate_mc_matrix(cell / cell.sum(axis=1, keepdims=True))
        ytot[m] = int(cell.sum())
        exposure[m] = float(cell[1].sum() / cell.sum())
    return ValidationEstimate(MappingProxyType(matrices), MappingProxyType(exposure),
                              MappingProxyType(totals), MappingProxyType(ytot))
