"""
Design matrices for the regression families.

Categorical predictors are expanded into sparse dummy columns with one
reference level dropped per factor; numeric covariates and factor-by-column
interactions sit alongside. Rows are stored in a canonical order so a fit is
bit-identical under any permutation of its input rows.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import sparse

from .exceptions import GLMError, RankDeficientError, UnknownLevelError, ZeroExposureError

logger = logging.getLogger(__name__)

INTERCEPT = '(Intercept)'


@dataclass(frozen=True)
class Factor:
    """Categorical predictor.

    ``levels`` is filled in from the data when the design is built; the
    reference level is always ``levels[0]`` and gets no column.
    """

    name: str
    reference: str = None
    levels: tuple = ()

    def resolve(self, values):
        observed = sorted({str(v) for v in values})
        reference = self.reference if self.reference is not None else observed[0]
        if str(reference) not in observed:
            raise GLMError(f"reference level {reference!r} of factor {self.name!r} not present in data")
        if self.levels:
            unknown = set(observed) - {str(level) for level in self.levels}
            if unknown:
                raise UnknownLevelError(f"factor {self.name!r} has undeclared levels {sorted(unknown)}")
        others = [level for level in observed if level != str(reference)]
        return Factor(self.name, str(reference), (str(reference), *others))

    @property
    def columns(self):
        return [f"{self.name}[{level}]" for level in self.levels[1:]]

    def codes(self, values):
        lookup = {level: i for i, level in enumerate(self.levels)}
        try:
            return np.array([lookup[str(v)] for v in values], dtype=np.int64)
        except KeyError as exc:
            raise UnknownLevelError(f"unknown level {exc.args[0]!r} for factor {self.name!r}") from None


@dataclass(frozen=True)
class Interaction:
    """Product of a factor's level indicators with a numeric column.

    With ``all_levels`` every level (reference included) gets its own column,
    which is identified whenever the numeric column has no main effect.
    """

    factor: str
    column: str
    all_levels: bool = True


@dataclass(frozen=True)
class DesignSpec:
    """Column structure of a design, enough to rebuild a row for prediction."""

    factors: tuple = ()
    numeric: tuple = ()
    interactions: tuple = ()
    intercept: bool = True

    def factor(self, name):
        for factor in self.factors:
            if factor.name == name:
                return factor
        raise GLMError(f"no factor named {name!r}")

    def _interaction_levels(self, interaction):
        factor = self.factor(interaction.factor)
        return factor.levels if interaction.all_levels else factor.levels[1:]

    @property
    def column_names(self):
        names = [INTERCEPT] if self.intercept else []
        for factor in self.factors:
            names.extend(factor.columns)
        names.extend(self.numeric)
        for interaction in self.interactions:
            names.extend(
                f"{interaction.factor}[{level}]:{interaction.column}"
                for level in self._interaction_levels(interaction)
            )
        return names

    def build(self, frame):
        """Sparse model matrix for ``frame`` under this spec."""
        n_rows = len(frame)
        blocks = []
        if self.intercept:
            blocks.append(sparse.csr_matrix(np.ones((n_rows, 1))))
        for factor in self.factors:
            codes = factor.codes(frame[factor.name].to_numpy())
            width = len(factor.levels) - 1
            keep = codes > 0
            blocks.append(sparse.csr_matrix(
                (np.ones(keep.sum()), (np.flatnonzero(keep), codes[keep] - 1)),
                shape=(n_rows, width),
            ))
        if self.numeric:
            blocks.append(sparse.csr_matrix(frame[list(self.numeric)].to_numpy(dtype=float)))
        for interaction in self.interactions:
            factor = self.factor(interaction.factor)
            codes = factor.codes(frame[factor.name].to_numpy())
            values = frame[interaction.column].to_numpy(dtype=float)
            offset = 0 if interaction.all_levels else 1
            width = len(factor.levels) - offset
            keep = codes >= offset
            blocks.append(sparse.csr_matrix(
                (values[keep], (np.flatnonzero(keep), codes[keep] - offset)),
                shape=(n_rows, width),
            ))
        if not blocks:
            raise GLMError("design has no columns")
        return sparse.hstack(blocks, format='csr')

    def profile_row(self, profile):
        """Design row for a profile of factor levels and numeric values.

        A factor may map to a single level or to a ``{level: weight}`` dict,
        in which case the row carries the weighted average of the indicators.
        """
        row = [1.0] if self.intercept else []
        averaged = {}
        for factor in self.factors:
            if factor.name not in profile:
                raise GLMError(f"profile does not assign factor {factor.name!r}")
            indicator = self._indicator(factor, profile[factor.name])
            averaged[factor.name] = indicator
            row.extend(indicator[1:])
        for name in self.numeric:
            if name not in profile:
                raise GLMError(f"profile does not assign covariate {name!r}")
            row.append(float(profile[name]))
        for interaction in self.interactions:
            if interaction.column not in profile:
                raise GLMError(f"profile does not assign covariate {interaction.column!r}")
            indicator = averaged[interaction.factor]
            start = 0 if interaction.all_levels else 1
            row.extend(indicator[start:] * float(profile[interaction.column]))
        return np.asarray(row, dtype=float)

    @staticmethod
    def _indicator(factor, assignment):
        weights = assignment if isinstance(assignment, dict) else {assignment: 1.0}
        total = float(sum(weights.values()))
        if total <= 0:
            raise GLMError(f"profile weights for {factor.name!r} must sum to a positive value")
        indicator = np.zeros(len(factor.levels))
        lookup = {level: i for i, level in enumerate(factor.levels)}
        for level, weight in weights.items():
            if str(level) not in lookup:
                raise UnknownLevelError(f"unknown level {level!r} for factor {factor.name!r}")
            indicator[lookup[str(level)]] += weight / total
        return indicator

    def to_dict(self):
        return {
            'factors': [
                {'name': f.name, 'reference': f.reference, 'levels': list(f.levels)} for f in self.factors
            ],
            'numeric': list(self.numeric),
            'interactions': [
                {'factor': i.factor, 'column': i.column, 'all_levels': i.all_levels} for i in self.interactions
            ],
            'intercept': self.intercept,
        }

    @classmethod
    def from_dict(cls, payload):
        return cls(
            factors=tuple(Factor(f['name'], f['reference'], tuple(f['levels'])) for f in payload['factors']),
            numeric=tuple(payload['numeric']),
            interactions=tuple(Interaction(**i) for i in payload['interactions']),
            intercept=payload.get('intercept', True),
        )


@dataclass
class Design:
    """Response, offset, replication weights and model matrix of one fit."""

    response: np.ndarray
    X: sparse.csr_matrix
    spec: DesignSpec
    offset: np.ndarray = None
    weights: np.ndarray = None
    row_ids: np.ndarray = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        n_rows = self.X.shape[0]
        if self.offset is None:
            self.offset = np.zeros(n_rows)
        if self.weights is None:
            self.weights = np.ones(n_rows)
        if self.row_ids is None:
            self.row_ids = np.arange(n_rows)
        if np.any(self.weights < 1):
            raise GLMError("replication weights must be >= 1")
        for name in ('response', 'offset', 'weights'):
            if len(getattr(self, name)) != n_rows:
                raise GLMError(f"{name} length does not match design rows")
        if not np.all(np.isfinite(self.response)) or not np.all(np.isfinite(self.offset)):
            raise GLMError("response and offset must be finite")

    @property
    def rows(self):
        return self.X.shape[0]

    @property
    def column_names(self):
        return self.spec.column_names

    @property
    def total_weight(self):
        return float(self.weights.sum())

    @classmethod
    def from_frame(cls, frame, response, factors=(), numeric=(), interactions=(),
                   exposure=None, offset=None, weights=None, aggregate=False, intercept=True):
        """
        Build a design from a pandas DataFrame.

        Args:
            frame (pandas.DataFrame): One row per observation (or per cell).
            response (str): Response column (0/1, proportion, or count).
            factors: Factors, as ``Factor`` objects, ``(name, reference)``
                pairs or bare names (reference = first level in sort order).
            numeric: Numeric covariate columns.
            interactions: ``Interaction`` objects.
            exposure (str): Benchmark column; the offset becomes its log and
                non-positive values raise ``ZeroExposureError``.
            offset (str): Offset column, used as is.
            weights (str): Replication-weight column.
            aggregate (bool): Collapse identical covariate patterns of a
                binary response into proportion rows with replication weights.

        Returns:
            Design: Rows sorted into canonical order.
        """
        factors = tuple(_as_factor(f) for f in factors)
        used = [response, *(f.name for f in factors), *numeric]
        used += [i.column for i in interactions if i.column not in used]
        used += [c for c in (exposure, offset, weights) if c]
        missing = [c for c in used if c not in frame.columns]
        if missing:
            raise GLMError(f"columns not in frame: {missing}")
        if frame[used].isna().any().any():
            bad = frame[used].columns[frame[used].isna().any()].tolist()
            raise GLMError(f"missing values in design columns {bad}")

        offset_values = np.zeros(len(frame))
        if exposure is not None:
            pop = frame[exposure].to_numpy(dtype=float)
            if np.any(pop <= 0):
                raise ZeroExposureError(frame.index[pop <= 0])
            offset_values = np.log(pop)
        if offset is not None:
            offset_values = offset_values + frame[offset].to_numpy(dtype=float)
        weight_values = frame[weights].to_numpy(dtype=float) if weights else np.ones(len(frame))

        work = frame[list(dict.fromkeys(used))].copy()
        work['__offset'] = offset_values
        work['__weight'] = weight_values
        work['__row'] = frame.index.to_numpy()
        if aggregate:
            work = _collapse(work, response, [f.name for f in factors] +
                             [c for c in dict.fromkeys([*numeric, *(i.column for i in interactions)])])

        spec = DesignSpec(
            factors=tuple(f.resolve(work[f.name]) for f in factors),
            numeric=tuple(numeric),
            interactions=tuple(interactions),
            intercept=intercept,
        )
        X = spec.build(work)
        design = cls(
            response=work[response].to_numpy(dtype=float),
            X=X,
            spec=spec,
            offset=work['__offset'].to_numpy(dtype=float),
            weights=work['__weight'].to_numpy(dtype=float),
            row_ids=work['__row'].to_numpy(),
        )
        design.check_columns()
        return design.canonical()

    def canonical(self):
        """Copy of the design with rows in canonical order."""
        keys = [self.X.getcol(j).toarray().ravel() for j in range(self.X.shape[1])]
        keys += [self.offset, self.weights, self.response]
        order = np.lexsort(keys[::-1])
        return Design(
            response=self.response[order],
            X=self.X[order],
            spec=self.spec,
            offset=self.offset[order],
            weights=self.weights[order],
            row_ids=self.row_ids[order],
            metadata=dict(self.metadata),
        )

    def check_columns(self):
        """Raise RankDeficientError for columns that are identically zero."""
        nonzero = np.asarray(abs(self.X).sum(axis=0)).ravel() > 0
        if not np.all(nonzero):
            empty = [name for name, ok in zip(self.column_names, nonzero) if not ok]
            raise RankDeficientError(f"design columns are identically zero: {empty}")


def _as_factor(item):
    if isinstance(item, Factor):
        return item
    if isinstance(item, (tuple, list)):
        return Factor(*item)
    return Factor(str(item))


def _collapse(work, response, key_columns):
    values = work[response].to_numpy(dtype=float)
    if np.any((values < 0) | (values > 1)):
        raise GLMError("only responses in [0, 1] can be aggregated")
    key_columns = key_columns + ['__offset']
    work = work.assign(__success=values * work['__weight'])
    grouped = work.groupby(key_columns, sort=True, dropna=False).agg(
        __success=('__success', 'sum'),
        __weight=('__weight', 'sum'),
        __row=('__row', 'min'),
    ).reset_index()
    grouped[response] = grouped['__success'] / grouped['__weight']
    logger.debug(f"Collapsed {len(work)} rows into {len(grouped)} covariate patterns")
    return grouped


def design_from_arrays(response, X, column_names, offset=None, weights=None):
    """Design from a ready dense matrix whose columns are all numeric."""
    X = np.asarray(X, dtype=float)
    names = list(column_names)
    intercept = bool(names) and names[0] == INTERCEPT
    spec = DesignSpec(numeric=tuple(names[1:] if intercept else names), intercept=intercept)
    frame = pd.DataFrame(X[:, 1:] if intercept else X, columns=list(spec.numeric))
    design = Design(
        response=np.asarray(response, dtype=float),
        X=spec.build(frame),
        spec=spec,
        offset=None if offset is None else np.asarray(offset, dtype=float),
        weights=None if weights is None else np.asarray(weights, dtype=float),
    )
    design.check_columns()
    return design.canonical()
