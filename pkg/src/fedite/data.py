"""Dataset ingestion, splitting, multi-site partitioning, and a synthetic
data generating process with known potential outcomes.

File formats
------------
Data file: comma-delimited UTF-8 with a header row. Columns are the schema
features (categorical values kept verbatim, numerical parsed as float64),
the treatment column (integer in ``[0, K)``), the outcome column (float64)
and, for synthetic data, one ``po_<j>`` column per arm holding the ground
truth potential outcome.

Schema sidecar: comma-delimited lines, one per entry::

    feature,<name>,<categorical|numerical>
    treatment,<name>
    outcome,<name>

Treatment descriptions file: one row per treatment, ``treatment_id``
followed by the description vector's components.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .numerics import Tensor, derive_seed, rng_from

CATEGORICAL = "categorical"
NUMERICAL = "numerical"

_PO_COLUMN = re.compile(r"^po_(\d+)$")


class DataError(ValueError):
    """Malformed data or schema input."""


@dataclass(frozen=True)
class DatasetSchema:
    """Ordered covariate names and kinds plus treatment/outcome columns."""

    features: tuple[tuple[str, str], ...]
    treatment: str
    outcome: str

    def __post_init__(self) -> None:
        names = [name for name, _ in self.features]
        if any(not name for name in names):
            raise DataError("empty feature name")
        if len(set(names)) != len(names):
            raise DataError("duplicate feature names")
        for name, kind in self.features:
            if kind not in (CATEGORICAL, NUMERICAL):
                raise DataError(f"unknown kind {kind!r} for feature {name!r}")
        if not self.treatment or not self.outcome or self.treatment == self.outcome:
            raise DataError("treatment and outcome columns must be distinct and nonempty")
        if self.treatment in names or self.outcome in names:
            raise DataError("treatment/outcome columns collide with a feature name")

    @property
    def feature_names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.features)

    def kind_of(self, name: str) -> str:
        for fname, kind in self.features:
            if fname == name:
                return kind
        raise DataError(f"unknown feature {name!r}")

    def permuted(self, order: Sequence[int]) -> "DatasetSchema":
        """Same schema with features reordered (for invariance checks)."""
        return replace(self, features=tuple(self.features[i] for i in order))

    def to_dict(self) -> dict:
        return {"features": [list(f) for f in self.features],
                "treatment": self.treatment, "outcome": self.outcome}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSchema":
        return cls(features=tuple((n, k) for n, k in d["features"]),
                   treatment=d["treatment"], outcome=d["outcome"])


@dataclass
class DataRecord:
    """One subject: covariates, assigned arm, factual outcome.

    ``potential_outcomes`` (synthetic data only) holds all K arms' outcomes;
    the assigned arm's entry equals ``outcome`` exactly.
    """

    covariates: dict[str, str | float]
    treatment: int
    outcome: float
    potential_outcomes: tuple[float, ...] | None = None


@dataclass
class SiteDataset:
    """One client's split data."""

    site_id: int
    schema: DatasetSchema
    train: list[DataRecord]
    val: list[DataRecord]
    test: list[DataRecord]

    @property
    def treatments_observed(self) -> tuple[int, ...]:
        seen = sorted({r.treatment for r in self.train + self.val + self.test})
        return tuple(seen)


def write_schema(path: str | Path, schema: DatasetSchema) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for name, kind in schema.features:
            writer.writerow(["feature", name, kind])
        writer.writerow(["treatment", schema.treatment])
        writer.writerow(["outcome", schema.outcome])


def load_schema(path: str | Path) -> DatasetSchema:
    features: list[tuple[str, str]] = []
    treatment = outcome = None
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            tag = row[0]
            if tag == "feature" and len(row) == 3:
                features.append((row[1], row[2]))
            elif tag == "treatment" and len(row) == 2:
                treatment = row[1]
            elif tag == "outcome" and len(row) == 2:
                outcome = row[1]
            else:
                raise DataError(f"{path}: bad schema line {lineno}: {row!r}")
    if treatment is None or outcome is None:
        raise DataError(f"{path}: schema must designate treatment and outcome columns")
    return DatasetSchema(features=tuple(features), treatment=treatment, outcome=outcome)


def load_dataset(data_path: str | Path, schema_path: str | Path,
                 num_treatments: int | None = None) -> tuple[list[DataRecord], DatasetSchema]:
    """Load typed records; errors carry the 1-based data row number."""
    schema = load_schema(schema_path)
    with open(data_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{data_path}: empty file") from None
        if len(set(header)) != len(header):
            raise DataError(f"{data_path}: duplicate columns in header")
        expected = set(schema.feature_names) | {schema.treatment, schema.outcome}
        po_cols = sorted(c for c in header if _PO_COLUMN.match(c))
        unknown = [c for c in header if c not in expected and c not in po_cols]
        if unknown:
            raise DataError(f"{data_path}: unknown columns {unknown}")
        missing = sorted(expected - set(header))
        if missing:
            raise DataError(f"{data_path}: missing columns {missing}")
        if po_cols:
            arm_ids = sorted(int(_PO_COLUMN.match(c).group(1)) for c in po_cols)
            if arm_ids != list(range(len(arm_ids))):
                raise DataError(f"{data_path}: potential-outcome columns must be po_0..po_K-1")
            if num_treatments is None:
                num_treatments = len(arm_ids)
        col = {name: header.index(name) for name in header}
        records: list[DataRecord] = []
        for rowno, row in enumerate(reader, start=1):
            if len(row) != len(header):
                raise DataError(f"{data_path}: row {rowno}: expected {len(header)} fields")
            covariates: dict[str, str | float] = {}
            for name, kind in schema.features:
                raw = row[col[name]]
                if kind == NUMERICAL:
                    try:
                        covariates[name] = float(raw)
                    except ValueError:
                        raise DataError(
                            f"{data_path}: row {rowno}: feature {name!r} is not numeric: {raw!r}"
                        ) from None
                else:
                    covariates[name] = raw
            try:
                treatment = int(row[col[schema.treatment]])
            except ValueError:
                raise DataError(
                    f"{data_path}: row {rowno}: treatment is not an integer") from None
            if treatment < 0 or (num_treatments is not None and treatment >= num_treatments):
                raise DataError(
                    f"{data_path}: row {rowno}: treatment {treatment} out of range "
                    f"[0, {num_treatments})")
            try:
                outcome = float(row[col[schema.outcome]])
            except ValueError:
                raise DataError(f"{data_path}: row {rowno}: outcome is not numeric") from None
            potential = None
            if po_cols:
                try:
                    potential = tuple(float(row[col[f"po_{j}"]]) for j in range(len(po_cols)))
                except ValueError:
                    raise DataError(
                        f"{data_path}: row {rowno}: potential outcome is not numeric") from None
            records.append(DataRecord(covariates, treatment, outcome, potential))
    return records, schema


def write_dataset(path: str | Path, records: Sequence[DataRecord],
                  schema: DatasetSchema) -> None:
    with_po = [r for r in records if r.potential_outcomes is not None]
    if with_po and len(with_po) != len(records):
        raise DataError("potential outcomes must be present on all records or none")
    num_arms = len(with_po[0].potential_outcomes) if with_po else 0
    header = list(schema.feature_names) + [schema.treatment, schema.outcome]
    header += [f"po_{j}" for j in range(num_arms)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for r in records:
            row = [_format_value(r.covariates[name]) for name in schema.feature_names]
            row.append(str(r.treatment))
            row.append(_format_float(r.outcome))
            if num_arms:
                row.extend(_format_float(v) for v in r.potential_outcomes)
            writer.writerow(row)


def _format_value(value: str | float) -> str:
    return value if isinstance(value, str) else _format_float(float(value))


def _format_float(value: float) -> str:
    return repr(float(value))


def load_descriptions(path: str | Path) -> dict[int, Tensor]:
    """Treatment description vectors keyed by treatment id."""
    out: dict[int, Tensor] = {}
    width = None
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            try:
                tid = int(row[0])
                vec = np.array([float(v) for v in row[1:]], dtype=np.float64)
            except ValueError:
                raise DataError(f"{path}: line {lineno}: malformed description row") from None
            if width is None:
                width = vec.size
            elif vec.size != width:
                raise DataError(f"{path}: line {lineno}: inconsistent description width")
            out[tid] = vec
    if not out:
        raise DataError(f"{path}: no description rows")
    return out


def write_descriptions(path: str | Path, descriptions: dict[int, Tensor]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for tid in sorted(descriptions):
            writer.writerow([tid] + [_format_float(v) for v in descriptions[tid]])


def split_dataset(records: Sequence[DataRecord], seed: int
                  ) -> tuple[list[DataRecord], list[DataRecord], list[DataRecord]]:
    """Seeded shuffle into 70:15:15 train/val/test.

    Sizes are floor(0.70 n) and floor(0.15 n); the test split takes the
    remainder, with validation drawn before test in the shuffled order.
    """
    n = len(records)
    if n < 3:
        raise DataError(f"need at least 3 records to split, got {n}")
    order = rng_from(seed).permutation(n)
    n_train = math.floor(0.70 * n)
    n_val = math.floor(0.15 * n)
    shuffled = [records[i] for i in order]
    return (shuffled[:n_train],
            shuffled[n_train:n_train + n_val],
            shuffled[n_train + n_val:])


def partition_sites(records: Sequence[DataRecord], num_sites: int,
                    heterogeneity: float, seed: int,
                    min_per_site: int = 1) -> list[list[DataRecord]]:
    """Split records across sites, optionally skewing treatment-group ratios.

    ``heterogeneity`` = 0 assigns records uniformly at random (near-equal
    sizes). For positive values, each treatment group's share per site is
    drawn from a Dirichlet whose concentration (1 - h) / h shrinks toward 0
    as h -> 1, and records are then dealt without replacement to match the
    drawn shares. The union of the partitions is the input; partitions are
    pairwise disjoint.
    """
    n = len(records)
    if num_sites < 1:
        raise DataError(f"num_sites must be >= 1, got {num_sites}")
    if not 0.0 <= heterogeneity <= 1.0:
        raise DataError(f"heterogeneity must be in [0, 1], got {heterogeneity}")
    if num_sites > n:
        raise DataError(f"cannot partition {n} records across {num_sites} sites")
    rng = rng_from(seed)
    if num_sites == 1:
        return [list(records)]
    if heterogeneity == 0.0:
        order = rng.permutation(n)
        return [[records[i] for i in order[s::num_sites]] for s in range(num_sites)]

    concentration = (1.0 - heterogeneity) / heterogeneity
    groups: dict[int, list[int]] = {}
    for i, r in enumerate(records):
        groups.setdefault(r.treatment, []).append(i)
    for attempt in range(200):
        parts: list[list[int]] = [[] for _ in range(num_sites)]
        for arm in sorted(groups):
            idx = np.array(groups[arm])
            rng.shuffle(idx)
            shares = rng.dirichlet(np.full(num_sites, concentration))
            counts = _largest_remainder(shares * len(idx), len(idx))
            start = 0
            for s, c in enumerate(counts):
                parts[s].extend(idx[start:start + c].tolist())
                start += c
        if min(len(p) for p in parts) >= min_per_site:
            return [[records[i] for i in sorted(p)] for p in parts]
    raise DataError(
        f"could not draw a partition with >= {min_per_site} records per site "
        f"after 200 attempts (n={n}, sites={num_sites}, heterogeneity={heterogeneity})")


def _largest_remainder(targets: np.ndarray, total: int) -> list[int]:
    floors = np.floor(targets).astype(int)
    short = total - int(floors.sum())
    order = np.argsort(-(targets - floors), kind="stable")
    counts = floors.copy()
    for i in range(short):
        counts[order[i]] += 1
    return counts.tolist()


@dataclass
class SyntheticDGPConfig:
    """Generator settings; unset coefficient blocks are drawn from the seed.

    Each arm's outcome surface is linear in the encoded covariates plus one
    pairwise interaction term. Treatment assignment follows a softmax over
    linear scores whose sharpness controls selection bias (0 = uniform).
    Per-arm noise is added independently, so the stored potential outcome of
    the assigned arm equals the factual outcome exactly.
    """

    n: int
    num_numerical: int = 6
    num_categorical: int = 0
    num_treatments: int = 2
    num_levels: int = 3
    linear_coefficients: np.ndarray | None = None       # [K, D]
    interaction_terms: list[tuple[int, int, float]] | None = None  # per arm (a, b, coeff)
    intercepts: np.ndarray | None = None                # [K]
    propensity_coefficients: np.ndarray | None = None   # [K, D]
    propensity_sharpness: float = 0.0
    noise_std: float = 0.0
    seed: int = 0

    @property
    def num_features(self) -> int:
        return self.num_numerical + self.num_categorical

    def validate(self) -> None:
        if self.n < 1:
            raise DataError("n must be positive")
        if self.num_features < 1:
            raise DataError("need at least one feature")
        if self.num_treatments < 2:
            raise DataError("need at least two treatment arms")
        if self.num_levels < 2:
            raise DataError("categorical features need at least two levels")
        if self.noise_std < 0:
            raise DataError("noise_std must be nonnegative")
        if self.propensity_sharpness < 0:
            raise DataError("propensity_sharpness must be nonnegative")
        for block in (self.linear_coefficients, self.intercepts,
                      self.propensity_coefficients):
            if block is not None and not np.all(np.isfinite(block)):
                raise DataError("coefficients must be finite")


def synthetic_schema(config: SyntheticDGPConfig) -> DatasetSchema:
    features = [(f"num_{i}", NUMERICAL) for i in range(config.num_numerical)]
    features += [(f"cat_{i}", CATEGORICAL) for i in range(config.num_categorical)]
    return DatasetSchema(features=tuple(features), treatment="treatment", outcome="outcome")


def true_outcome_surfaces(config: SyntheticDGPConfig) -> "OutcomeSurfaces":
    """Resolve the (possibly drawn) coefficient blocks for ``config``."""
    config.validate()
    rng = rng_from(config.seed, 0)
    d = config.num_features
    k = config.num_treatments
    linear = config.linear_coefficients
    if linear is None:
        linear = rng.normal(0.0, 1.0, (k, d)) / math.sqrt(d)
    linear = np.asarray(linear, dtype=np.float64)
    if linear.shape != (k, d):
        raise DataError(f"linear coefficients must have shape {(k, d)}, got {linear.shape}")
    interactions = config.interaction_terms
    if interactions is None:
        interactions = []
        for _ in range(k):
            a, b = rng.choice(d, size=2, replace=d < 2)
            interactions.append((int(a), int(b), float(rng.normal(0.0, 0.5))))
    if len(interactions) != k:
        raise DataError(f"need one interaction term per arm, got {len(interactions)}")
    intercepts = config.intercepts
    if intercepts is None:
        intercepts = rng.normal(0.0, 0.5, k)
    intercepts = np.asarray(intercepts, dtype=np.float64)
    propensity = config.propensity_coefficients
    if propensity is None:
        propensity = rng.normal(0.0, 1.0, (k, d)) / math.sqrt(d)
    propensity = np.asarray(propensity, dtype=np.float64)
    return OutcomeSurfaces(linear, list(interactions), intercepts, propensity)


@dataclass
class OutcomeSurfaces:
    linear: np.ndarray
    interactions: list[tuple[int, int, float]]
    intercepts: np.ndarray
    propensity: np.ndarray

    def mean_outcomes(self, encoded: np.ndarray) -> np.ndarray:
        """True mean outcome per arm for encoded covariates [n, D] -> [n, K]."""
        k = self.linear.shape[0]
        out = encoded @ self.linear.T + self.intercepts
        for j, (a, b, coeff) in enumerate(self.interactions):
            out[:, j] += coeff * encoded[:, a] * encoded[:, b]
        return out


def generate_synthetic(config: SyntheticDGPConfig
                       ) -> tuple[list[DataRecord], DatasetSchema]:
    """Draw a dataset with all K potential outcomes stored per record."""
    surfaces = true_outcome_surfaces(config)
    schema = synthetic_schema(config)
    rng = rng_from(config.seed, 1)
    n, k = config.n, config.num_treatments
    numerical = rng.normal(0.0, 1.0, (n, config.num_numerical))
    levels = rng.integers(0, config.num_levels, (n, config.num_categorical))
    centered_levels = levels - (config.num_levels - 1) / 2.0
    encoded = np.concatenate([numerical, centered_levels], axis=1)

    mean_out = surfaces.mean_outcomes(encoded)
    logits = config.propensity_sharpness * (encoded @ surfaces.propensity.T)
    logits -= logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    cumulative = np.cumsum(probs, axis=1)
    draws = rng.random((n, 1))
    treatments = (draws > cumulative[:, :-1]).sum(axis=1)

    noise = rng.normal(0.0, config.noise_std, (n, k)) if config.noise_std > 0 else np.zeros((n, k))
    potential = mean_out + noise

    records: list[DataRecord] = []
    for i in range(n):
        covariates: dict[str, str | float] = {
            f"num_{j}": float(numerical[i, j]) for j in range(config.num_numerical)}
        for j in range(config.num_categorical):
            covariates[f"cat_{j}"] = f"lv{int(levels[i, j])}"
        arm = int(treatments[i])
        pot = tuple(float(v) for v in potential[i])
        records.append(DataRecord(covariates, arm, pot[arm], pot))
    return records, schema


def make_sites(partitions: Sequence[Sequence[DataRecord]], schema: DatasetSchema,
               seed: int) -> list[SiteDataset]:
    """Split each partition 70:15:15 into a SiteDataset."""
    sites = []
    for i, part in enumerate(partitions):
        train, val, test = split_dataset(list(part), derive_split_seed(seed, i))
        sites.append(SiteDataset(site_id=i, schema=schema, train=train, val=val, test=test))
    return sites


def derive_split_seed(seed: int, site_index: int) -> int:
    return derive_seed(seed, 100, site_index)


def pooled_site(records: Sequence[DataRecord], schema: DatasetSchema,
                seed: int) -> SiteDataset:
    """Single-site dataset over the pooled records (centralized protocol)."""
    if not records:
        raise DataError("cannot pool an empty record set")
    train, val, test = split_dataset(list(records), derive_split_seed(seed, 0))
    return SiteDataset(site_id=0, schema=schema, train=train, val=val, test=test)
