"""Counterfactual and factual metrics, attention aggregation, and the
held-out-treatment (zero-shot) protocol.

Metric conventions, with mu[j] the true mean outcome of arm j, mu_hat[j]
the model's prediction, Y the factual outcome and T the assigned arm:

  RMSE-F        sqrt(mean over records of (Y - mu_hat[T])^2); factual only.
  PEHE(j)       mean of ((mu[j]-mu[0]) - (mu_hat[j]-mu_hat[0]))^2, reported
                as the mean squared difference (no square root).
  ATE_eps(j)    mean(mu[j]-mu[0]) - mean(mu_hat[j]-mu_hat[0]); stored signed,
                displayed as a magnitude in summaries.
  ATT(j)        mean factual outcome over {T=j} minus mean over {T=0}.
  ATT_eps(j)    |ATT(j) - mean over {T=j} of (mu_hat[j]-mu_hat[0])|.

PEHE and ATE need potential outcomes on every record and are reported as
absent, never as zero, when those are unavailable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import model as model_mod
from . import tabular
from .data import DataRecord, DatasetSchema, SiteDataset
from .federation import (FederationConfig, FederationContext, FederationResult,
                         run_federation, setup_federation)
from .model import (ModelConfig, PredictorHead, SharedParameters,
                    head_parameter_shapes)
from .numerics import ConfigurationError, EmptyBatchError, Tape, Tensor
from .tabular import Standardizer, Vocabulary


class MetricUnavailableError(ValueError):
    """The metric's inputs (potential outcomes, treated groups) are missing."""


def _require_records(records: Sequence[DataRecord]) -> None:
    if not records:
        raise EmptyBatchError("metric over an empty record set")


def _potential_outcomes(records: Sequence[DataRecord], arm: int) -> np.ndarray:
    missing = [i for i, r in enumerate(records)
               if r.potential_outcomes is None or arm >= len(r.potential_outcomes)]
    if missing:
        raise MetricUnavailableError(
            f"potential outcomes for arm {arm} unavailable on {len(missing)} records")
    return np.array([r.potential_outcomes[arm] for r in records])


def rmse_factual(records: Sequence[DataRecord], mu_hat: Tensor) -> float:
    """Root mean squared error of the assigned arm's prediction."""
    _require_records(records)
    preds = np.array([mu_hat[i, r.treatment] for i, r in enumerate(records)])
    outcomes = np.array([r.outcome for r in records])
    return float(np.sqrt(np.mean((outcomes - preds) ** 2)))


def pehe(records: Sequence[DataRecord], mu_hat: Tensor, arm: int) -> float:
    """Mean squared error of the estimated effect of ``arm`` versus arm 0."""
    _require_records(records)
    true_effect = _potential_outcomes(records, arm) - _potential_outcomes(records, 0)
    est_effect = mu_hat[:, arm] - mu_hat[:, 0]
    return float(np.mean((true_effect - est_effect) ** 2))


def ate_error(records: Sequence[DataRecord], mu_hat: Tensor, arm: int) -> float:
    """Signed gap between the true and estimated average effect of ``arm``."""
    _require_records(records)
    true_effect = _potential_outcomes(records, arm) - _potential_outcomes(records, 0)
    est_effect = mu_hat[:, arm] - mu_hat[:, 0]
    return float(np.mean(true_effect) - np.mean(est_effect))


def att(records: Sequence[DataRecord], arm: int) -> float:
    """Average factual outcome of the arm's group minus the control group's."""
    _require_records(records)
    treated = [r.outcome for r in records if r.treatment == arm]
    control = [r.outcome for r in records if r.treatment == 0]
    if not treated:
        raise MetricUnavailableError(f"no records received treatment {arm}")
    if not control:
        raise MetricUnavailableError("no records received treatment 0")
    return float(np.mean(treated) - np.mean(control))


def att_error(records: Sequence[DataRecord], mu_hat: Tensor, arm: int) -> float:
    """|ATT(arm) - mean estimated effect over the treated group|."""
    observed = att(records, arm)
    idx = [i for i, r in enumerate(records) if r.treatment == arm]
    est = np.mean(mu_hat[idx, arm] - mu_hat[idx, 0])
    return float(abs(observed - est))


def predict_outcome_matrix(records: Sequence[DataRecord], schema: DatasetSchema,
                           vocab: Vocabulary, standardizer: Standardizer | None,
                           shared: SharedParameters, head: PredictorHead,
                           config: ModelConfig,
                           descriptions: Mapping[int, Tensor] | None = None
                           ) -> Tensor:
    """mu_hat[i, j]: the site's head predicting record i under every arm j."""
    _require_records(records)
    columns = [model_mod.predict_records(records, schema, vocab, standardizer,
                                         shared, head, config, arm=j,
                                         descriptions=descriptions)
               for j in range(config.num_treatments)]
    return np.stack(columns, axis=1)


def mean_baseline_rmse(train: Sequence[DataRecord],
                       test: Sequence[DataRecord]) -> float:
    """RMSE of always predicting the training mean outcome."""
    _require_records(train)
    _require_records(test)
    mean = float(np.mean([r.outcome for r in train]))
    outcomes = np.array([r.outcome for r in test])
    return float(np.sqrt(np.mean((outcomes - mean) ** 2)))


@dataclass
class TreatmentMetrics:
    treatment: int
    n_effect: int
    n_treated: int
    pehe: float | None = None
    ate_error: float | None = None  # signed; magnitude shown in summaries
    att: float | None = None
    att_error: float | None = None


@dataclass
class SiteMetrics:
    site_id: int
    n_test: int
    rmse_f: float
    treatments: list[TreatmentMetrics] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "site_id": self.site_id,
            "n_test": self.n_test,
            "rmse_f": self.rmse_f,
            "treatments": [
                {"treatment": t.treatment, "n_effect": t.n_effect,
                 "n_treated": t.n_treated, "pehe": t.pehe,
                 "ate_error": t.ate_error,
                 "ate_error_abs": None if t.ate_error is None else abs(t.ate_error),
                 "att": t.att, "att_error": t.att_error}
                for t in self.treatments],
        }


def evaluate_records(records: Sequence[DataRecord], mu_hat: Tensor, site_id: int,
                     num_treatments: int) -> SiteMetrics:
    """All metrics for one site's record set against a prediction matrix."""
    _require_records(records)
    report = SiteMetrics(site_id=site_id, n_test=len(records),
                         rmse_f=rmse_factual(records, mu_hat))
    counts = {j: sum(1 for r in records if r.treatment == j)
              for j in range(num_treatments)}
    for arm in range(1, num_treatments):
        entry = TreatmentMetrics(treatment=arm, n_effect=len(records),
                                 n_treated=counts.get(arm, 0))
        try:
            entry.pehe = pehe(records, mu_hat, arm)
            entry.ate_error = ate_error(records, mu_hat, arm)
        except MetricUnavailableError:
            pass
        try:
            entry.att = att(records, arm)
            entry.att_error = att_error(records, mu_hat, arm)
        except MetricUnavailableError:
            pass
        report.treatments.append(entry)
    return report


def evaluate_sites(ctx: FederationContext, shared: SharedParameters,
                   heads: Mapping[int, PredictorHead],
                   split: str = "test") -> list[SiteMetrics]:
    """Per-site metrics on a split, using each site's own head with the
    shared encoders (the head is the only one in the site's outcome scale)."""
    reports = []
    for site in ctx.sites:
        records = getattr(site, split)
        mu_hat = predict_outcome_matrix(
            records, site.schema, ctx.vocab, ctx.standardizers[site.site_id],
            shared, heads[site.site_id], ctx.model_config, ctx.descriptions)
        reports.append(evaluate_records(records, mu_hat, site.site_id,
                                        ctx.model_config.num_treatments))
    return reports


METRIC_TABLE_HEADER = ("site", "treatment", "metric", "value")


def metrics_table_rows(reports: Sequence[SiteMetrics]) -> list[tuple[str, str, str, str]]:
    """Flat delimited view; one row per (site, treatment, metric)."""
    rows: list[tuple[str, str, str, str]] = []
    for rep in reports:
        rows.append((str(rep.site_id), "", "rmse_f", repr(rep.rmse_f)))
        for t in rep.treatments:
            arm = str(t.treatment)
            if t.pehe is not None:
                rows.append((str(rep.site_id), arm, "pehe", repr(t.pehe)))
            if t.ate_error is not None:
                rows.append((str(rep.site_id), arm, "ate_error", repr(t.ate_error)))
                rows.append((str(rep.site_id), arm, "ate_error_abs", repr(abs(t.ate_error))))
            if t.att is not None:
                rows.append((str(rep.site_id), arm, "att", repr(t.att)))
            if t.att_error is not None:
                rows.append((str(rep.site_id), arm, "att_error", repr(t.att_error)))
    return rows


def summarize_reports(reports: Sequence[SiteMetrics]) -> dict[str, float]:
    """One row per run: n_test-weighted site means; ATE as a magnitude."""
    weights = np.array([rep.n_test for rep in reports], dtype=np.float64)
    weights /= weights.sum()

    def weighted(values: list[float | None]) -> float | None:
        pairs = [(w, v) for w, v in zip(weights, values) if v is not None]
        if not pairs:
            return None
        ws = np.array([w for w, _ in pairs])
        vs = np.array([v for _, v in pairs])
        return float(np.dot(ws / ws.sum(), vs))

    def mean_over_arms(rep: SiteMetrics, attr: str, absolute: bool = False) -> float | None:
        vals = [getattr(t, attr) for t in rep.treatments if getattr(t, attr) is not None]
        if not vals:
            return None
        vals = [abs(v) for v in vals] if absolute else vals
        return float(np.mean(vals))

    out = {"rmse_f": weighted([rep.rmse_f for rep in reports])}
    out["pehe"] = weighted([mean_over_arms(rep, "pehe") for rep in reports])
    out["ate_error_abs"] = weighted(
        [mean_over_arms(rep, "ate_error", absolute=True) for rep in reports])
    out["att_error"] = weighted([mean_over_arms(rep, "att_error") for rep in reports])
    return out


# ---------------------------------------------------------------------------
# Attention aggregation.

@dataclass
class AttentionSnapshot:
    """Attention activations averaged over a record set.

    ``self_attention``: [layers, heads, L, L] mean over all records.
    ``cross_attention``: per treatment arm, [cross_layers, heads, 1, L]
    averaged over the records that received that arm. ``labels`` names the
    L positions: [CLS] followed by the schema features.
    """

    self_attention: Tensor
    cross_attention: dict[int, Tensor]
    labels: list[str]
    n_records: int
    n_per_treatment: dict[int, int]


def attention_snapshot(records: Sequence[DataRecord], schema: DatasetSchema,
                       vocab: Vocabulary, standardizer: Standardizer | None,
                       shared: SharedParameters, config: ModelConfig,
                       descriptions: Mapping[int, Tensor] | None = None,
                       batch_size: int = 256) -> AttentionSnapshot:
    """Mean attention activations, with cross-attention grouped by the
    factual treatment of each record."""
    _require_records(records)
    head = _zero_head(config)  # predictions are irrelevant to the maps
    self_sum = None
    cross_sum: dict[int, Tensor] = {}
    cross_count: dict[int, int] = {}
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        tape = Tape()
        shared_nodes = model_mod.bind_parameters(tape, shared.tensors, trainable=False)
        head_nodes = model_mod.bind_parameters(tape, head.tensors, trainable=False)
        encoded = tabular.encode_batch(chunk, schema, vocab, standardizer)
        tb = model_mod.batch_treatments([r.treatment for r in chunk], config, descriptions)
        _, maps = model_mod.forward_batch(tape, encoded, tb, shared_nodes,
                                          head_nodes, config)
        batch_self = maps.self_attention.sum(axis=0)
        self_sum = batch_self if self_sum is None else self_sum + batch_self
        for i, record in enumerate(chunk):
            arm = record.treatment
            cross_count[arm] = cross_count.get(arm, 0) + 1
            if arm in cross_sum:
                cross_sum[arm] = cross_sum[arm] + maps.cross_attention[i]
            else:
                cross_sum[arm] = maps.cross_attention[i].copy()
    labels = ["[CLS]"] + list(schema.feature_names)
    return AttentionSnapshot(
        self_attention=self_sum / len(records),
        cross_attention={arm: cross_sum[arm] / cross_count[arm]
                         for arm in sorted(cross_sum)},
        labels=labels, n_records=len(records),
        n_per_treatment=dict(sorted(cross_count.items())))


def _zero_head(config: ModelConfig) -> PredictorHead:
    return PredictorHead({name: np.zeros(shape) for name, shape
                          in head_parameter_shapes(config).items()})


# ---------------------------------------------------------------------------
# Zero-shot protocol.

@dataclass
class ZeroShotReport:
    held_out: int
    supervised_rmse: float
    zero_shot_rmse: float
    delta: float
    n_eval: int
    per_site_n: dict[int, int]


def _held_out_rmse(ctx: FederationContext, result: FederationResult,
                   eval_sets: Mapping[int, list[DataRecord]], arm: int) -> float:
    squared_sum = 0.0
    total = 0
    for site in ctx.sites:
        records = eval_sets.get(site.site_id, [])
        if not records:
            continue
        preds = model_mod.predict_records(
            records, site.schema, ctx.vocab, ctx.standardizers[site.site_id],
            result.state.shared, result.state.heads[site.site_id],
            ctx.model_config, arm=arm, descriptions=ctx.descriptions)
        outcomes = np.array([r.outcome for r in records])
        squared_sum += float(np.sum((outcomes - preds) ** 2))
        total += len(records)
    return math.sqrt(squared_sum / total)


def zero_shot_eval(sites: Sequence[SiteDataset], held_out: int,
                   descriptions: Mapping[int, Tensor], model_config: ModelConfig,
                   fed_config: FederationConfig, seed: int) -> ZeroShotReport:
    """Supervised versus zero-shot RMSE on the held-out arm's test records.

    Run A trains on every arm; run B removes the held-out arm's records
    from all training and validation splits (test splits untouched), trains
    afresh with the same seed, and predicts the unseen arm through its
    description vector. Both runs are scored on the identical test records.
    """
    if model_config.description_dim is None:
        raise ConfigurationError("zero-shot needs description vectors (description_dim unset)")
    for arm in range(model_config.num_treatments):
        if arm not in descriptions:
            raise ConfigurationError(f"missing description vector for treatment {arm}")
    if not 0 <= held_out < model_config.num_treatments:
        raise ConfigurationError(f"held-out arm {held_out} out of range")

    eval_sets = {site.site_id: [r for r in site.test if r.treatment == held_out]
                 for site in sites}
    n_eval = sum(len(v) for v in eval_sets.values())
    if n_eval == 0:
        raise EmptyBatchError(f"no test records carry treatment {held_out}")

    ctx_a = setup_federation(sites, model_config, fed_config, descriptions)
    result_a = run_federation(ctx_a, seed)
    supervised = _held_out_rmse(ctx_a, result_a, eval_sets, held_out)

    filtered = []
    for site in sites:
        train = [r for r in site.train if r.treatment != held_out]
        val = [r for r in site.val if r.treatment != held_out]
        if not train:
            raise EmptyBatchError(
                f"site {site.site_id} has only held-out-arm training records")
        filtered.append(replace(site, train=train, val=val))
    ctx_b = setup_federation(filtered, model_config, fed_config, descriptions)
    result_b = run_federation(ctx_b, seed)
    zero_shot = _held_out_rmse(ctx_b, result_b, eval_sets, held_out)

    return ZeroShotReport(
        held_out=held_out, supervised_rmse=supervised, zero_shot_rmse=zero_shot,
        delta=zero_shot - supervised, n_eval=n_eval,
        per_site_n={sid: len(v) for sid, v in eval_sets.items()})
