"""Server-and-clients simulation: broadcast, local training, data-size
weighted aggregation, communication rounds, early stopping.

Only the shared modules travel; predictor heads stay on their sites and
never enter any aggregation input. Sites are processed in site-id order so
aggregation is bit-reproducible regardless of how the caller ordered them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import chain
from typing import Callable, Mapping, Sequence

import numpy as np

from . import model as model_mod
from .data import DataRecord, DatasetSchema, SiteDataset, pooled_site
from .model import ModelConfig, PredictorHead, SharedParameters, init_predictor_head, \
    init_shared_parameters
from .numerics import EmptyBatchError, Tensor, rng_from
from .tabular import Standardizer, Vocabulary, corpus_tokens
from .training import LocalTrainConfig, TraceRow, local_train


class AggregationError(ValueError):
    """Parameter sets disagree structurally."""


@dataclass
class FederationConfig:
    rounds: int = 200
    patience: int = 20
    local: LocalTrainConfig = field(default_factory=LocalTrainConfig)

    def validate(self) -> None:
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        self.local.validate()

    def to_dict(self) -> dict:
        return {"rounds": self.rounds, "patience": self.patience,
                "local": self.local.to_dict()}


@dataclass
class FederationState:
    shared: SharedParameters
    heads: dict[int, PredictorHead]
    round_index: int = 0
    best_score: float = math.inf
    rounds_since_improvement: int = 0


@dataclass
class RoundSummary:
    round_index: int
    site_train_rmse: dict[int, float]
    site_val_rmse: dict[int, float]
    aggregate_val_rmse: float
    stale_rounds: int = 0


@dataclass
class FederationContext:
    """Static inputs of a federated run: sites, shared vocabulary, configs."""

    sites: list[SiteDataset]
    vocab: Vocabulary
    standardizers: dict[int, Standardizer]
    model_config: ModelConfig
    fed_config: FederationConfig
    descriptions: Mapping[int, Tensor] | None = None


def setup_federation(sites: Sequence[SiteDataset], model_config: ModelConfig,
                     fed_config: FederationConfig,
                     descriptions: Mapping[int, Tensor] | None = None
                     ) -> FederationContext:
    """Round-0 setup: the shared vocabulary is the union of every site's
    token universe (site-id order), so embedding tables stay index-aligned
    for element-wise aggregation."""
    fed_config.validate()
    model_config.validate()
    if not sites:
        raise EmptyBatchError("need at least one site")
    ordered = sorted(sites, key=lambda s: s.site_id)
    for site in ordered:
        if not site.train:
            raise EmptyBatchError(f"site {site.site_id} has no training records")
    vocab = Vocabulary.from_corpus(
        chain.from_iterable(corpus_tokens(s.schema, s.train) for s in ordered))
    standardizers = {s.site_id: Standardizer.fit(s.schema, s.train) for s in ordered}
    return FederationContext(sites=ordered, vocab=vocab, standardizers=standardizers,
                             model_config=model_config, fed_config=fed_config,
                             descriptions=descriptions)


def aggregate_weighted(param_sets: Sequence[SharedParameters],
                       counts: Sequence[int]) -> SharedParameters:
    """Coordinate-wise average weighted by n_i / sum(n_i').

    The caller fixes the site order; a single input is returned bit-equal.
    """
    if not param_sets:
        raise AggregationError("nothing to aggregate")
    if len(param_sets) != len(counts):
        raise AggregationError(f"{len(param_sets)} parameter sets vs {len(counts)} counts")
    if any(c <= 0 for c in counts):
        raise AggregationError(f"counts must be positive, got {list(counts)}")
    reference = param_sets[0].structure()
    for i, params in enumerate(param_sets[1:], start=1):
        other = params.structure()
        for name in sorted(set(reference) | set(other)):
            if reference.get(name) != other.get(name):
                raise AggregationError(
                    f"parameter {name!r} diverges between set 0 "
                    f"({reference.get(name)}) and set {i} ({other.get(name)})")
    if len(param_sets) == 1:
        return param_sets[0].copy()
    weights = np.asarray(counts, dtype=np.float64)
    weights = weights / weights.sum()
    # Anchor-plus-weighted-deviations form of the weighted mean: identical
    # inputs aggregate to themselves bit-exactly (deviations are exact zeros).
    tensors = {name: param_sets[0].tensors[name].copy() for name in reference}
    for w, params in zip(weights[1:], param_sets[1:]):
        for name in reference:
            tensors[name] += w * (params.tensors[name] - param_sets[0].tensors[name])
    return SharedParameters(tensors)


def _site_rmse(site: SiteDataset, records: list[DataRecord], ctx: FederationContext,
               shared: SharedParameters, head: PredictorHead) -> float:
    preds = model_mod.predict_records(
        records, site.schema, ctx.vocab, ctx.standardizers[site.site_id],
        shared, head, ctx.model_config, descriptions=ctx.descriptions)
    outcomes = np.array([r.outcome for r in records])
    return float(np.sqrt(np.mean((outcomes - preds) ** 2)))


def run_round(state: FederationState, ctx: FederationContext, round_index: int,
              trace: list[TraceRow] | None = None) -> RoundSummary:
    """Broadcast globals, train every site locally, aggregate, evaluate."""
    uploads: list[SharedParameters] = []
    counts: list[int] = []
    for site in ctx.sites:
        result = local_train(
            site, ctx.vocab, ctx.standardizers[site.site_id], state.shared,
            state.heads[site.site_id], ctx.fed_config.local, ctx.model_config,
            round_index=round_index, descriptions=ctx.descriptions)
        uploads.append(result.shared)
        counts.append(len(site.train))
        state.heads[site.site_id] = result.head
        if trace is not None:
            trace.extend(result.trace)
    state.shared = aggregate_weighted(uploads, counts)
    state.round_index = round_index + 1

    train_rmse: dict[int, float] = {}
    val_rmse: dict[int, float] = {}
    val_weights: list[float] = []
    val_values: list[float] = []
    for site, count in zip(ctx.sites, counts):
        head = state.heads[site.site_id]
        train_rmse[site.site_id] = _site_rmse(site, site.train, ctx, state.shared, head)
        if site.val:
            v = _site_rmse(site, site.val, ctx, state.shared, head)
            val_rmse[site.site_id] = v
            val_weights.append(count)
            val_values.append(v)
    if not val_values:
        raise EmptyBatchError("no site has validation records to monitor")
    weights = np.asarray(val_weights, dtype=np.float64)
    aggregate = float(np.dot(weights / weights.sum(), np.asarray(val_values)))
    return RoundSummary(round_index=round_index, site_train_rmse=train_rmse,
                        site_val_rmse=val_rmse, aggregate_val_rmse=aggregate)


@dataclass
class FederationResult:
    state: FederationState
    history: list[RoundSummary]
    trace: list[TraceRow]
    rounds_run: int


def run_federation(ctx: FederationContext, seed: int,
                   val_score_fn: Callable[[int, RoundSummary], float] | None = None
                   ) -> FederationResult:
    """Up to ``rounds`` communication rounds with early stopping.

    The monitored score is the data-size weighted mean of per-site
    validation RMSE on factual outcomes (overridable for testing via
    ``val_score_fn``). Training halts once ``patience`` consecutive rounds
    fail to improve the best score, and the best-scoring parameters, not
    the last, are returned. Every head starts from one common draw so the
    run is a pure function of (sites, configs, seed).
    """
    shared = init_shared_parameters(ctx.model_config, len(ctx.vocab), rng_from(seed, 0))
    head0 = init_predictor_head(ctx.model_config, rng_from(seed, 1))
    state = FederationState(
        shared=shared,
        heads={site.site_id: head0.copy() for site in ctx.sites})
    best_shared: SharedParameters | None = None
    best_heads: dict[int, PredictorHead] | None = None
    history: list[RoundSummary] = []
    trace: list[TraceRow] = []
    rounds_run = 0
    for r in range(ctx.fed_config.rounds):
        summary = run_round(state, ctx, r, trace)
        rounds_run = r + 1
        score = val_score_fn(r, summary) if val_score_fn is not None \
            else summary.aggregate_val_rmse
        if score < state.best_score:
            state.best_score = score
            state.rounds_since_improvement = 0
            best_shared = state.shared.copy()
            best_heads = {sid: head.copy() for sid, head in state.heads.items()}
        else:
            state.rounds_since_improvement += 1
        summary.stale_rounds = state.rounds_since_improvement
        history.append(summary)
        if state.rounds_since_improvement >= ctx.fed_config.patience:
            break
    if best_shared is not None:
        state.shared = best_shared
        state.heads = best_heads
    return FederationResult(state=state, history=history, trace=trace,
                            rounds_run=rounds_run)


def run_centralized(records: Sequence[DataRecord], schema: DatasetSchema,
                    model_config: ModelConfig, fed_config: FederationConfig,
                    seed: int, descriptions: Mapping[int, Tensor] | None = None
                    ) -> tuple[FederationResult, FederationContext]:
    """Pool everything on one site and run the same pipeline (aggregation
    over a single site is the identity)."""
    if not records:
        raise EmptyBatchError("cannot train on an empty pool")
    site = pooled_site(records, schema, seed)
    ctx = setup_federation([site], model_config, fed_config, descriptions)
    return run_federation(ctx, seed), ctx
