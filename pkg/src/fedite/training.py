"""Per-site alternating minimization.

Each local step alternates two phases on the same mini-batch: first the
personalized predictor head is updated against frozen shared modules, then
the shared modules (embedder, covariate encoder, treatment encoder, cross
block) are updated jointly against the frozen head. Each phase has its own
Adam state so momentum never leaks between the parameter sets, and the
frozen set is bit-identical before and after a phase step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import model as model_mod
from . import tabular
from .data import DataRecord, SiteDataset
from .model import (ModelConfig, PredictorHead, SharedParameters,
                    batch_treatments, bind_parameters, forward_batch)
from .numerics import (AdamState, EmptyBatchError, Tape, Tensor, adam_step,
                       backward, mse_loss, rng_from)
from .tabular import Standardizer, Vocabulary


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class LocalTrainConfig:
    local_epochs: int = 5
    batch_size: int = 128
    learning_rate: float = 5e-3
    seed: int = 0
    alternation: str = "batch"  # "batch": both phases per mini-batch; "epoch": per epoch

    def validate(self) -> None:
        if self.local_epochs < 0:
            raise ValueError("local_epochs must be >= 0")
        if self.batch_size < 1 or self.learning_rate < 0:
            raise ValueError("batch_size must be >= 1 and learning_rate >= 0")
        if self.alternation not in ("batch", "epoch"):
            raise ValueError(f"unknown alternation mode {self.alternation!r}")

    def to_dict(self) -> dict:
        return {"local_epochs": self.local_epochs, "batch_size": self.batch_size,
                "learning_rate": self.learning_rate, "seed": self.seed,
                "alternation": self.alternation}


@dataclass
class SiteTrainState:
    """Everything one client mutates while training locally."""

    site: SiteDataset
    vocab: Vocabulary
    standardizer: Standardizer
    model_config: ModelConfig
    shared: SharedParameters
    head: PredictorHead
    adam_head: AdamState
    adam_shared: AdamState
    descriptions: Mapping[int, Tensor] | None = None

    @classmethod
    def create(cls, site: SiteDataset, vocab: Vocabulary, standardizer: Standardizer,
               global_shared: SharedParameters, head: PredictorHead,
               local_config: LocalTrainConfig, model_config: ModelConfig,
               descriptions: Mapping[int, Tensor] | None = None) -> "SiteTrainState":
        shared = global_shared.copy()
        head = head.copy()
        return cls(
            site=site, vocab=vocab, standardizer=standardizer,
            model_config=model_config, shared=shared, head=head,
            adam_head=AdamState.for_params(head.tensors, local_config.learning_rate),
            adam_shared=AdamState.for_params(shared.tensors, local_config.learning_rate),
            descriptions=descriptions)


def _phase_step(state: SiteTrainState, records: Sequence[DataRecord],
                trainable: str) -> float:
    if not records:
        raise EmptyBatchError("training step on an empty batch")
    tape = Tape()
    shared_nodes = bind_parameters(tape, state.shared.tensors, trainable == "shared")
    head_nodes = bind_parameters(tape, state.head.tensors, trainable == "head")
    encoded = tabular.encode_batch(records, state.site.schema, state.vocab,
                                   state.standardizer)
    treatments = batch_treatments([r.treatment for r in records],
                                  state.model_config, state.descriptions)
    outcomes = np.array([r.outcome for r in records])
    yhat, _ = forward_batch(tape, encoded, treatments, shared_nodes, head_nodes,
                            state.model_config)
    loss = mse_loss(yhat, tape.constant(outcomes))
    if not math.isfinite(float(loss.value)):
        raise DivergenceError("non-finite training loss")
    grads = backward(tape, loss)
    if trainable == "head":
        tensors, state.adam_head = adam_step(state.head.tensors, grads, state.adam_head)
        state.head = PredictorHead(tensors)
    else:
        tensors, state.adam_shared = adam_step(state.shared.tensors, grads,
                                               state.adam_shared)
        state.shared = SharedParameters(tensors)
    return float(loss.value)


def train_predictor_phase(state: SiteTrainState,
                          records: Sequence[DataRecord]) -> float:
    """One Adam step on the head; shared parameters stay bit-identical."""
    return _phase_step(state, records, "head")


def train_shared_phase(state: SiteTrainState,
                       records: Sequence[DataRecord]) -> float:
    """One Adam step on the shared modules; the head stays bit-identical."""
    return _phase_step(state, records, "shared")


@dataclass
class TraceRow:
    round_index: int
    site_id: int
    epoch: int
    phase: str
    split: str
    loss: float


@dataclass
class LocalTrainResult:
    shared: SharedParameters
    head: PredictorHead
    trace: list[TraceRow] = field(default_factory=list)


def _batches(records: list[DataRecord], batch_size: int) -> list[list[DataRecord]]:
    # Tail batches are kept as-is: small sites should not lose data.
    return [records[i:i + batch_size] for i in range(0, len(records), batch_size)]


def local_train(site: SiteDataset, vocab: Vocabulary, standardizer: Standardizer,
                global_shared: SharedParameters, head: PredictorHead,
                local_config: LocalTrainConfig, model_config: ModelConfig,
                round_index: int = 0,
                descriptions: Mapping[int, Tensor] | None = None) -> LocalTrainResult:
    """Train one client for ``local_epochs`` epochs from the broadcast globals.

    Returns the updated shared parameters (for upload) and the retained
    head. With zero epochs the inputs are returned unchanged (as copies).
    """
    local_config.validate()
    if not site.train:
        raise EmptyBatchError(f"site {site.site_id} has no training records")
    state = SiteTrainState.create(site, vocab, standardizer, global_shared, head,
                                  local_config, model_config, descriptions)
    trace: list[TraceRow] = []
    for epoch in range(local_config.local_epochs):
        order = rng_from(local_config.seed, round_index, epoch).permutation(len(site.train))
        shuffled = [site.train[i] for i in order]
        batches = _batches(shuffled, local_config.batch_size)
        head_losses: list[float] = []
        shared_losses: list[float] = []
        try:
            if local_config.alternation == "batch":
                for b, batch in enumerate(batches):
                    head_losses.append(train_predictor_phase(state, batch))
                    shared_losses.append(train_shared_phase(state, batch))
            else:
                for b, batch in enumerate(batches):
                    head_losses.append(train_predictor_phase(state, batch))
                for b, batch in enumerate(batches):
                    shared_losses.append(train_shared_phase(state, batch))
        except DivergenceError as exc:
            raise DivergenceError(
                f"{exc} at round {round_index}, site {site.site_id}, epoch {epoch}, "
                f"batch {b}") from None
        trace.append(TraceRow(round_index, site.site_id, epoch, "predictor", "train",
                              float(np.mean(head_losses))))
        trace.append(TraceRow(round_index, site.site_id, epoch, "shared", "train",
                              float(np.mean(shared_losses))))
        if site.val:
            val_pred = model_mod.predict_records(
                site.val, site.schema, vocab, standardizer, state.shared, state.head,
                model_config, descriptions=descriptions)
            val_mse = float(np.mean((np.array([r.outcome for r in site.val]) - val_pred) ** 2))
            trace.append(TraceRow(round_index, site.site_id, epoch, "shared", "val", val_mse))
    return LocalTrainResult(shared=state.shared, head=state.head, trace=trace)
