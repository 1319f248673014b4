"""Covariate input processing: tokenization, vocabulary, and the assembly
of the [CLS]-prefixed embedding sequence for a record.

Each feature maps to one embedding vector. Categorical features tokenize
"name value" and mean-pool the token embeddings; numerical features
mean-pool the name's token embeddings and scale the result by the
(standardized) value. The sequence for a record is [CLS] followed by one
vector per schema feature, in schema order, with no positional encoding.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .data import CATEGORICAL, NUMERICAL, DataRecord, DatasetSchema
from .numerics import (EmptyBatchError, Node, Tape, Tensor, concat,
                       gather_rows, mul, sum_axis)

CLS_TOKEN = "[CLS]"
PAD_TOKEN = "[PAD]"
UNK_TOKEN = "[UNK]"
RESERVED_TOKENS = (CLS_TOKEN, PAD_TOKEN, UNK_TOKEN)

_SPLITTER = re.compile(r"[\s_\-]+")


class MissingValueError(ValueError):
    """A record lacks (or mangles) a value the schema requires."""


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace, underscores and hyphens."""
    return [t for t in _SPLITTER.split(str(text).lower()) if t]


@dataclass(frozen=True)
class Vocabulary:
    """Dense token ids with reserved [CLS]/[PAD]/[UNK] entries."""

    tokens: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.tokens[:3] != RESERVED_TOKENS:
            raise ValueError("vocabulary must start with the reserved tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        object.__setattr__(self, "_ids", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def cls_id(self) -> int:
        return 0

    @property
    def pad_id(self) -> int:
        return 1

    @property
    def unk_id(self) -> int:
        return 2

    def id_of(self, token: str) -> int:
        """Lookup with [UNK] fallback; never errors at inference."""
        return self._ids.get(token, self.unk_id)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    @classmethod
    def from_corpus(cls, token_stream: Iterable[str]) -> "Vocabulary":
        seen = dict.fromkeys(RESERVED_TOKENS)
        for token in token_stream:
            seen.setdefault(token, None)
        return cls(tokens=tuple(seen))

    def to_dict(self) -> dict:
        return {"tokens": list(self.tokens)}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(tokens=tuple(d["tokens"]))


def corpus_tokens(schema: DatasetSchema, records: Sequence[DataRecord]) -> Iterable[str]:
    """Every token the encoder can produce on this data, first-occurrence order."""
    for name, _ in schema.features:
        yield from tokenize(name)
    for record in records:
        for name, kind in schema.features:
            if kind == CATEGORICAL:
                value = record.covariates.get(name)
                if value is not None:
                    yield from tokenize(value)


def build_vocabulary(schema: DatasetSchema, records: Sequence[DataRecord]) -> Vocabulary:
    """Vocabulary covering all feature-name and categorical-value tokens."""
    if not records:
        raise EmptyBatchError("cannot build a vocabulary from an empty dataset")
    return Vocabulary.from_corpus(corpus_tokens(schema, records))


@dataclass
class Embedder:
    """Learnable token embedding table accessed by row lookup."""

    table: Tensor  # [vocab_size, width]

    @property
    def width(self) -> int:
        return self.table.shape[1]

    @classmethod
    def init(cls, vocab: Vocabulary, width: int, rng: np.random.Generator,
             init_std: float = 0.02) -> "Embedder":
        return cls(table=rng.normal(0.0, init_std, (len(vocab), width)))

    def rows(self, ids: Sequence[int]) -> Tensor:
        return self.table[np.asarray(ids)]


@dataclass
class Standardizer:
    """Per-feature mean/std for numerical covariates, fit on a train split."""

    stats: dict[str, tuple[float, float]]

    @classmethod
    def fit(cls, schema: DatasetSchema, records: Sequence[DataRecord]) -> "Standardizer":
        stats: dict[str, tuple[float, float]] = {}
        for name, kind in schema.features:
            if kind != NUMERICAL:
                continue
            values = np.array([float(r.covariates[name]) for r in records])
            std = float(values.std())
            stats[name] = (float(values.mean()), std if std > 0.0 else 1.0)
        return cls(stats=stats)

    @classmethod
    def identity(cls) -> "Standardizer":
        return cls(stats={})

    def transform(self, name: str, value: float) -> float:
        mean, std = self.stats.get(name, (0.0, 1.0))
        return (value - mean) / std

    def to_dict(self) -> dict:
        return {name: list(pair) for name, pair in self.stats.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(stats={name: (pair[0], pair[1]) for name, pair in d.items()})


@dataclass
class TokenEmbeddingSequence:
    """[CLS]-prefixed embedding sequence for one record."""

    embeddings: Tensor  # [length, width]
    mask: np.ndarray    # [length] bool, true = real position

    @property
    def length(self) -> int:
        return self.embeddings.shape[0]


def feature_token_ids(name: str, value, kind: str, vocab: Vocabulary) -> list[int]:
    """Token ids feeding one feature's embedding."""
    if kind == CATEGORICAL:
        tokens = tokenize(name) + tokenize(value)
    elif kind == NUMERICAL:
        tokens = tokenize(name)
    else:
        raise ValueError(f"unknown feature kind {kind!r}")
    if not tokens:
        raise MissingValueError(f"feature {name!r} produced no tokens")
    return [vocab.id_of(t) for t in tokens]


def _feature_scale(name: str, value, kind: str,
                   standardizer: Standardizer | None) -> float:
    if kind == CATEGORICAL:
        return 1.0
    if value is None or (isinstance(value, float) and math.isnan(value)):
        raise MissingValueError(f"numerical feature {name!r} is missing or NaN")
    value = float(value)
    return standardizer.transform(name, value) if standardizer is not None else value


def encode_feature(name: str, value, kind: str, vocab: Vocabulary,
                   embedder: Embedder,
                   standardizer: Standardizer | None = None) -> Tensor:
    """One feature's embedding vector.

    Categorical: mean of the token embeddings of "name value". Numerical:
    mean of the name's token embeddings, scaled by the standardized value
    (so the result is homogeneous of degree 1 in the value).
    """
    ids = feature_token_ids(name, value, kind, vocab)
    pooled = embedder.rows(ids).mean(axis=0)
    return pooled * _feature_scale(name, value, kind, standardizer)


def encode_record(record: DataRecord, schema: DatasetSchema, vocab: Vocabulary,
                  embedder: Embedder,
                  standardizer: Standardizer | None = None) -> TokenEmbeddingSequence:
    """[CLS] plus one embedding per schema feature, in schema order."""
    rows = [embedder.table[vocab.cls_id]]
    for name, kind in schema.features:
        if name not in record.covariates:
            raise MissingValueError(f"record is missing covariate {name!r}")
        rows.append(encode_feature(name, record.covariates[name], kind,
                                   vocab, embedder, standardizer))
    embeddings = np.stack(rows, axis=0)
    return TokenEmbeddingSequence(embeddings=embeddings,
                                  mask=np.ones(len(rows), dtype=bool))


def pad_batch(sequences: Sequence[TokenEmbeddingSequence]
              ) -> tuple[Tensor, np.ndarray]:
    """Zero-pad to the longest sequence; mask is false at padded positions."""
    if not sequences:
        raise EmptyBatchError("cannot pad an empty batch")
    widths = {s.embeddings.shape[1] for s in sequences}
    if len(widths) != 1:
        raise ValueError(f"sequences disagree on embedding width: {sorted(widths)}")
    width = widths.pop()
    longest = max(s.length for s in sequences)
    batch = np.zeros((len(sequences), longest, width))
    mask = np.zeros((len(sequences), longest), dtype=bool)
    for i, s in enumerate(sequences):
        batch[i, :s.length] = s.embeddings
        mask[i, :s.length] = s.mask
    return batch, mask


@dataclass
class EncodedBatch:
    """Token-level plan for a batch, kept differentiable w.r.t. the table.

    ``token_ids``/``pool_weights`` are [batch, features, slots]: each
    feature's embedding is the weight-pooled lookup over its slots (weights
    are 1/count for real tokens and 0 for [PAD] slots, so the pad row never
    receives gradient). ``scales`` carries the standardized numerical value
    (1 for categorical). The final sequence is [CLS] + features.
    """

    token_ids: np.ndarray     # [b, F, T] int
    pool_weights: np.ndarray  # [b, F, T]
    scales: np.ndarray        # [b, F]
    mask: np.ndarray          # [b, F + 1] bool
    cls_id: int

    @property
    def batch_size(self) -> int:
        return self.token_ids.shape[0]

    @property
    def length(self) -> int:
        return self.token_ids.shape[1] + 1


def encode_batch(records: Sequence[DataRecord], schema: DatasetSchema,
                 vocab: Vocabulary,
                 standardizer: Standardizer | None = None) -> EncodedBatch:
    if not records:
        raise EmptyBatchError("cannot encode an empty batch")
    per_record: list[list[list[int]]] = []
    scales = np.ones((len(records), len(schema.features)))
    for i, record in enumerate(records):
        ids_per_feature = []
        for f, (name, kind) in enumerate(schema.features):
            if name not in record.covariates:
                raise MissingValueError(f"record {i} is missing covariate {name!r}")
            value = record.covariates[name]
            ids_per_feature.append(feature_token_ids(name, value, kind, vocab))
            scales[i, f] = _feature_scale(name, value, kind, standardizer)
        per_record.append(ids_per_feature)
    slots = max(len(ids) for ids_per_feature in per_record for ids in ids_per_feature)
    token_ids = np.full((len(records), len(schema.features), slots), vocab.pad_id,
                        dtype=np.int64)
    weights = np.zeros((len(records), len(schema.features), slots))
    for i, ids_per_feature in enumerate(per_record):
        for f, ids in enumerate(ids_per_feature):
            token_ids[i, f, :len(ids)] = ids
            weights[i, f, :len(ids)] = 1.0 / len(ids)
    mask = np.ones((len(records), len(schema.features) + 1), dtype=bool)
    return EncodedBatch(token_ids=token_ids, pool_weights=weights, scales=scales,
                        mask=mask, cls_id=vocab.cls_id)


def embed_batch(tape: Tape, table: Node, batch: EncodedBatch) -> Node:
    """Differentiable [CLS]-prefixed sequence embeddings [b, F + 1, width]."""
    looked_up = gather_rows(table, batch.token_ids)        # [b, F, T, d]
    weights = tape.constant(batch.pool_weights[..., None])
    pooled = sum_axis(mul(looked_up, weights), axis=2)      # [b, F, d]
    scaled = mul(pooled, tape.constant(batch.scales[..., None]))
    cls_ids = np.full((batch.batch_size, 1), batch.cls_id, dtype=np.int64)
    cls_rows = gather_rows(table, cls_ids)                  # [b, 1, d]
    return concat([cls_rows, scaled], axis=1)
