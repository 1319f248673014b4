"""The four model blocks and their composition.

A record's covariates are embedded into a [CLS]-prefixed sequence and run
through a post-norm self-attention encoder. The treatment (one-hot code or
a precomputed description vector) is embedded by a two-layer MLP, used as
the single query of a cross-attention block over the covariate token
states, and the fused vector is mapped to a scalar outcome by a per-site
predictor head. Everything except the head is shared across sites.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tabular
from .data import DataRecord, DatasetSchema
from .numerics import (ConfigurationError, Node, ShapeError, Tape, Tensor,
                       add, layer_norm, linear_forward, mse_loss,
                       multi_head_attention, relu, reshape)
from .tabular import EncodedBatch, Standardizer, Vocabulary


@dataclass
class ModelConfig:
    embed_width: int = 256
    encoder_layers: int = 2
    self_heads: int = 8
    cross_heads: int = 8
    cross_layers: int = 1
    predictor_hidden: int = 256
    num_treatments: int = 2
    description_dim: int | None = None
    layer_norm_eps: float = 1e-5
    init_std: float = 0.02

    def validate(self) -> None:
        if self.embed_width % self.self_heads or self.embed_width % self.cross_heads:
            raise ConfigurationError(
                f"embed width {self.embed_width} must be divisible by the head counts "
                f"({self.self_heads} self, {self.cross_heads} cross)")
        if self.encoder_layers < 1 or self.cross_layers < 1:
            raise ConfigurationError("need at least one encoder and one cross layer")
        if self.num_treatments < 2:
            raise ConfigurationError("need at least two treatment arms")
        if self.predictor_hidden < 1:
            raise ConfigurationError("predictor hidden width must be positive")
        if self.description_dim is not None and self.description_dim < 1:
            raise ConfigurationError("description_dim must be positive when set")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class SharedParameters:
    """Covariate encoder (embedder + layers), treatment encoder, cross block."""

    tensors: dict[str, Tensor]

    def copy(self) -> "SharedParameters":
        return SharedParameters({k: v.copy() for k, v in self.tensors.items()})

    def structure(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.tensors.items()}


@dataclass
class PredictorHead:
    """Per-site two-layer output MLP; never leaves the site."""

    tensors: dict[str, Tensor]

    def copy(self) -> "PredictorHead":
        return PredictorHead({k: v.copy() for k, v in self.tensors.items()})


@dataclass
class TreatmentInput:
    """Exactly one of a 1-of-K index or a description vector."""

    one_hot_index: int | None = None
    description: Tensor | None = None

    def __post_init__(self) -> None:
        if (self.one_hot_index is None) == (self.description is None):
            raise ConfigurationError(
                "treatment input needs exactly one of one_hot_index / description")


def _attention_param_shapes(width: int) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for proj in ("wq", "wk", "wv", "wo"):
        shapes[proj] = (width, width)
    for bias in ("bq", "bk", "bv", "bo"):
        shapes[bias] = (width,)
    return shapes


def _block_shapes(prefix: str, width: int) -> dict[str, tuple[int, ...]]:
    shapes = {f"{prefix}attn.{k}": s for k, s in _attention_param_shapes(width).items()}
    shapes[f"{prefix}ln1.gain"] = (width,)
    shapes[f"{prefix}ln1.shift"] = (width,)
    shapes[f"{prefix}mlp.w1"] = (width, width)
    shapes[f"{prefix}mlp.b1"] = (width,)
    shapes[f"{prefix}mlp.w2"] = (width, width)
    shapes[f"{prefix}mlp.b2"] = (width,)
    shapes[f"{prefix}ln2.gain"] = (width,)
    shapes[f"{prefix}ln2.shift"] = (width,)
    return shapes


def shared_parameter_shapes(config: ModelConfig, vocab_size: int
                            ) -> dict[str, tuple[int, ...]]:
    d = config.embed_width
    shapes: dict[str, tuple[int, ...]] = {"embedder.table": (vocab_size, d)}
    for i in range(config.encoder_layers):
        shapes.update(_block_shapes(f"encoder.l{i}.", d))
    if config.description_dim is not None:
        shapes["treatment.proj.w"] = (config.description_dim, config.num_treatments)
        shapes["treatment.proj.b"] = (config.num_treatments,)
    shapes["treatment.mlp.w1"] = (config.num_treatments, d)
    shapes["treatment.mlp.b1"] = (d,)
    shapes["treatment.mlp.w2"] = (d, d)
    shapes["treatment.mlp.b2"] = (d,)
    for j in range(config.cross_layers):
        shapes.update(_block_shapes(f"cross.l{j}.", d))
    return shapes


def head_parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, h = config.embed_width, config.predictor_hidden
    return {"predictor.w1": (d, h), "predictor.b1": (h,),
            "predictor.w2": (h, 1), "predictor.b2": (1,)}


def _init_tensors(shapes: Mapping[str, tuple[int, ...]], rng: np.random.Generator,
                  init_std: float) -> dict[str, Tensor]:
    # Embeddings and attention projections: gaussian(init_std). ReLU MLP
    # weights: He scaling, keeping forward signal near unit variance so the
    # output layers do not have to grow their norms by orders of magnitude.
    # Biases and LN shift: zero; LN gain: one.
    tensors: dict[str, Tensor] = {}
    for name, shape in shapes.items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("gain"):
            tensors[name] = np.ones(shape)
        elif leaf.startswith("b") or leaf.endswith("shift"):
            tensors[name] = np.zeros(shape)
        elif ".mlp." in name or name.startswith("predictor.") or name.endswith("proj.w"):
            tensors[name] = rng.normal(0.0, math.sqrt(2.0 / shape[0]), shape)
        else:
            tensors[name] = rng.normal(0.0, init_std, shape)
    return tensors


def init_shared_parameters(config: ModelConfig, vocab_size: int,
                           rng: np.random.Generator) -> SharedParameters:
    config.validate()
    return SharedParameters(_init_tensors(
        shared_parameter_shapes(config, vocab_size), rng, config.init_std))


def init_predictor_head(config: ModelConfig, rng: np.random.Generator) -> PredictorHead:
    return PredictorHead(_init_tensors(head_parameter_shapes(config), rng, config.init_std))


def bind_parameters(tape: Tape, tensors: Mapping[str, Tensor],
                    trainable: bool) -> dict[str, Node]:
    """Put a parameter set on a tape, tracked or frozen."""
    if trainable:
        return {name: tape.param(name, value) for name, value in tensors.items()}
    return {name: tape.constant(value) for name, value in tensors.items()}


def _sub(nodes: Mapping[str, Node], prefix: str) -> dict[str, Node]:
    n = len(prefix)
    return {k[n:]: v for k, v in nodes.items() if k.startswith(prefix)}


def _transformer_block(x: Node, prefix: str, nodes: Mapping[str, Node], heads: int,
                       eps: float, key_value: Node | None = None,
                       mask: np.ndarray | None = None) -> tuple[Node, Node]:
    """Post-norm block: u = LN(x + Attn(x)); out = LN(u + MLP(u))."""
    p = _sub(nodes, prefix)
    kv = x if key_value is None else key_value
    attn_out, attn = multi_head_attention(x, kv, kv, heads, _sub(p, "attn."), mask=mask)
    u = layer_norm(add(x, attn_out), p["ln1.gain"], p["ln1.shift"], eps)
    hidden = relu(linear_forward(u, p["mlp.w1"], p["mlp.b1"]))
    out = layer_norm(add(u, linear_forward(hidden, p["mlp.w2"], p["mlp.b2"])),
                     p["ln2.gain"], p["ln2.shift"], eps)
    return out, attn


def covariate_encode_batch(seq: Node, mask: np.ndarray, nodes: Mapping[str, Node],
                           config: ModelConfig) -> tuple[Node, list[Node]]:
    """Run [b, L, d] sequences through the encoder stack.

    Padded positions are excluded as attention keys; attention maps are
    returned per layer as [b, heads, L, L] nodes.
    """
    if seq.value.shape[-1] != config.embed_width:
        raise ConfigurationError(
            f"sequence width {seq.value.shape[-1]} differs from model width "
            f"{config.embed_width}")
    key_mask = mask[:, None, :]  # every query sees the real keys
    states = seq
    maps: list[Node] = []
    for i in range(config.encoder_layers):
        states, attn = _transformer_block(
            states, f"encoder.l{i}.", nodes, config.self_heads,
            config.layer_norm_eps, mask=key_mask)
        maps.append(attn)
    return states, maps


@dataclass
class TreatmentBatch:
    """Per-record treatment inputs ready for the encoder MLP."""

    pathway: str      # "one_hot" | "description"
    features: Tensor  # [b, K] or [b, description_dim]


def one_hot_matrix(indices: Sequence[int], num_treatments: int) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= num_treatments):
        raise ConfigurationError(
            f"treatment index out of range [0, {num_treatments})")
    out = np.zeros((idx.size, num_treatments))
    out[np.arange(idx.size), idx] = 1.0
    return out


def batch_treatments(indices: Sequence[int], config: ModelConfig,
                     descriptions: Mapping[int, Tensor] | None = None) -> TreatmentBatch:
    """One-hot rows, or description rows when description vectors are in play."""
    if descriptions is None:
        return TreatmentBatch("one_hot", one_hot_matrix(indices, config.num_treatments))
    if config.description_dim is None:
        raise ConfigurationError("description vectors supplied but description_dim unset")
    rows = []
    for t in indices:
        if int(t) not in descriptions:
            raise ConfigurationError(f"no description vector for treatment {int(t)}")
        vec = np.asarray(descriptions[int(t)], dtype=np.float64)
        if vec.shape != (config.description_dim,):
            raise ConfigurationError(
                f"description for treatment {int(t)} has shape {vec.shape}, "
                f"expected ({config.description_dim},)")
        rows.append(vec)
    return TreatmentBatch("description", np.stack(rows, axis=0))


def treatment_encode_batch(tape: Tape, treatments: TreatmentBatch,
                           nodes: Mapping[str, Node],
                           config: ModelConfig) -> Node:
    """Two-layer ReLU MLP over one-hot codes or projected descriptions."""
    x = tape.constant(treatments.features)
    if treatments.pathway == "description":
        if "treatment.proj.w" not in nodes:
            raise ConfigurationError(
                "description pathway requested but the projection layer is unconfigured")
        x = linear_forward(x, nodes["treatment.proj.w"], nodes["treatment.proj.b"])
    elif treatments.features.shape[-1] != config.num_treatments:
        raise ShapeError(
            f"one-hot width {treatments.features.shape[-1]} differs from "
            f"{config.num_treatments} treatments")
    hidden = relu(linear_forward(x, nodes["treatment.mlp.w1"], nodes["treatment.mlp.b1"]))
    return linear_forward(hidden, nodes["treatment.mlp.w2"], nodes["treatment.mlp.b2"])


def cross_attend_batch(treatment_emb: Node, token_states: Node, mask: np.ndarray,
                       nodes: Mapping[str, Node],
                       config: ModelConfig) -> tuple[Node, list[Node]]:
    """Fuse treatment and covariates: the treatment embedding is the sole
    query over the token states (keys and values, [CLS] included)."""
    b, d = treatment_emb.value.shape
    query = reshape(treatment_emb, (b, 1, d))
    key_mask = mask[:, None, :]
    maps: list[Node] = []
    for j in range(config.cross_layers):
        query, attn = _transformer_block(
            query, f"cross.l{j}.", nodes, config.cross_heads,
            config.layer_norm_eps, key_value=token_states, mask=key_mask)
        maps.append(attn)  # [b, heads, 1, L]
    return reshape(query, (b, d)), maps


def predictor_batch(fused: Node, head_nodes: Mapping[str, Node]) -> Node:
    """Scalar outcome per row: W2 . relu(W1 . fused + b1) + b2."""
    hidden = relu(linear_forward(fused, head_nodes["predictor.w1"],
                                 head_nodes["predictor.b1"]))
    out = linear_forward(hidden, head_nodes["predictor.w2"], head_nodes["predictor.b2"])
    return reshape(out, (fused.value.shape[0],))


@dataclass
class AttentionMaps:
    """Raw attention activations from one forward pass.

    self_attention: [b, layers, heads, L, L]; cross_attention:
    [b, cross_layers, heads, 1, L]. Rows are stochastic over unmasked keys.
    """

    self_attention: Tensor
    cross_attention: Tensor


def forward_batch(tape: Tape, encoded: EncodedBatch, treatments: TreatmentBatch,
                  shared_nodes: Mapping[str, Node], head_nodes: Mapping[str, Node],
                  config: ModelConfig) -> tuple[Node, AttentionMaps]:
    """Compose the blocks over a batch; returns predictions [b] and maps."""
    seq = tabular.embed_batch(tape, shared_nodes["embedder.table"], encoded)
    states, self_maps = covariate_encode_batch(seq, encoded.mask, shared_nodes, config)
    t_emb = treatment_encode_batch(tape, treatments, shared_nodes, config)
    fused, cross_maps = cross_attend_batch(t_emb, states, encoded.mask,
                                           shared_nodes, config)
    yhat = predictor_batch(fused, head_nodes)
    maps = AttentionMaps(
        self_attention=np.stack([m.value for m in self_maps], axis=1),
        cross_attention=np.stack([m.value for m in cross_maps], axis=1))
    return yhat, maps


def batch_loss(tape: Tape, encoded: EncodedBatch, treatments: TreatmentBatch,
               outcomes: Tensor, shared_nodes: Mapping[str, Node],
               head_nodes: Mapping[str, Node], config: ModelConfig) -> Node:
    yhat, _ = forward_batch(tape, encoded, treatments, shared_nodes, head_nodes, config)
    return mse_loss(yhat, tape.constant(outcomes))


# ---------------------------------------------------------------------------
# Single-record conveniences over frozen parameters.

def covariate_encode(seq: tabular.TokenEmbeddingSequence, shared: SharedParameters,
                     config: ModelConfig) -> tuple[Tensor, Tensor]:
    """Token states [L, d] and self-attention maps [layers, heads, L, L]."""
    tape = Tape()
    nodes = bind_parameters(tape, shared.tensors, trainable=False)
    states, maps = covariate_encode_batch(
        tape.constant(seq.embeddings[None]), seq.mask[None], nodes, config)
    return states.value[0], np.stack([m.value[0] for m in maps], axis=0)


def treatment_encode(treatment: TreatmentInput, shared: SharedParameters,
                     config: ModelConfig) -> Tensor:
    tape = Tape()
    nodes = bind_parameters(tape, shared.tensors, trainable=False)
    if treatment.description is not None:
        batch = batch_treatments([0], config, {0: np.asarray(treatment.description)})
    else:
        batch = batch_treatments([treatment.one_hot_index], config)
    return treatment_encode_batch(tape, batch, nodes, config).value[0]


def cross_attend(treatment_emb: Tensor, token_states: Tensor,
                 shared: SharedParameters, config: ModelConfig,
                 mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Fused vector [d] and cross maps [cross_layers, heads, 1, L]."""
    tape = Tape()
    nodes = bind_parameters(tape, shared.tensors, trainable=False)
    if mask is None:
        mask = np.ones(token_states.shape[0], dtype=bool)
    fused, maps = cross_attend_batch(
        tape.constant(treatment_emb[None]), tape.constant(token_states[None]),
        np.asarray(mask, dtype=bool)[None], nodes, config)
    return fused.value[0], np.stack([m.value[0] for m in maps], axis=0)


def predict(fused: Tensor, head: PredictorHead) -> float:
    tape = Tape()
    nodes = bind_parameters(tape, head.tensors, trainable=False)
    return float(predictor_batch(tape.constant(fused[None]), nodes).value[0])


def forward(record: DataRecord, treatment: TreatmentInput, shared: SharedParameters,
            head: PredictorHead, config: ModelConfig, schema: DatasetSchema,
            vocab: Vocabulary, standardizer: Standardizer | None = None
            ) -> tuple[float, AttentionMaps]:
    """Full composition for one record; deterministic given the parameters."""
    tape = Tape()
    shared_nodes = bind_parameters(tape, shared.tensors, trainable=False)
    head_nodes = bind_parameters(tape, head.tensors, trainable=False)
    encoded = tabular.encode_batch([record], schema, vocab, standardizer)
    if treatment.description is not None:
        tb = batch_treatments([0], config, {0: np.asarray(treatment.description)})
    else:
        tb = batch_treatments([treatment.one_hot_index], config)
    yhat, maps = forward_batch(tape, encoded, tb, shared_nodes, head_nodes, config)
    return float(yhat.value[0]), AttentionMaps(maps.self_attention[0],
                                               maps.cross_attention[0])


def predict_records(records: Sequence[DataRecord], schema: DatasetSchema,
                    vocab: Vocabulary, standardizer: Standardizer | None,
                    shared: SharedParameters, head: PredictorHead,
                    config: ModelConfig, arm: int | None = None,
                    descriptions: Mapping[int, Tensor] | None = None,
                    batch_size: int = 256) -> Tensor:
    """Predicted outcome per record, for the factual arm unless ``arm`` is set."""
    preds = []
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        tape = Tape()
        shared_nodes = bind_parameters(tape, shared.tensors, trainable=False)
        head_nodes = bind_parameters(tape, head.tensors, trainable=False)
        encoded = tabular.encode_batch(chunk, schema, vocab, standardizer)
        indices = [r.treatment for r in chunk] if arm is None else [arm] * len(chunk)
        tb = batch_treatments(indices, config, descriptions)
        yhat, _ = forward_batch(tape, encoded, tb, shared_nodes, head_nodes, config)
        preds.append(yhat.value)
    return np.concatenate(preds) if preds else np.zeros(0)


# ---------------------------------------------------------------------------
# Checkpoint container: JSON header + raw little-endian float64 payload.
# Personalized heads are stored in a separate section from the shared
# parameters and are never part of any aggregation input.

_CKPT_MAGIC = b"FEDITE-CKPT-1\n"


def save_checkpoint(path: str | Path, shared: SharedParameters,
                    heads: Mapping[int, PredictorHead], meta: dict | None = None) -> None:
    header = {
        "meta": meta or {},
        "shared": [[name, list(t.shape)] for name, t in shared.tensors.items()],
        "heads": [[int(site), [[name, list(t.shape)] for name, t in head.tensors.items()]]
                  for site, head in sorted(heads.items())],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name, _ in header["shared"]:
            fh.write(shared.tensors[name].astype("<f8").tobytes(order="C"))
        for site, entries in header["heads"]:
            for name, _ in entries:
                fh.write(heads[site].tensors[name].astype("<f8").tobytes(order="C"))


def load_checkpoint(path: str | Path
                    ) -> tuple[SharedParameters, dict[int, PredictorHead], dict]:
    with open(path, "rb") as fh:
        if fh.read(len(_CKPT_MAGIC)) != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (length,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(length).decode("utf-8"))

        def read_tensor(shape: list[int]) -> Tensor:
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise ValueError(f"{path}: truncated checkpoint payload")
            return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)

        shared = SharedParameters(
            {name: read_tensor(shape) for name, shape in header["shared"]})
        heads = {
            int(site): PredictorHead({name: read_tensor(shape) for name, shape in entries})
            for site, entries in header["heads"]}
    return shared, heads, header["meta"]
