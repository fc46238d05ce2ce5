"""A small post-norm transformer encoder whose tensors carry layer/sublayer tags.

Special token ids are fixed: ``PAD=0``, ``CLS=1``, ``SEP=2``, ``MASK=3``;
everything from ``FIRST_CONTENT_ID`` up is ordinary vocabulary.
"""

from __future__ import annotations

import logging
import math
import zlib
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from . import numcore as nc
from .numcore import Tensor

log = logging.getLogger(__name__)

PAD, CLS, SEP, MASK = 0, 1, 2, 3
FIRST_CONTENT_ID = 4
IGNORE = -100

SUBLAYERS = ("attention", "feed_forward", "embedding", "head")
HEAD_KINDS = ("mlm", "classification", "tagging")


@dataclass(frozen=True, order=True)
class ParamTag:
    """Where a tensor lives: ``layer_index`` is 1-based, None outside the stack."""

    name: str
    layer_index: Optional[int]
    sublayer: str

    def __post_init__(self):
        if self.sublayer not in SUBLAYERS:
            raise ValueError(f"unknown sublayer {self.sublayer!r}")
        in_stack = self.sublayer in ("attention", "feed_forward")
        if in_stack != (self.layer_index is not None):
            raise ValueError(f"tag {self.name}: layer_index must be set iff sublayer is attention/feed_forward")

    def to_row(self) -> str:
        layer = "" if self.layer_index is None else str(self.layer_index)
        return f"{self.name},{layer},{self.sublayer}"

    @classmethod
    def from_row(cls, row: str) -> "ParamTag":
        name, layer, sublayer = row.strip().split(",")
        return cls(name, int(layer) if layer else None, sublayer)


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 6
    hidden: int = 64
    num_heads: int = 4
    ff_width: int = 256
    vocab_size: int = 512
    max_len: int = 32
    head_kind: str = "mlm"
    num_labels: int = 3

    def __post_init__(self):
        if self.num_layers < 2:
            raise ValueError(f"num_layers must be >= 2 (distinct bottom/top layers), got {self.num_layers}")
        if self.hidden % self.num_heads:
            raise ValueError(f"hidden {self.hidden} not divisible by num_heads {self.num_heads}")
        if self.head_kind not in HEAD_KINDS:
            raise ValueError(f"head_kind must be one of {HEAD_KINDS}, got {self.head_kind!r}")
        if self.vocab_size <= FIRST_CONTENT_ID + 1:
            raise ValueError(f"vocab_size {self.vocab_size} leaves no content tokens")

    def with_head(self, head_kind: str, num_labels: Optional[int] = None) -> "ModelConfig":
        d = asdict(self)
        d["head_kind"] = head_kind
        if num_labels is not None:
            d["num_labels"] = num_labels
        return ModelConfig(**d)


def _encoder_shapes(cfg: ModelConfig):
    h, f = cfg.hidden, cfg.ff_width
    yield "embedding.tokens", (cfg.vocab_size, h), None, "embedding"
    yield "embedding.positions", (cfg.max_len, h), None, "embedding"
    yield "embedding.ln_gain", (h,), None, "embedding"
    yield "embedding.ln_bias", (h,), None, "embedding"
    for i in range(1, cfg.num_layers + 1):
        a = f"layer{i}.attention"
        for proj in ("query", "key", "value", "output"):
            yield f"{a}.{proj}_w", (h, h), i, "attention"
            yield f"{a}.{proj}_b", (h,), i, "attention"
        yield f"{a}.ln_gain", (h,), i, "attention"
        yield f"{a}.ln_bias", (h,), i, "attention"
        ff = f"layer{i}.feed_forward"
        yield f"{ff}.in_w", (h, f), i, "feed_forward"
        yield f"{ff}.in_b", (f,), i, "feed_forward"
        yield f"{ff}.out_w", (f, h), i, "feed_forward"
        yield f"{ff}.out_b", (h,), i, "feed_forward"
        yield f"{ff}.ln_gain", (h,), i, "feed_forward"
        yield f"{ff}.ln_bias", (h,), i, "feed_forward"


def _head_shapes(cfg: ModelConfig, kind: str):
    h = cfg.hidden
    if kind == "mlm":
        # decoder weights are tied to embedding.tokens
        yield "head.mlm.dense_w", (h, h), None, "head"
        yield "head.mlm.dense_b", (h,), None, "head"
        yield "head.mlm.ln_gain", (h,), None, "head"
        yield "head.mlm.ln_bias", (h,), None, "head"
        yield "head.mlm.out_b", (cfg.vocab_size,), None, "head"
    elif kind == "classification":
        yield "head.classification.dense_w", (h, h), None, "head"
        yield "head.classification.dense_b", (h,), None, "head"
        yield "head.classification.out_w", (h, cfg.num_labels), None, "head"
        yield "head.classification.out_b", (cfg.num_labels,), None, "head"
    else:
        yield "head.tagging.out_w", (h, cfg.num_labels), None, "head"
        yield "head.tagging.out_b", (cfg.num_labels,), None, "head"


def init_tensor(name: str, shape: tuple, seed: int) -> np.ndarray:
    """Deterministic per-tensor initializer keyed on (seed, name).

    Matrices are N(0, 1/fan_in); layer-norm gains are one; biases zero.
    """
    if name.endswith("ln_gain"):
        return np.ones(shape)
    if len(shape) == 1:
        return np.zeros(shape)
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    fan_in = shape[1] if name.startswith("embedding.") else shape[0]
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)


class ModelParams:
    """Ordered name -> tagged Tensor mapping plus the config it was built for."""

    def __init__(self, config: ModelConfig, tensors: "OrderedDict[str, Tensor]"):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def tags(self) -> list[ParamTag]:
        return [t.tag for t in self.tensors.values()]

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, OrderedDict((k, t.copy()) for k, t in self.tensors.items()))

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, t.data) for k, t in self.tensors.items())

    def trainable(self, head_kind: Optional[str] = None) -> list[Tensor]:
        """Encoder tensors plus the head of ``head_kind`` (default: config's)."""
        kind = head_kind or self.config.head_kind
        prefix = f"head.{kind}."
        return [t for k, t in self.tensors.items() if not k.startswith("head.") or k.startswith(prefix)]

    def tag_manifest(self) -> str:
        return "".join(t.tag.to_row() + "\n" for t in self.tensors.values())


def _make(name, shape, layer, sub, seed) -> Tensor:
    return Tensor(init_tensor(name, shape, seed), requires_grad=True, tag=ParamTag(name, layer, sub))


def build_model(config: ModelConfig, seed: int) -> ModelParams:
    """Fresh encoder + MLM head (+ the task head named by ``config.head_kind``)."""
    tensors = OrderedDict()
    for name, shape, layer, sub in _encoder_shapes(config):
        tensors[name] = _make(name, shape, layer, sub, seed)
    kinds = ["mlm"] if config.head_kind == "mlm" else ["mlm", config.head_kind]
    for kind in kinds:
        for name, shape, layer, sub in _head_shapes(config, kind):
            tensors[name] = _make(name, shape, layer, sub, seed)
    return ModelParams(config, tensors)


def attach_head(params: ModelParams, head_kind: str, num_labels: int, seed: int) -> ModelParams:
    """Copy of ``params`` with a freshly initialized task head."""
    cfg = params.config.with_head(head_kind, num_labels)
    tensors = OrderedDict((k, t.copy()) for k, t in params.items() if not k.startswith(f"head.{head_kind}."))
    for name, shape, layer, sub in _head_shapes(cfg, head_kind):
        tensors[name] = _make(name, shape, layer, sub, seed)
    return ModelParams(cfg, tensors)


def expected_parameter_count(config: ModelConfig, heads: Iterable[str] = ("mlm",)) -> int:
    h, f, L = config.hidden, config.ff_width, config.num_layers
    emb = config.vocab_size * h + config.max_len * h + 2 * h
    attn = 4 * (h * h + h) + 2 * h
    ff = h * f + f + f * h + h + 2 * h
    total = emb + L * (attn + ff)
    for kind in heads:
        if kind == "mlm":
            total += h * h + h + 2 * h + config.vocab_size
        elif kind == "classification":
            total += h * h + h + h * config.num_labels + config.num_labels
        elif kind == "tagging":
            total += h * config.num_labels + config.num_labels
    return total


def pad_batch(seqs: Sequence[np.ndarray], pad_value: int = PAD) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), pad_value, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def _linear(x, w, b):
    return nc.add(nc.matmul(x, w), b)


def encode(params: ModelParams, ids: np.ndarray) -> tuple[Tensor, list[Tensor]]:
    """Run the encoder stack; returns final states and per-layer outputs (B, T, H)."""
    cfg = params.config
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise ValueError(f"ids must be (batch, seq_len), got shape {ids.shape}")
    b, t = ids.shape
    if t > cfg.max_len:
        raise ValueError(f"sequence length {t} exceeds max_len {cfg.max_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ValueError(f"token ids must lie in [0, {cfg.vocab_size})")
    p = params.tensors
    nh = cfg.num_heads
    dh = cfg.hidden // nh
    x = nc.add(nc.embedding_lookup(p["embedding.tokens"], ids), nc.getitem(p["embedding.positions"], slice(0, t)))
    x = nc.layer_norm(x, p["embedding.ln_gain"], p["embedding.ln_bias"])
    key_mask = np.where(ids == PAD, -1e9, 0.0)[:, None, None, :]
    hiddens = []
    for i in range(1, cfg.num_layers + 1):
        a = f"layer{i}.attention."

        def heads(z):
            return nc.transpose(nc.reshape(z, (b, t, nh, dh)), (0, 2, 1, 3))

        q = heads(_linear(x, p[a + "query_w"], p[a + "query_b"]))
        k = heads(_linear(x, p[a + "key_w"], p[a + "key_b"]))
        v = heads(_linear(x, p[a + "value_w"], p[a + "value_b"]))
        scores = nc.add(nc.scale(nc.matmul(q, nc.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh)), key_mask)
        ctx = nc.matmul(nc.softmax(scores), v)
        ctx = nc.reshape(nc.transpose(ctx, (0, 2, 1, 3)), (b, t, cfg.hidden))
        attn = _linear(ctx, p[a + "output_w"], p[a + "output_b"])
        x = nc.layer_norm(nc.add(x, attn), p[a + "ln_gain"], p[a + "ln_bias"])
        f = f"layer{i}.feed_forward."
        ff = _linear(nc.gelu(_linear(x, p[f + "in_w"], p[f + "in_b"])), p[f + "out_w"], p[f + "out_b"])
        x = nc.layer_norm(nc.add(x, ff), p[f + "ln_gain"], p[f + "ln_bias"])
        hiddens.append(x)
    return x, hiddens


def forward(params: ModelParams, ids: np.ndarray, head_kind: Optional[str] = None,
            positions: Optional[np.ndarray] = None) -> tuple[Tensor, list[Tensor]]:
    """Logits for ``head_kind`` plus the L per-layer hidden states.

    mlm: (N, vocab) rows for the flat ``positions`` into (B*T) (all if None);
    classification: (B, num_labels) from the CLS position;
    tagging: (B*T, num_labels).
    """
    kind = head_kind or params.config.head_kind
    cfg = params.config
    x, hiddens = encode(params, ids)
    p = params.tensors
    b, t = np.shape(ids)
    if kind == "mlm":
        flat = nc.reshape(x, (b * t, cfg.hidden))
        if positions is not None:
            flat = nc.getitem(flat, np.asarray(positions))
        h = nc.gelu(_linear(flat, p["head.mlm.dense_w"], p["head.mlm.dense_b"]))
        h = nc.layer_norm(h, p["head.mlm.ln_gain"], p["head.mlm.ln_bias"])
        logits = nc.add(nc.matmul(h, nc.transpose(p["embedding.tokens"], (1, 0))), p["head.mlm.out_b"])
    elif kind == "classification":
        pooled = nc.getitem(x, (slice(None), 0))
        h = nc.tanh(_linear(pooled, p["head.classification.dense_w"], p["head.classification.dense_b"]))
        logits = _linear(h, p["head.classification.out_w"], p["head.classification.out_b"])
    elif kind == "tagging":
        flat = nc.reshape(x, (b * t, cfg.hidden))
        logits = _linear(flat, p["head.tagging.out_w"], p["head.tagging.out_b"])
    else:
        raise ValueError(f"unknown head kind {kind!r}")
    return logits, hiddens


def mask_tokens(ids: np.ndarray, mask_rate: float, rng: np.random.Generator, vocab_size: int):
    """BERT-style corruption: of the chosen content positions 80% -> MASK,
    10% -> random content token, 10% kept. Returns (corrupted ids, flat positions, targets)."""
    ids = np.asarray(ids)
    content = ids >= FIRST_CONTENT_ID
    chosen = content & (rng.random(ids.shape) < mask_rate)
    if not chosen.any():
        cand = np.flatnonzero(content)
        chosen.flat[cand[rng.integers(len(cand))]] = True
    corrupted = ids.copy()
    roll = rng.random(ids.shape)
    corrupted[chosen & (roll < 0.8)] = MASK
    rand_pos = chosen & (roll >= 0.8) & (roll < 0.9)
    corrupted[rand_pos] = rng.integers(FIRST_CONTENT_ID, vocab_size, size=int(rand_pos.sum()))
    positions = np.flatnonzero(chosen)
    return corrupted, positions, ids.reshape(-1)[positions]


def length_bucketed_batches(lengths: np.ndarray, batch_size: int, rng: np.random.Generator,
                           bucket: int = 32) -> list[np.ndarray]:
    """One epoch of index batches; similar lengths share a batch to cut padding."""
    order = rng.permutation(len(lengths))
    chunk = batch_size * bucket
    batches = []
    for start in range(0, len(order), chunk):
        block = order[start:start + chunk]
        block = block[np.argsort(lengths[block], kind="stable")]
        batches.extend(block[i:i + batch_size] for i in range(0, len(block), batch_size))
    return [batches[i] for i in rng.permutation(len(batches))]


def mlm_loss(params: ModelParams, ids: np.ndarray, mask_rate: float, rng: np.random.Generator):
    corrupted, positions, targets = mask_tokens(ids, mask_rate, rng, params.config.vocab_size)
    logits, _ = forward(params, corrupted, "mlm", positions=positions)
    return nc.cross_entropy(logits, targets), logits, targets


def mlm_eval(params: ModelParams, corpus: Sequence[np.ndarray], mask_rate: float, seed: int,
             batch_size: int = 128) -> tuple[float, float]:
    """(mean masked-token loss, masked-token accuracy) under a fixed masking seed."""
    rng = np.random.default_rng(seed)
    tot_loss = tot_correct = tot_n = 0.0
    with nc.no_grad():
        for start in range(0, len(corpus), batch_size):
            ids = pad_batch(corpus[start:start + batch_size])
            loss, logits, targets = mlm_loss(params, ids, mask_rate, rng)
            n = len(targets)
            tot_loss += loss.item() * n
            tot_correct += float((logits.data.argmax(axis=1) == targets).sum())
            tot_n += n
    return tot_loss / tot_n, tot_correct / tot_n


def pretrain_mlm(params: ModelParams, corpus: Sequence[np.ndarray], mask_rate: float = 0.15,
                 steps: int = 1000, seed: int = 0, batch_size: int = 64, lr: float = 1e-3,
                 warmup_fraction: float = 0.1, checkpoint_path=None, log_every: int = 0) -> ModelParams:
    """Masked-LM training of encoder + MLM head; returns a new ModelParams."""
    if not len(corpus):
        raise ValueError("pretraining corpus is empty")
    if not 0.0 < mask_rate < 1.0:
        raise ValueError(f"mask_rate must lie in (0, 1), got {mask_rate}")
    params = params.copy()
    trainable = params.trainable("mlm")
    state = nc.AdamState()
    warm = nc.linear_warmup(int(warmup_fraction * steps))
    rng = np.random.default_rng(seed)
    lengths = np.array([len(s) for s in corpus])
    batches: list = []
    for step in range(1, steps + 1):
        if not batches:
            batches = length_bucketed_batches(lengths, batch_size, rng)
        idx = batches.pop()
        ids = pad_batch([corpus[i] for i in idx])
        with nc.ComputationTape():
            loss, _, _ = mlm_loss(params, ids, mask_rate, rng)
            if not np.isfinite(loss.item()):
                raise nc.NumericalError(f"pretraining diverged at step {step}: loss {loss.item()}")
            nc.backward(loss)
        nc.adam_step(trainable, [t.grad for t in trainable], state, lr, warmup=warm)
        if log_every and step % log_every == 0:
            log.info("pretrain step %d loss %.4f", step, loss.item())
    if checkpoint_path is not None:
        save_params(checkpoint_path, params, step=steps)
    return params


def save_params(path, params: ModelParams, step: int = 0, extra: Optional[dict] = None) -> None:
    meta = {
        "config": asdict(params.config),
        "tags": [t.tag.to_row() for t in params.tensors.values()],
        "step": step,
    }
    meta.update(extra or {})
    nc.save_checkpoint(path, params.arrays(), meta)


def load_params(path) -> ModelParams:
    arrays, meta = nc.load_checkpoint(path)
    cfg = ModelConfig(**meta["config"])
    tags = [ParamTag.from_row(r) for r in meta["tags"]]
    tensors = OrderedDict()
    for (name, arr), tag in zip(arrays.items(), tags):
        tensors[name] = Tensor(arr, requires_grad=True, tag=tag)
    return ModelParams(cfg, tensors)
