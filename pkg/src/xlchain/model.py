"""Miniature pre-LN transformer encoder with MLM and classification heads."""

from __future__ import annotations

import io
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from xlchain import tensor as T
from xlchain.errors import CompatibilityError, ConfigError, FormatError, InputError
from xlchain.tensor import Tensor
from xlchain.tokenizer import TokenSequence, Vocabulary, collate

INIT_STD = 0.02
LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 1000
    max_positions: int = 50
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 128
    dropout_rate: float = 0.1
    n_classes: int = 2

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "n_layers", "d_ff"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if self.max_positions < 3:
            raise ConfigError(f"max_positions must be >= 3, got {self.max_positions}")
        if self.n_classes != 2:
            raise ConfigError("only binary classification (n_classes=2) is supported")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def param_count(self) -> int:
        """Closed-form number of scalar parameters."""
        v, p, d, f = self.vocab_size, self.max_positions, self.d_model, self.d_ff
        per_layer = 4 * (d * d + d) + 2 * (2 * d) + (d * f + f) + (f * d + d)
        return v * d + p * d + self.n_layers * per_layer + 2 * d + (d * v + v) + (d * self.n_classes + self.n_classes)

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "ModelConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name in values:
                kwargs[f.name] = float(values[f.name]) if f.name == "dropout_rate" else int(values[f.name])
        return cls(**kwargs)


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = config.d_model, config.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (config.vocab_size, d),
        "pos_emb": (config.max_positions, d),
    }
    for i in range(config.n_layers):
        pre = f"layers.{i}."
        shapes[pre + "ln1.gamma"] = (d,)
        shapes[pre + "ln1.beta"] = (d,)
        for proj in ("q", "k", "v", "o"):
            shapes[pre + f"attn.w{proj}"] = (d, d)
            shapes[pre + f"attn.b{proj}"] = (d,)
        shapes[pre + "ln2.gamma"] = (d,)
        shapes[pre + "ln2.beta"] = (d,)
        shapes[pre + "ff.w1"] = (d, f)
        shapes[pre + "ff.b1"] = (f,)
        shapes[pre + "ff.w2"] = (f, d)
        shapes[pre + "ff.b2"] = (d,)
    shapes["ln_f.gamma"] = (d,)
    shapes["ln_f.beta"] = (d,)
    shapes["mlm.w"] = (d, config.vocab_size)
    shapes["mlm.b"] = (config.vocab_size,)
    shapes["cls.w"] = (d, config.n_classes)
    shapes["cls.b"] = (config.n_classes,)
    return shapes


class ModelParams:
    """Named learnable tensors plus the architecture they belong to."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        expected = parameter_shapes(config)
        if list(tensors) != list(expected):
            raise ConfigError("parameter names do not match the configuration")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ConfigError(f"{name}: shape {tensors[name].shape}, expected {shape}")
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def items(self):
        return self.tensors.items()

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: T.parameter(t.data.copy(), k) for k, t in self.tensors.items()})

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def zero_grad(self) -> None:
        T.zero_grads(self.tensors.values())


def init_model(config: ModelConfig, seed: int) -> ModelParams:
    """Weights ~ N(0, 0.02), biases 0, layer-norm gains 1."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith("gamma"):
            data = np.ones(shape)
        elif name.endswith("beta") or len(shape) == 1:
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, INIT_STD, size=shape)
        tensors[name] = T.parameter(data, name)
    return ModelParams(config, tensors)


def as_batch(batch) -> tuple[np.ndarray, np.ndarray]:
    """Accept a list of TokenSequence or an ``(ids, mask)`` pair of arrays."""
    if isinstance(batch, tuple):
        ids, mask = batch
        return np.asarray(ids, dtype=np.int64), np.asarray(mask, dtype=np.int64)
    if not batch:
        raise InputError("empty batch")
    if isinstance(batch[0], TokenSequence):
        widths = {len(s.ids) for s in batch}
        if len(widths) != 1:
            raise InputError(f"sequences in a batch must have equal length, got {sorted(widths)}")
        ids = np.array([s.ids for s in batch], dtype=np.int64)
        mask = np.array([s.attention_mask for s in batch], dtype=np.int64)
        return ids, mask
    raise InputError(f"unsupported batch type {type(batch).__name__}")


def encoder(
    params: ModelParams,
    ids: np.ndarray,
    mask: np.ndarray,
    training: bool = False,
    rng: np.random.Generator | None = None,
    attention: list[np.ndarray] | None = None,
) -> Tensor:
    """Run the encoder stack; returns final-layer-normed hidden states ``B x L x d``.

    PAD keys get an additive -inf before the attention softmax. If
    ``attention`` is a list, per-layer attention probabilities are appended.
    """
    cfg = params.config
    b, length = ids.shape
    if length > cfg.max_positions:
        raise InputError(f"sequence length {length} exceeds max_positions {cfg.max_positions}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise CompatibilityError(f"token ids outside model vocabulary of size {cfg.vocab_size}")
    h_count, dh, d = cfg.n_heads, cfg.head_dim, cfg.d_model
    rate = cfg.dropout_rate
    positions = np.broadcast_to(np.arange(length), (b, length))
    x = T.embedding(params["tok_emb"], ids) + T.embedding(params["pos_emb"], positions)
    x = T.dropout(x, rate, rng, training)
    pad_keys = (np.asarray(mask) == 0)[:, None, None, :]

    def heads(t: Tensor) -> Tensor:
        return T.transpose(T.reshape(t, (b, length, h_count, dh)), (0, 2, 1, 3))

    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        h = T.layer_norm(x, params[p + "ln1.gamma"], params[p + "ln1.beta"], LN_EPS)
        q = heads(T.linear(h, params[p + "attn.wq"], params[p + "attn.bq"]))
        k = heads(T.linear(h, params[p + "attn.wk"], params[p + "attn.bk"]))
        v = heads(T.linear(h, params[p + "attn.wv"], params[p + "attn.bv"]))
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        probs = T.softmax(T.masked_fill(scores, pad_keys, -np.inf), axis=-1)
        if attention is not None:
            attention.append(probs.data)
        probs = T.dropout(probs, rate, rng, training)
        ctx = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (b, length, d))
        x = x + T.dropout(T.linear(ctx, params[p + "attn.wo"], params[p + "attn.bo"]), rate, rng, training)
        h = T.layer_norm(x, params[p + "ln2.gamma"], params[p + "ln2.beta"], LN_EPS)
        f = T.linear(T.gelu(T.linear(h, params[p + "ff.w1"], params[p + "ff.b1"])), params[p + "ff.w2"], params[p + "ff.b2"])
        x = x + T.dropout(f, rate, rng, training)
    return T.layer_norm(x, params["ln_f.gamma"], params["ln_f.beta"], LN_EPS)


def forward_classify(params: ModelParams, batch, training: bool = False, rng=None, attention=None) -> Tensor:
    """Logits ``B x 2`` from the BOS-position hidden state."""
    ids, mask = as_batch(batch)
    hidden = encoder(params, ids, mask, training, rng, attention)
    pooled = T.reshape(T.take(hidden, [0], axis=1), (ids.shape[0], params.config.d_model))
    return T.linear(pooled, params["cls.w"], params["cls.b"])


def forward_mlm(params: ModelParams, batch, training: bool = False, rng=None, attention=None) -> Tensor:
    """Per-position vocabulary logits ``B x L x V``."""
    ids, mask = as_batch(batch)
    hidden = encoder(params, ids, mask, training, rng, attention)
    return T.linear(hidden, params["mlm.w"], params["mlm.b"])


def mlm_loss(params: ModelParams, ids, mask, targets: np.ndarray, training: bool = False, rng=None) -> Tensor:
    """Cross-entropy at positions where ``targets >= 0``; other positions are ignored.

    Only the selected rows go through the vocabulary projection.
    """
    ids = np.asarray(ids)
    targets = np.asarray(targets)
    selected = np.flatnonzero(targets.reshape(-1) >= 0)
    if selected.size == 0:
        raise InputError("no masked positions to score")
    hidden = encoder(params, ids, np.asarray(mask), training, rng)
    flat = T.reshape(hidden, (ids.size, params.config.d_model))
    logits = T.linear(T.take(flat, selected, axis=0), params["mlm.w"], params["mlm.b"])
    return T.cross_entropy(logits, targets.reshape(-1)[selected])


def classify_loss(params: ModelParams, ids, mask, labels, training: bool = False, rng=None) -> Tensor:
    return T.cross_entropy(forward_classify(params, (ids, mask), training, rng), labels)


def predict(params: ModelParams, seqs: Sequence[TokenSequence], batch_size: int = 64) -> np.ndarray:
    """Eval-mode argmax labels; ties go to label 0 (NOT)."""
    out = []
    with T.no_grad():
        for start in range(0, len(seqs), batch_size):
            logits = forward_classify(params, collate(seqs[start : start + batch_size])).data
            out.append((logits[:, 1] > logits[:, 0]).astype(np.int64))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def check_compatible(params: ModelParams, vocab: Vocabulary) -> None:
    if vocab.size != params.config.vocab_size:
        raise CompatibilityError(
            f"vocabulary has {vocab.size} entries but the model expects {params.config.vocab_size}"
        )


# -- checkpoints -----------------------------------------------------------

CHECKPOINT_MAGIC = b"XCHN"
CHECKPOINT_VERSION = 1


class Checkpoint(NamedTuple):
    params: ModelParams
    config: ModelConfig
    vocab: Vocabulary
    meta: dict[str, str]


def save_checkpoint(params: ModelParams, vocab: Vocabulary, path: str | Path, meta: dict[str, str] | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(params, vocab, meta))


def checkpoint_bytes(params: ModelParams, vocab: Vocabulary, meta: dict[str, str] | None = None) -> bytes:
    """Little-endian: magic, version, config block, vocab block, named float32 tensors.

    ``meta`` (e.g. the fine-tuned language chain) is appended to the config
    block as extra ``key=value`` lines.
    """
    check_compatible(params, vocab)
    config_text = params.config.to_text()
    for key in sorted(meta or {}):
        value = str(meta[key])
        if "\n" in value or "=" in key or key in asdict(params.config):
            raise InputError(f"invalid checkpoint metadata key/value {key!r}")
        config_text += f"{key}={value}\n"
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    config_raw = config_text.encode("utf-8")
    buf.write(struct.pack("<Q", len(config_raw)))
    buf.write(config_raw)
    vocab_raw = vocab.to_bytes()
    buf.write(struct.pack("<Q", len(vocab_raw)))
    buf.write(vocab_raw)
    buf.write(struct.pack("<I", len(params.tensors)))
    for name, t in params.items():
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<B", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}Q", *t.shape))
        buf.write(t.data.astype("<f4").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, raw: bytes, source: str):
        self.raw, self.pos, self.source = raw, 0, source

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(
                f"{self.source}: truncated at offset {self.pos} reading {what} "
                f"(need {n} bytes, {len(self.raw) - self.pos} left)"
            )
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def fail(self, message: str, offset: int | None = None):
        raise FormatError(f"{self.source}: {message} at offset {self.pos if offset is None else offset}")


def load_checkpoint(path: str | Path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes(), source=str(path))


def parse_checkpoint(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    r = _Reader(raw, source)
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        r.fail("bad magic, expected b'XCHN'", 0)
    (version,) = r.unpack("<I", "version")
    if version != CHECKPOINT_VERSION:
        r.fail(f"unsupported version {version}", 4)
    (n,) = r.unpack("<Q", "config length")
    start = r.pos
    try:
        config_text = r.take(n, "config block").decode("utf-8")
    except UnicodeDecodeError:
        r.fail("config block is not UTF-8", start)
    values: dict[str, str] = {}
    for line in config_text.splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            r.fail(f"malformed config line {line!r}", start)
        values[key] = value
    try:
        config = ModelConfig.from_mapping(values)
    except (ValueError, ConfigError) as exc:
        r.fail(f"invalid model config ({exc})", start)
    config_keys = {f.name for f in fields(ModelConfig)}
    meta = {k: v for k, v in values.items() if k not in config_keys}

    (n,) = r.unpack("<Q", "vocabulary length")
    start = r.pos
    vocab_raw = r.take(n, "vocabulary block")
    try:
        vocab = Vocabulary.from_bytes(vocab_raw, source=f"{source}[vocab@{start}]")
    except FormatError as exc:
        r.fail(f"invalid vocabulary block ({exc})", start)

    expected = parameter_shapes(config)
    (count,) = r.unpack("<I", "tensor count")
    if count != len(expected):
        r.fail(f"tensor count {count} does not match config ({len(expected)})", r.pos - 4)
    tensors = {}
    for _ in range(count):
        start = r.pos
        (name_len,) = r.unpack("<H", "tensor name length")
        name = r.take(name_len, "tensor name").decode("utf-8", errors="replace")
        (rank,) = r.unpack("<B", f"rank of {name}")
        dims = r.unpack(f"<{rank}Q", f"dims of {name}")
        if expected.get(name) != tuple(dims):
            r.fail(f"unexpected tensor {name!r} with shape {tuple(dims)}", start)
        size = int(np.prod(dims))
        data = np.frombuffer(r.take(4 * size, f"data of {name}"), dtype="<f4").reshape(dims)
        tensors[name] = T.parameter(data.astype(np.float64), name)
    if r.pos != len(raw):
        r.fail(f"{len(raw) - r.pos} trailing bytes")
    params = ModelParams(config, {k: tensors[k] for k in expected})
    check_compatible(params, vocab)
    return Checkpoint(params, config, vocab, meta)
