"""Masked-LM pretraining and the sequential per-language fine-tuning chain."""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from xlchain import tensor as T
from xlchain.data import Dataset, split_stratified, write_olid_tsv
from xlchain.errors import ConfigError, InputError, NumericError, XlchainError
from xlchain.evaluation import Metrics, evaluate, metrics_report
from xlchain.model import ModelParams, check_compatible, classify_loss, mlm_loss, save_checkpoint
from xlchain.tokenizer import MASK, N_SPECIAL, PAD, TokenSequence, Vocabulary, collate, encode

log = logging.getLogger(__name__)

IGNORE = -1


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    epochs_per_language: int = 2
    batch_size: int = 32
    max_len: int = 50
    val_fraction: float = 0.10
    mask_ratio: float = 0.15
    seed: int = 0
    pretrain_steps: int = 200
    pretrain_lr: float = 1e-3

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs_per_language < 0 or self.pretrain_steps < 0:
            raise ConfigError("epochs and steps must be non-negative")
        if self.max_len < 3:
            raise ConfigError(f"max_len must be >= 3, got {self.max_len}")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigError(f"mask_ratio must be in [0, 1], got {self.mask_ratio}")
        if self.learning_rate <= 0 or self.pretrain_lr <= 0:
            raise ConfigError("learning rates must be positive")


# -- masking ---------------------------------------------------------------


def mask_batch(
    ids: np.ndarray,
    mask_ratio: float,
    rng: np.random.Generator,
    vocab_size: int,
    mask_prob: float = 0.8,
    random_prob: float = 0.1,
) -> tuple[np.ndarray, np.ndarray]:
    """BERT-style corruption of an id array; returns ``(corrupted, targets)``.

    Each non-special position is selected with probability ``mask_ratio``;
    selected positions become MASK (``mask_prob``), a random non-special id
    (``random_prob``) or stay unchanged. ``targets`` holds the original id at
    selected positions and ``IGNORE`` elsewhere. The rng is consumed the same
    way regardless of the outcome.
    """
    ids = np.asarray(ids, dtype=np.int64)
    maskable = ids >= N_SPECIAL
    select = (rng.random(ids.shape) < mask_ratio) & maskable
    action = rng.random(ids.shape)
    random_ids = rng.integers(N_SPECIAL, max(vocab_size, N_SPECIAL + 1), size=ids.shape)
    corrupted = ids.copy()
    to_mask = select & (action < mask_prob)
    to_random = select & (action >= mask_prob) & (action < mask_prob + random_prob)
    corrupted[to_mask] = MASK
    corrupted[to_random] = random_ids[to_random]
    targets = np.where(select, ids, IGNORE)
    return corrupted, targets


def mask_tokens(
    seq: TokenSequence,
    mask_ratio: float,
    rng: np.random.Generator,
    vocab_size: int,
    mask_prob: float = 0.8,
    random_prob: float = 0.1,
) -> tuple[TokenSequence, np.ndarray]:
    corrupted, targets = mask_batch(np.array(seq.ids), mask_ratio, rng, vocab_size, mask_prob, random_prob)
    return TokenSequence(corrupted.tolist(), list(seq.attention_mask), seq.language), targets


# -- pretraining -----------------------------------------------------------


@dataclass
class PretrainResult:
    params: ModelParams
    losses: list[float]


def pretrain(
    params: ModelParams,
    texts: Sequence[str],
    vocab: Vocabulary,
    config: TrainConfig,
    steps: int | None = None,
    on_step: Callable[[int, float], None] | None = None,
) -> PretrainResult:
    """MLM training on uniformly sampled, language-mixed batches (updates ``params`` in place)."""
    if not texts:
        raise InputError("pretraining needs a non-empty corpus")
    check_compatible(params, vocab)
    steps = config.pretrain_steps if steps is None else steps
    rng = np.random.default_rng([config.seed, 1])
    seqs = [encode(vocab, t, config.max_len, pad=False) for t in texts]
    state = T.AdamState()
    losses = []
    for step in range(steps):
        batch = [seqs[i] for i in rng.integers(0, len(seqs), size=config.batch_size)]
        ids, attn = collate(batch)
        corrupted, targets = mask_batch(ids, config.mask_ratio, rng, vocab.size)
        while not (targets >= 0).any():
            corrupted, targets = mask_batch(ids, config.mask_ratio, rng, vocab.size)
        params.zero_grad()
        loss = mlm_loss(params, corrupted, attn, targets, training=True, rng=rng)
        T.backward(loss)
        T.adam_step(params.tensors, T.gradients(params.tensors), state, config.pretrain_lr)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(f"pretraining loss became {value} at step {step}")
        losses.append(value)
        if on_step is not None:
            on_step(step, value)
    return PretrainResult(params, losses)


def mlm_eval_loss(params: ModelParams, texts: Sequence[str], vocab: Vocabulary, config: TrainConfig, seed: int = 0) -> float:
    """Eval-mode MLM loss on a fixed corruption of ``texts`` (for before/after comparisons)."""
    rng = np.random.default_rng([seed, 2])
    seqs = [encode(vocab, t, config.max_len, pad=False) for t in texts]
    total, count = 0.0, 0
    with T.no_grad():
        for start in range(0, len(seqs), 64):
            ids, attn = collate(seqs[start : start + 64])
            corrupted, targets = mask_batch(ids, config.mask_ratio, rng, vocab.size)
            n = int((targets >= 0).sum())
            if n:
                total += mlm_loss(params, corrupted, attn, targets).item() * n
                count += n
    if not count:
        raise InputError("no maskable tokens in the evaluation texts")
    return total / count


# -- fine-tuning -----------------------------------------------------------


@dataclass
class LanguageRecord:
    language: str
    n_train: int
    n_val: int
    epoch_losses: list[float]
    metrics: Metrics
    val: Dataset = field(repr=False)

    def to_dict(self) -> dict:
        report = metrics_report(self.metrics, self.language, "val")
        return {
            "lang": self.language,
            "n_train": self.n_train,
            "n_val": self.n_val,
            "epoch_losses": [round(x, 6) for x in self.epoch_losses],
            "metrics": report,
            "val_ids": self.val.ids,
        }


def finetune_language(
    params: ModelParams,
    dataset: Dataset,
    vocab: Vocabulary,
    config: TrainConfig,
    rng: np.random.Generator,
) -> tuple[ModelParams, LanguageRecord]:
    """Stratified split, ``epochs_per_language`` passes of classification training,
    then eval-mode validation on this language's held-out split only."""
    if dataset.partition == "test":
        raise InputError(f"{dataset.language}: refusing to train on a test-partition dataset")
    check_compatible(params, vocab)
    train, val = split_stratified(dataset, config.val_fraction, rng)
    seqs = [encode(vocab, t, config.max_len, dataset.language, pad=False) for t in train.texts]
    labels = train.labels
    state = T.AdamState()
    epoch_losses = []
    for epoch in range(config.epochs_per_language):
        order = rng.permutation(len(seqs))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            ids, attn = collate([seqs[i] for i in idx])
            params.zero_grad()
            loss = classify_loss(params, ids, attn, labels[idx], training=True, rng=rng)
            T.backward(loss)
            T.adam_step(params.tensors, T.gradients(params.tensors), state, config.learning_rate)
            total += loss.item() * len(idx)
        mean = total / len(seqs)
        if not np.isfinite(mean):
            raise NumericError(f"{dataset.language}: training loss became {mean} in epoch {epoch}")
        epoch_losses.append(mean)
        log.info("lang=%s epoch=%d loss=%.6f", dataset.language, epoch, mean)
    params.zero_grad()
    m = evaluate(params, vocab, val, config.max_len)
    return params, LanguageRecord(dataset.language, len(train), len(val), epoch_losses, m, val)


def stage_rng(seed: int, language: str) -> np.random.Generator:
    """Per-language stream, so a language's split and batch order do not depend on its chain position."""
    return np.random.default_rng([seed, 3, zlib.crc32(language.encode("utf-8"))])


@dataclass
class ChainReport:
    records: list[LanguageRecord]
    seed: int
    config: dict
    checkpoint: str | None = None
    stage_checkpoints: list[str] = field(default_factory=list)

    @property
    def languages(self) -> list[str]:
        return [r.language for r in self.records]

    def to_dict(self) -> dict:
        return {
            "languages": [r.to_dict() for r in self.records],
            "checkpoint": self.checkpoint,
            "seed": self.seed,
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False, sort_keys=False) + "\n"


def finetune_chain(
    params: ModelParams,
    datasets: Sequence[Dataset],
    vocab: Vocabulary,
    config: TrainConfig,
    out_dir: str | Path | None = None,
    extra_config: dict | None = None,
) -> ChainReport:
    """Fine-tune on each dataset in order, threading ``params`` through.

    With ``out_dir``, a checkpoint is written after every stage
    (``stage<k>_<lang>.ckpt``) together with that stage's validation split
    (``val_<lang>.tsv``); the last stage's checkpoint is also ``final.ckpt``.
    Each checkpoint records the languages fine-tuned so far under ``chain``.
    """
    if not datasets:
        raise InputError("the chain needs at least one language")
    languages = [d.language for d in datasets]
    if len(set(languages)) != len(languages):
        raise InputError(f"duplicate language in chain {languages}")
    report = ChainReport([], config.seed, {**asdict(config), **(extra_config or {})})
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for k, dataset in enumerate(datasets):
        try:
            params, record = finetune_language(params, dataset, vocab, config, stage_rng(config.seed, dataset.language))
        except XlchainError as exc:
            raise type(exc)(f"language {dataset.language}: {exc}") from exc
        report.records.append(record)
        log.info("lang=%s macro_f1=%.3f f1_pos=%.3f", record.language, record.metrics.macro_f1, record.metrics.f1_pos)
        if out is not None:
            meta = {"chain": ",".join(languages[: k + 1]), "seed": str(config.seed)}
            stage = out / f"stage{k + 1}_{dataset.language}.ckpt"
            save_checkpoint(params, vocab, stage, meta)
            write_olid_tsv(record.val, out / f"val_{dataset.language}.tsv")
            report.stage_checkpoints.append(str(stage))
    if out is not None:
        final = out / "final.ckpt"
        final.write_bytes(Path(report.stage_checkpoints[-1]).read_bytes())
        report.checkpoint = str(final)
    return report
