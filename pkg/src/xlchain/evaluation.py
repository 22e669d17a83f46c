"""Binary classification metrics (OFF = positive class) and model evaluation."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from xlchain.data import Dataset
from xlchain.errors import InputError
from xlchain.model import ModelParams, check_compatible, predict
from xlchain.tokenizer import Vocabulary, encode


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def swapped(self) -> "ConfusionMatrix":
        """The same counts with NOT treated as the positive class."""
        return ConfusionMatrix(tp=self.tn, fp=self.fn, fn=self.fp, tn=self.tp)


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision_pos: float
    recall_pos: float
    f1_pos: float
    precision_neg: float
    recall_neg: float
    f1_neg: float
    macro_f1: float
    confusion: ConfusionMatrix

    def rounded(self, digits: int = 3) -> dict[str, float]:
        return {k: round(v, digits) for k, v in asdict(self).items() if k != "confusion"}


def confusion(predictions: Sequence[int], golds: Sequence[int]) -> ConfusionMatrix:
    p = np.asarray(predictions, dtype=np.int64)
    g = np.asarray(golds, dtype=np.int64)
    if p.shape != g.shape:
        raise InputError(f"{p.size} predictions vs {g.size} gold labels")
    if p.size == 0:
        raise InputError("cannot score an empty prediction list")
    if not (np.isin(p, (0, 1)).all() and np.isin(g, (0, 1)).all()):
        raise InputError("labels must be 0 (NOT) or 1 (OFF)")
    return ConfusionMatrix(
        tp=int(np.sum((p == 1) & (g == 1))),
        fp=int(np.sum((p == 1) & (g == 0))),
        fn=int(np.sum((p == 0) & (g == 1))),
        tn=int(np.sum((p == 0) & (g == 0))),
    )


def _ratio(num: int, den: int) -> float:
    # Undefined precision / recall / F1 count as 0.0.
    return num / den if den else 0.0


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def metrics(cm: ConfusionMatrix) -> Metrics:
    if cm.total <= 0:
        raise InputError("empty confusion matrix")
    pp, rp, fp1 = _prf(cm.tp, cm.fp, cm.fn)
    pn, rn, fn1 = _prf(cm.tn, cm.fn, cm.fp)
    return Metrics(
        accuracy=(cm.tp + cm.tn) / cm.total,
        precision_pos=pp,
        recall_pos=rp,
        f1_pos=fp1,
        precision_neg=pn,
        recall_neg=rn,
        f1_neg=fn1,
        macro_f1=(fp1 + fn1) / 2,
        confusion=cm,
    )


def majority_macro_f1(positive_rate: float) -> float:
    """Macro-F1 of always predicting the majority class NOT."""
    neg = 1.0 - positive_rate
    return (2 * neg / (1 + neg)) / 2


def evaluate(params: ModelParams, vocab: Vocabulary, dataset: Dataset, max_len: int = 50, batch_size: int = 64) -> Metrics:
    """Eval-mode inference over ``dataset`` followed by confusion-matrix metrics."""
    check_compatible(params, vocab)
    if not len(dataset):
        raise InputError(f"{dataset.language}: empty dataset")
    if not dataset.is_labeled():
        raise InputError(f"{dataset.language}: evaluation needs gold labels")
    seqs = [encode(vocab, t, max_len, dataset.language, pad=False) for t in dataset.texts]
    preds = predict(params, seqs, batch_size)
    return metrics(confusion(preds, dataset.labels))


def metrics_report(m: Metrics, language: str, partition: str) -> dict:
    cm = m.confusion
    return {
        "language": language,
        "partition": partition,
        "n": cm.total,
        "confusion": {"tp": cm.tp, "fp": cm.fp, "fn": cm.fn, "tn": cm.tn},
        "accuracy": round(m.accuracy, 3),
        "pos": {"p": round(m.precision_pos, 3), "r": round(m.recall_pos, 3), "f1": round(m.f1_pos, 3)},
        "neg": {"p": round(m.precision_neg, 3), "r": round(m.recall_neg, 3), "f1": round(m.f1_neg, 3)},
        "macro_f1": round(m.macro_f1, 3),
    }


class ZeroShotError(InputError):
    """The language was already used for fine-tuning."""


def zero_shot(params: ModelParams, vocab: Vocabulary, dataset: Dataset, chain: Sequence[str], max_len: int = 50) -> Metrics:
    """Evaluate on a language that never appeared in the fine-tuning chain."""
    if dataset.language in chain:
        raise ZeroShotError(f"{dataset.language} was fine-tuned in this checkpoint's chain {list(chain)}")
    return evaluate(params, vocab, dataset, max_len)
