"""OLID-style TSV ingestion, corpus statistics, splitting and synthetic languages."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from xlchain.errors import ConfigError, FormatError, InputError, IntegrityError, LabelError

NOT, OFF = 0, 1
LABELS = {"NOT": NOT, "OFF": OFF}
LABEL_NAMES = {v: k for k, v in LABELS.items()}
HEADER = ("id", "tweet", "subtask_a")
PARTITIONS = ("train", "val", "test")


@dataclass(frozen=True)
class LabeledExample:
    id: str
    text: str
    label: int | None
    language: str


@dataclass
class Dataset:
    language: str
    partition: str
    examples: list[LabeledExample] = field(default_factory=list)

    def __post_init__(self):
        if self.partition not in PARTITIONS:
            raise InputError(f"unknown partition {self.partition!r}")
        seen = set()
        for ex in self.examples:
            if ex.language != self.language:
                raise IntegrityError(f"example {ex.id} has language {ex.language!r}, dataset is {self.language!r}")
            if ex.id in seen:
                raise IntegrityError(f"duplicate id {ex.id!r} in {self.language} dataset")
            seen.add(ex.id)

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([ex.label for ex in self.examples], dtype=np.int64)

    @property
    def texts(self) -> list[str]:
        return [ex.text for ex in self.examples]

    @property
    def ids(self) -> list[str]:
        return [ex.id for ex in self.examples]

    def is_labeled(self) -> bool:
        return all(ex.label is not None for ex in self.examples)

    def label_counts(self) -> tuple[int, int]:
        """``(positive, negative)`` counts."""
        pos = sum(1 for ex in self.examples if ex.label == OFF)
        neg = sum(1 for ex in self.examples if ex.label == NOT)
        return pos, neg


def load_olid_tsv(path: str | Path, language: str, partition: str = "train") -> Dataset:
    """Parse an OLID level-A file: header ``id, tweet, subtask_a`` then one row per tweet.

    Labels are case-sensitive (``OFF``/``NOT``). A two-column ``id, tweet``
    file loads with ``label=None`` for inference-only use.
    """
    path = Path(path)
    if partition not in PARTITIONS:
        raise InputError(f"unknown partition {partition!r}")
    with path.open(encoding="utf-8", newline="") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise FormatError(f"{path}:1: missing header line")
    header = tuple(lines[0].rstrip("\r").split("\t"))
    if header not in (HEADER, HEADER[:2]):
        raise FormatError(f"{path}:1: expected header {'<TAB>'.join(HEADER)}, got {lines[0]!r}")
    labeled = len(header) == 3
    examples, seen = [], {}
    for lineno, line in enumerate(lines[1:], start=2):
        cols = line.rstrip("\r").split("\t")
        if len(cols) != len(header):
            raise FormatError(f"{path}:{lineno}: expected {len(header)} tab-separated columns, found {len(cols)}")
        ex_id, text = cols[0], cols[1]
        if not ex_id:
            raise FormatError(f"{path}:{lineno}: empty id")
        if not text.strip():
            raise FormatError(f"{path}:{lineno}: empty text")
        label = None
        if labeled:
            if cols[2] not in LABELS:
                raise LabelError(f"{path}:{lineno}: unknown label {cols[2]!r} (expected OFF or NOT)")
            label = LABELS[cols[2]]
        if ex_id in seen:
            raise IntegrityError(f"{path}:{lineno}: duplicate id {ex_id!r} (first seen on line {seen[ex_id]})")
        seen[ex_id] = lineno
        examples.append(LabeledExample(ex_id, text, label, language))
    return Dataset(language, partition, examples)


def write_olid_tsv(dataset: Dataset, path: str | Path) -> None:
    rows = ["\t".join(HEADER)]
    for ex in dataset:
        if "\t" in ex.text or "\n" in ex.text:
            raise InputError(f"example {ex.id}: text contains a tab or newline")
        rows.append(f"{ex.id}\t{ex.text}\t{LABEL_NAMES[ex.label]}")
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


# -- statistics ------------------------------------------------------------


def percent(numerator: int, denominator: int) -> Decimal:
    """``100 * n / d`` rounded half-up to two decimals."""
    if denominator == 0:
        return Decimal("0.00")
    return (Decimal(100 * numerator) / Decimal(denominator)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)


@dataclass(frozen=True)
class LanguageRow:
    language: str
    positive: int
    negative: int
    offensive_pct: Decimal
    share_pct: Decimal

    @property
    def total(self) -> int:
        return self.positive + self.negative


@dataclass(frozen=True)
class DatasetStats:
    rows: tuple[LanguageRow, ...]
    positive: int
    negative: int
    offensive_pct: Decimal

    @property
    def total(self) -> int:
        return self.positive + self.negative

    def row(self, language: str) -> LanguageRow:
        for r in self.rows:
            if r.language == language:
                return r
        raise KeyError(language)

    def to_dict(self) -> dict:
        return {
            "languages": [
                {
                    "language": r.language,
                    "positive": r.positive,
                    "negative": r.negative,
                    "total": r.total,
                    "offensive_pct": str(r.offensive_pct),
                    "share_pct": str(r.share_pct),
                }
                for r in self.rows
            ],
            "total": {
                "positive": self.positive,
                "negative": self.negative,
                "total": self.total,
                "offensive_pct": str(self.offensive_pct),
            },
        }

    def format_table(self) -> str:
        lines = [f"{'Language':<12}{'Positive':>10}{'Negative':>10}{'Total':>10}{'OFF %':>9}{'Share %':>9}"]
        for r in self.rows:
            lines.append(
                f"{r.language:<12}{r.positive:>10}{r.negative:>10}{r.total:>10}{r.offensive_pct!s:>9}{r.share_pct!s:>9}"
            )
        lines.append(f"{'Total':<12}{self.positive:>10}{self.negative:>10}{self.total:>10}{self.offensive_pct!s:>9}{'100.00':>9}")
        return "\n".join(lines)


def stats_from_counts(counts: Sequence[tuple[str, int, int]]) -> DatasetStats:
    """Build statistics from ``(language, positive, negative)`` rows (order kept)."""
    merged: dict[str, list[int]] = {}
    for lang, pos, neg in counts:
        slot = merged.setdefault(lang, [0, 0])
        slot[0] += pos
        slot[1] += neg
    pos_total = sum(p for p, _ in merged.values())
    neg_total = sum(n for _, n in merged.values())
    grand = pos_total + neg_total
    rows = tuple(
        LanguageRow(lang, p, n, percent(p, p + n), percent(p + n, grand)) for lang, (p, n) in merged.items()
    )
    return DatasetStats(rows, pos_total, neg_total, percent(pos_total, grand))


def stats(datasets: Iterable[Dataset]) -> DatasetStats:
    counts = []
    for ds in datasets:
        if not ds.is_labeled():
            raise InputError(f"{ds.language}: statistics need labeled data")
        counts.append((ds.language, *ds.label_counts()))
    return stats_from_counts(counts)


def load_counts(path: str | Path) -> list[tuple[str, int, int]]:
    """Read a ``language<TAB>positive<TAB>negative`` counts file (header required)."""
    path = Path(path)
    rows = []
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header != ["language", "positive", "negative"]:
            raise FormatError(f"{path}:1: expected header language<TAB>positive<TAB>negative")
        for lineno, cols in enumerate(reader, start=2):
            if len(cols) != 3 or not cols[1].isdigit() or not cols[2].isdigit():
                raise FormatError(f"{path}:{lineno}: expected language and two non-negative integers")
            rows.append((cols[0], int(cols[1]), int(cols[2])))
    return rows


# -- splitting -------------------------------------------------------------


def split_stratified(dataset: Dataset, val_fraction: float, rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    """Per-class split sending ``round(n * val_fraction)`` examples to validation.

    Each class first gets ``floor(n_c * val_fraction)``; the rounding remainder
    goes to the classes with the largest fractional parts (NOT first on ties),
    so every class stays within one of its exact share. Validation examples
    keep their original relative order, as do training ones.
    """
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError(f"val_fraction must be in (0, 1), got {val_fraction}")
    by_class: dict[int, list[int]] = {NOT: [], OFF: []}
    for i, ex in enumerate(dataset.examples):
        if ex.label not in by_class:
            raise InputError(f"{dataset.language}: example {ex.id} is unlabeled")
        by_class[ex.label].append(i)
    if not by_class[NOT] or not by_class[OFF]:
        raise InputError(f"{dataset.language}: need at least one example of each class to split")
    frac = Fraction(val_fraction).limit_denominator(10**9)
    exact = {label: len(members) * frac for label, members in by_class.items()}
    counts = {label: math.floor(x) for label, x in exact.items()}
    target = math.floor(len(dataset) * frac + Fraction(1, 2))
    for label in sorted(by_class, key=lambda c: (-(exact[c] - counts[c]), c))[: target - sum(counts.values())]:
        counts[label] += 1
    val_idx: set[int] = set()
    for label in (NOT, OFF):
        members = by_class[label]
        chosen = rng.permutation(len(members))[: counts[label]]
        val_idx.update(members[j] for j in chosen)
    train = [ex for i, ex in enumerate(dataset.examples) if i not in val_idx]
    val = [ex for i, ex in enumerate(dataset.examples) if i in val_idx]
    return Dataset(dataset.language, "train", train), Dataset(dataset.language, "val", val)


# -- synthetic languages ---------------------------------------------------

# One lowercase script block per synthetic language; disjoint by construction.
SCRIPTS = (
    "abcdefghijklmnopqrstuvwxyz",
    "αβγδεζηθικλμνξοπρστυφχψω",
    "абвгдежзийклмнопрстуфхцчшщ",
    "աբգդեզէըթժիլխծկհձղճմյնշոչպ",
    "აბგდევზთიკლმნოპჟრსტუფქღყშჩ",
    "אבגדהוזחטיכלמנסעפצקרשת",
    "ⴰⴱⴳⴷⴹⴻⴼⴽⵀⵃⵄⵅⵇⵉⵊⵍⵎⵏⵓⵔⵕⵖⵙⵚⵛⵜ",
    "ᚠᚢᚦᚨᚱᚲᚷᚹᚺᚾᛁᛃᛇᛈᛉᛊᛏᛒᛖᛗᛚᛜᛞᛟ",
)
# Shared roots are spelled in a script no language uses for ordinary words.
ROOT_SCRIPT = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
LANGUAGE_TAGS = tuple(f"syn{i}" for i in range(len(SCRIPTS)))

N_ROOTS = 24
AFFIXES_PER_LANGUAGE = 2
LEXICON_SIZE = 2000
OFF_RATIO = 0.25
# At full transfer strength this fraction of lexicon ranks uses the shared spelling.
LEXICON_SHARE = 0.5
# Neutral roots are three times as many so each root, neutral or offensive,
# occurs about equally often and tokenises with similar granularity.
N_NEUTRAL_ROOTS = 3 * N_ROOTS
# Lexicon words are 2-5 letters; compounds (2-letter affix + 5-6 letter root) are 7-8.
MARKER_MIN_LEN = 7


@dataclass(frozen=True)
class SyntheticLanguage:
    tag: str
    script: str
    lexicon: tuple[str, ...]
    affixes: tuple[str, ...]
    roots: tuple[str, ...]
    shared: tuple[bool, ...]
    neutral_roots: tuple[str, ...]
    neutral_shared: tuple[bool, ...]


def _word(rng: np.random.Generator, letters: str, lo: int, hi: int) -> str:
    n = int(rng.integers(lo, hi + 1))
    return "".join(letters[int(j)] for j in rng.integers(0, len(letters), size=n))


def _unique_words(rng, letters, count, lo, hi, taken: set[str]) -> list[str]:
    words = []
    while len(words) < count:
        w = _word(rng, letters, lo, hi)
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


def synthetic_languages(n_languages: int, transfer_strength: float, rng: np.random.Generator) -> list[SyntheticLanguage]:
    pool: set[str] = set()
    shared_roots = _unique_words(rng, ROOT_SCRIPT, N_ROOTS, 5, 6, pool)
    shared_neutral = _unique_words(rng, ROOT_SCRIPT, N_NEUTRAL_ROOTS, 5, 6, pool)
    shared_lexicon = _unique_words(rng, ROOT_SCRIPT, LEXICON_SIZE, 2, 5, pool)
    langs = []
    for i in range(n_languages):
        script = SCRIPTS[i]
        taken: set[str] = set()
        own_lexicon = _unique_words(rng, script, LEXICON_SIZE, 2, 5, taken)
        lexicon_shared = rng.random(LEXICON_SIZE) < LEXICON_SHARE * transfer_strength
        lexicon = [s if use else o for s, o, use in zip(shared_lexicon, own_lexicon, lexicon_shared)]
        own_roots = _unique_words(rng, script, N_ROOTS, 5, 6, taken)
        own_neutral = _unique_words(rng, script, N_NEUTRAL_ROOTS, 5, 6, taken)
        affixes = _unique_words(rng, script, AFFIXES_PER_LANGUAGE, 2, 2, set())
        shared = tuple(bool(rng.random() < transfer_strength) for _ in range(N_ROOTS))
        neutral_shared = tuple(bool(rng.random() < transfer_strength) for _ in range(N_NEUTRAL_ROOTS))
        roots = tuple(s if use else o for s, o, use in zip(shared_roots, own_roots, shared))
        neutral = tuple(s if use else o for s, o, use in zip(shared_neutral, own_neutral, neutral_shared))
        langs.append(
            SyntheticLanguage(
                LANGUAGE_TAGS[i], script, tuple(lexicon), tuple(affixes), roots, shared, neutral, neutral_shared
            )
        )
    return langs


def compound_word(lang: SyntheticLanguage, rng: np.random.Generator, offensive: bool) -> str:
    """One of the language's affixes glued to an offensive (marker) or neutral root."""
    affix = lang.affixes[int(rng.integers(0, len(lang.affixes)))]
    roots = lang.roots if offensive else lang.neutral_roots
    return affix + roots[int(rng.integers(0, len(roots)))]


def gen_synthetic(
    languages: int,
    examples_per_language: int,
    transfer_strength: float,
    seed: int,
) -> list[Dataset]:
    """Labeled synthetic corpora, one per language, 25% offensive.

    A sentence is 5-12 Zipf-weighted lexicon words in the language's own
    script plus one or two affix+root compounds. Offensive sentences use
    marker roots, the rest neutral roots, so length and word shape carry no
    label signal. Each root, marker or neutral, is the cross-language shared
    root with probability ``transfer_strength`` and a private one otherwise,
    so at full strength the label rests on which shared root appears and at
    zero nothing label-bearing is shared.
    """
    if not 1 <= languages <= len(SCRIPTS):
        raise ConfigError(f"languages must be in [1, {len(SCRIPTS)}], got {languages}")
    if examples_per_language < 20:
        raise ConfigError(f"examples_per_language must be >= 20, got {examples_per_language}")
    if not 0.0 <= transfer_strength <= 1.0:
        raise ConfigError(f"transfer_strength must be in [0, 1], got {transfer_strength}")
    rng = np.random.default_rng(seed)
    langs = synthetic_languages(languages, transfer_strength, rng)
    zipf = 1.0 / np.arange(1, LEXICON_SIZE + 1)
    zipf /= zipf.sum()
    n_off = int(round(OFF_RATIO * examples_per_language))
    datasets = []
    for lang in langs:
        labels = np.array([OFF] * n_off + [NOT] * (examples_per_language - n_off))
        rng.shuffle(labels)
        examples = []
        for j, label in enumerate(labels):
            n_words = int(rng.integers(5, 13))
            words = [lang.lexicon[int(k)] for k in rng.choice(LEXICON_SIZE, size=n_words, p=zipf)]
            for _ in range(int(rng.integers(1, 3))):
                words.insert(int(rng.integers(0, len(words) + 1)), compound_word(lang, rng, label == OFF))
            examples.append(LabeledExample(f"{lang.tag}-{j:05d}", " ".join(words), int(label), lang.tag))
        datasets.append(Dataset(lang.tag, "train", examples))
    return datasets


# The fixed corpus used for pretraining sanity checks and the golden chain run.
REFERENCE_CORPUS = {"languages": 2, "examples_per_language": 1000, "transfer_strength": 0.5, "seed": 0}


def reference_corpus() -> list[Dataset]:
    return gen_synthetic(**REFERENCE_CORPUS)


def marker_words(dataset: Dataset) -> list[str]:
    """Offensive marker words: the compounds (words of length >= 7) in OFF examples."""
    return [w for ex in dataset if ex.label == OFF for w in ex.text.split() if len(w) >= MARKER_MIN_LEN]
