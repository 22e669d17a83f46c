"""Byte-pair-encoding vocabulary shared across all languages.

Words are split on whitespace and spelled as symbol sequences whose final
symbol carries the ``</w>`` end-of-word suffix, so ``"ab cd"`` starts as
``a, b</w>, c, d</w>``. Decoding turns the suffix back into a space.
"""

from __future__ import annotations

import heapq
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from xlchain.errors import FormatError, InputError

EOW = "</w>"
UNK_GLYPH = "�"

PAD, UNK, BOS, EOS, MASK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("<pad>", "<unk>", "<s>", "</s>", "<mask>")
N_SPECIAL = len(SPECIAL_TOKENS)

DEFAULT_VOCAB_SIZE = 1000
VOCAB_MAGIC = "BPEVOCAB v1"
MERGES_SENTINEL = "#MERGES"


def word_symbols(word: str) -> list[str]:
    chars = list(word)
    chars[-1] = chars[-1] + EOW
    return chars


def base_alphabet(texts: Iterable[str]) -> list[str]:
    """Sorted set of initial symbols (plain and end-of-word forms) in ``texts``."""
    symbols: set[str] = set()
    for text in texts:
        for word in text.split():
            symbols.update(word_symbols(word))
    return sorted(symbols)


@dataclass
class Vocabulary:
    tokens: list[str]
    merges: list[tuple[str, str, str]]
    _index: dict[str, int] = field(init=False, repr=False, compare=False)
    _ranks: dict[tuple[str, str], int] = field(init=False, repr=False, compare=False)
    _cache: dict[str, tuple[int, ...]] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.tokens[:N_SPECIAL]) != SPECIAL_TOKENS:
            raise FormatError("vocabulary must start with the five special tokens")
        self._index = {}
        for i, tok in enumerate(self.tokens[N_SPECIAL:], start=N_SPECIAL):
            if tok in self._index:
                raise FormatError(f"duplicate token {tok!r} at id {i}")
            self._index[tok] = i
        self._ranks = {}
        for r, (left, right, result) in enumerate(self.merges):
            if left not in self._index or right not in self._index:
                raise FormatError(f"merge {r} uses a symbol that is not in the vocabulary")
            if result not in self._index:
                raise FormatError(f"merge {r} produces {result!r}, which is not in the vocabulary")
            self._ranks.setdefault((left, right), r)
        self._cache = {}

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def token_id(self, token: str) -> int:
        return self._index.get(token, UNK)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def alphabet(self) -> list[str]:
        """Symbols that are not produced by any merge (the base alphabet)."""
        produced = {result for _, _, result in self.merges}
        return [t for t in self.tokens[N_SPECIAL:] if t not in produced]

    def word_ids(self, word: str) -> tuple[int, ...]:
        cached = self._cache.get(word)
        if cached is None:
            cached = tuple(self.token_id(s) for s in self._segment(word))
            self._cache[word] = cached
        return cached

    def _segment(self, word: str) -> list[str]:
        symbols = word_symbols(word)
        ranks = self._ranks
        while len(symbols) > 1:
            best_rank, best_i = None, -1
            for i in range(len(symbols) - 1):
                r = ranks.get((symbols[i], symbols[i + 1]))
                if r is not None and (best_rank is None or r < best_rank):
                    best_rank, best_i = r, i
            if best_rank is None:
                break
            left, right, result = self.merges[best_rank]
            merged, i = [], 0
            while i < len(symbols):
                if i < len(symbols) - 1 and symbols[i] == left and symbols[i + 1] == right:
                    merged.append(result)
                    i += 2
                else:
                    merged.append(symbols[i])
                    i += 1
            symbols = merged
        return symbols

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    def to_bytes(self) -> bytes:
        lines = [f"{VOCAB_MAGIC} {self.size}", *self.tokens, MERGES_SENTINEL]
        lines += [f"{l}\t{r}\t{res}" for l, r, res in self.merges]
        return ("\n".join(lines) + "\n").encode("utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.from_bytes(Path(path).read_bytes(), source=str(path))

    @classmethod
    def from_bytes(cls, raw: bytes, source: str = "<bytes>") -> "Vocabulary":
        try:
            text = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{source}: not UTF-8 at byte {exc.start}") from exc
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        header = lines[0].split(" ") if lines else []
        if len(header) != 3 or " ".join(header[:2]) != VOCAB_MAGIC or not header[2].isdigit():
            raise FormatError(f"{source}:1: expected '{VOCAB_MAGIC} <size>' header")
        size = int(header[2])
        if size < N_SPECIAL:
            raise FormatError(f"{source}:1: size {size} is smaller than the special-token block")
        if len(lines) < size + 2:
            raise FormatError(f"{source}:{len(lines) + 1}: truncated, expected {size} tokens and '{MERGES_SENTINEL}'")
        tokens = lines[1 : size + 1]
        for i, tok in enumerate(tokens):
            if tok == "" or "\t" in tok:
                raise FormatError(f"{source}:{i + 2}: invalid token {tok!r}")
        if lines[size + 1] != MERGES_SENTINEL:
            raise FormatError(f"{source}:{size + 2}: expected '{MERGES_SENTINEL}'")
        merges = []
        for lineno, line in enumerate(lines[size + 2 :], start=size + 3):
            parts = line.split("\t")
            if len(parts) != 3 or not all(parts):
                raise FormatError(f"{source}:{lineno}: merge line needs left<TAB>right<TAB>result")
            if parts[0] + parts[1] != parts[2]:
                raise FormatError(f"{source}:{lineno}: merge result {parts[2]!r} is not {parts[0]!r}+{parts[1]!r}")
            merges.append((parts[0], parts[1], parts[2]))
        try:
            return cls(tokens, merges)
        except FormatError as exc:
            raise FormatError(f"{source}: {exc}") from exc


def replay_merges(alphabet: Sequence[str], merges: Sequence[tuple[str, str, str]]) -> list[str]:
    """Rebuild the ordered token list from the base alphabet and merge rules."""
    tokens = list(SPECIAL_TOKENS) + sorted(alphabet)
    seen = set(tokens[N_SPECIAL:])
    for left, right, result in merges:
        if left not in seen or right not in seen:
            raise FormatError(f"merge ({left!r}, {right!r}) uses a symbol not yet in the vocabulary")
        if result not in seen:
            seen.add(result)
            tokens.append(result)
    return tokens


def train_bpe(corpus: Sequence[str], target_vocab_size: int = DEFAULT_VOCAB_SIZE) -> Vocabulary:
    """Greedy most-frequent-pair BPE.

    Ties on pair frequency go to the lexicographically smallest ``(left, right)``.
    Training stops at ``target_vocab_size`` entries or when no pair occurs at
    least twice.
    """
    if not corpus or not any(t.split() for t in corpus):
        raise InputError("cannot train a vocabulary on an empty corpus")
    word_freq = Counter(w for text in corpus for w in text.split())
    alphabet = base_alphabet(word_freq)
    minimum = len(alphabet) + N_SPECIAL
    if target_vocab_size < minimum:
        raise InputError(
            f"vocab size {target_vocab_size} is below the minimum {minimum} "
            f"({len(alphabet)} alphabet symbols + {N_SPECIAL} specials)"
        )

    words = [word_symbols(w) for w in word_freq]
    freqs = list(word_freq.values())
    pair_counts: dict[tuple[str, str], int] = defaultdict(int)
    pair_words: dict[tuple[str, str], set[int]] = defaultdict(set)
    for wi, syms in enumerate(words):
        for pair in zip(syms, syms[1:]):
            pair_counts[pair] += freqs[wi]
            pair_words[pair].add(wi)
    heap = [(-c, p) for p, c in pair_counts.items()]
    heapq.heapify(heap)

    tokens = list(SPECIAL_TOKENS) + alphabet
    known = set(alphabet)
    merges: list[tuple[str, str, str]] = []
    while len(tokens) < target_vocab_size and heap:
        neg, pair = heapq.heappop(heap)
        if pair_counts.get(pair, 0) != -neg:
            continue  # stale heap entry
        if -neg < 2:
            break
        left, right = pair
        result = left + right
        merges.append((left, right, result))
        if result not in known:
            known.add(result)
            tokens.append(result)
        touched: set[tuple[str, str]] = set()
        for wi in sorted(pair_words.pop(pair, ())):
            syms, f = words[wi], freqs[wi]
            for p in zip(syms, syms[1:]):
                pair_counts[p] -= f
                touched.add(p)
            merged, i = [], 0
            while i < len(syms):
                if i < len(syms) - 1 and syms[i] == left and syms[i + 1] == right:
                    merged.append(result)
                    i += 2
                else:
                    merged.append(syms[i])
                    i += 1
            words[wi] = merged
            for p in zip(merged, merged[1:]):
                pair_counts[p] += f
                pair_words[p].add(wi)
                touched.add(p)
        for p in touched:
            c = pair_counts[p]
            if c <= 0:
                pair_counts.pop(p, None)
                pair_words.pop(p, None)
            else:
                heapq.heappush(heap, (-c, p))
    return Vocabulary(tokens, merges)


@dataclass
class TokenSequence:
    ids: list[int]
    attention_mask: list[int]
    language: str = ""

    def __len__(self) -> int:
        return len(self.ids)


def encode(vocab: Vocabulary, text: str, max_len: int = 50, language: str = "", pad: bool = True) -> TokenSequence:
    """Tokenise ``text`` as ``[BOS, ..., EOS]``, truncated and optionally right-padded to ``max_len``."""
    if max_len < 3:
        raise InputError(f"max_len must be at least 3, got {max_len}")
    body: list[int] = []
    budget = max_len - 2
    for word in text.split():
        body.extend(vocab.word_ids(word))
        if len(body) >= budget:
            break
    ids = [BOS, *body[:budget], EOS]
    mask = [1] * len(ids)
    if pad:
        ids += [PAD] * (max_len - len(ids))
        mask += [0] * (max_len - len(mask))
    return TokenSequence(ids, mask, language)


def decode(vocab: Vocabulary, ids: Iterable[int]) -> str:
    pieces = []
    for i in ids:
        i = int(i)
        if not 0 <= i < vocab.size:
            raise IndexError(f"token id {i} outside vocabulary of size {vocab.size}")
        if i == UNK:
            pieces.append(UNK_GLYPH)
        elif i >= N_SPECIAL:
            pieces.append(vocab.tokens[i])
    text = "".join(pieces).replace(EOW, " ")
    return text[:-1] if text.endswith(" ") else text


def collate(seqs: Sequence[TokenSequence]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad sequences to the batch maximum; returns ``(ids, mask)`` int arrays."""
    lengths = [sum(s.attention_mask) for s in seqs]
    width = max(lengths)
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=np.int64)
    for row, (s, n) in enumerate(zip(seqs, lengths)):
        ids[row, :n] = s.ids[:n]
        mask[row, :n] = 1
    return ids, mask
