"""Byte-level BPE tokenizer with the four reserved control tokens.

The base alphabet is the 256 byte values, rendered through a printable
byte<->unicode bijection so merge tables serialize as plain text.  Words
carry their leading whitespace (the space byte's printable glyph acts as the
word marker), which makes decode(encode(x)) == x for arbitrary text without
any OOV handling.  Merges are greedy most-frequent-pair with a lexicographic
tie-break, so training is fully deterministic.
"""

from __future__ import annotations

import hashlib
import re
from collections import Counter
from dataclasses import dataclass, field

# BOS/SEP/EOS/PAD internal symbols live in the private-use area so they can
# never collide with a merged byte string.
_SPECIAL_NAMES = ("BOS", "SEP", "EOS", "PAD")
_SPECIAL_SYMBOLS = tuple(chr(0xE000 + i) for i in range(4))

_CHUNK_RE = re.compile(r"\s*\S+|\s+$")


def _byte_unicode_maps():
    bs = (
        list(range(ord("!"), ord("~") + 1))
        + list(range(ord("\xa1"), ord("\xac") + 1))
        + list(range(ord("\xae"), ord("\xff") + 1))
    )
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    enc = {b: chr(c) for b, c in zip(bs, cs)}
    dec = {chr(c): b for b, c in zip(bs, cs)}
    return enc, dec


_BYTE_TO_CHAR, _CHAR_TO_BYTE = _byte_unicode_maps()


@dataclass
class Vocab:
    """Merge table plus token<->id maps and the four reserved ids."""

    merges: list[tuple[str, str]]
    token_to_id: dict[str, int]
    id_to_token: dict[int, str]
    bos_id: int
    sep_id: int
    eos_id: int
    pad_id: int
    merge_ranks: dict[tuple[str, str], int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.merge_ranks:
            self.merge_ranks = {pair: i for i, pair in enumerate(self.merges)}

    @property
    def size(self) -> int:
        return len(self.token_to_id)

    @property
    def special_ids(self) -> tuple[int, int, int, int]:
        return (self.bos_id, self.sep_id, self.eos_id, self.pad_id)


def _chunks(text: str) -> list[str]:
    return _CHUNK_RE.findall(text)


def _to_symbols(chunk: str) -> tuple[str, ...]:
    return tuple(_BYTE_TO_CHAR[b] for b in chunk.encode("utf-8"))


def _base_vocab() -> dict[str, int]:
    return {_BYTE_TO_CHAR[b]: b for b in range(256)}


def train_bpe(corpus: list[str], target_vocab: int, seed: int = 0) -> Vocab:
    """Learn a merge table by greedy most-frequent adjacent-pair merging.

    Ties on pair count break to the lexicographically smallest pair, so the
    result depends only on the corpus; `seed` is accepted for interface
    symmetry and does not influence training.
    """
    if not corpus or all(not line for line in corpus):
        raise ValueError("train_bpe: empty corpus")
    min_vocab = 256 + len(_SPECIAL_NAMES)
    if target_vocab < min_vocab:
        raise ValueError(f"target_vocab {target_vocab} below alphabet+specials ({min_vocab})")

    words = Counter()
    for line in corpus:
        for chunk in _chunks(line):
            words[_to_symbols(chunk)] += 1

    merges: list[tuple[str, str]] = []
    n_merges = target_vocab - min_vocab
    for _ in range(n_merges):
        pair_counts = Counter()
        for word, freq in words.items():
            for pair in zip(word, word[1:]):
                pair_counts[pair] += freq
        if not pair_counts:
            break
        best_count = max(pair_counts.values())
        best = min(p for p, c in pair_counts.items() if c == best_count)
        merges.append(best)
        merged_sym = best[0] + best[1]
        new_words = Counter()
        for word, freq in words.items():
            new_words[_merge_word(word, best, merged_sym)] += freq
        words = new_words

    token_to_id = _base_vocab()
    for a, b in merges:
        token_to_id[a + b] = len(token_to_id)
    special_ids = []
    for sym in _SPECIAL_SYMBOLS:
        token_to_id[sym] = len(token_to_id)
        special_ids.append(token_to_id[sym])
    id_to_token = {i: t for t, i in token_to_id.items()}
    return Vocab(merges, token_to_id, id_to_token, *special_ids)


def _merge_word(word: tuple[str, ...], pair: tuple[str, str], merged: str) -> tuple[str, ...]:
    out = []
    i = 0
    while i < len(word):
        if i + 1 < len(word) and word[i] == pair[0] and word[i + 1] == pair[1]:
            out.append(merged)
            i += 2
        else:
            out.append(word[i])
            i += 1
    return tuple(out)


def encode(v: Vocab, text: str) -> list[int]:
    """Tokenize text to ids; never emits any of the four reserved ids."""
    ids: list[int] = []
    for chunk in _chunks(text):
        syms = list(_to_symbols(chunk))
        while len(syms) >= 2:
            pairs = set(zip(syms, syms[1:]))
            best = min(pairs, key=lambda p: v.merge_ranks.get(p, float("inf")))
            if best not in v.merge_ranks:
                break
            syms = list(_merge_word(tuple(syms), best, best[0] + best[1]))
        ids.extend(v.token_to_id[s] for s in syms)
    return ids


def decode(v: Vocab, ids) -> str:
    """Concatenate token strings; reserved ids are dropped from the output."""
    specials = set(v.special_ids)
    byte_vals = []
    for i in ids:
        if i in specials:
            continue
        if i not in v.id_to_token:
            raise IndexError(f"decode: unknown token id {i}")
        byte_vals.extend(_CHAR_TO_BYTE[ch] for ch in v.id_to_token[i])
    return bytes(byte_vals).decode("utf-8", errors="replace")


# ---------------------------------------------------------------------------
# serialization: merges one per line in rank order, then the special table

def serialize(v: Vocab) -> str:
    lines = [f"{a} {b}" for a, b in v.merges]
    for name, tid in zip(_SPECIAL_NAMES, v.special_ids):
        lines.append(f"{name} {tid}")
    return "\n".join(lines) + "\n"


def save_vocab(v: Vocab, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(serialize(v))


def load_vocab(path) -> Vocab:
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    if len(lines) < 4:
        raise ValueError(f"vocab file {path}: missing special-token table")
    merge_lines, special_lines = lines[:-4], lines[-4:]
    merges = []
    for ln in merge_lines:
        a, b = ln.split(" ")
        merges.append((a, b))
    special_ids = []
    for expect, ln in zip(_SPECIAL_NAMES, special_lines):
        name, tid = ln.split(" ")
        if name != expect:
            raise ValueError(f"vocab file {path}: bad special table entry {ln!r}")
        special_ids.append(int(tid))
    token_to_id = _base_vocab()
    for a, b in merges:
        token_to_id[a + b] = len(token_to_id)
    for sym, tid in zip(_SPECIAL_SYMBOLS, special_ids):
        if tid != len(token_to_id):
            raise ValueError(f"vocab file {path}: non-dense special id {tid}")
        token_to_id[sym] = tid
    id_to_token = {i: t for t, i in token_to_id.items()}
    return Vocab(merges, token_to_id, id_to_token, *special_ids)


def vocab_hash(v: Vocab) -> str:
    return hashlib.sha256(serialize(v).encode("utf-8")).hexdigest()[:16]
