"""Text to padded phoneme-id sequences via lexicon lookup."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

PAD, UNK, SIL = "<pad>", "<unk>", "SIL"
PAD_ID, UNK_ID, SIL_ID = 0, 1, 2

_VOWELS = ("AA", "AE", "AH", "AO", "AW", "AY", "EH", "ER", "EY", "IH", "IY", "OW", "OY", "UH", "UW")
_CONSONANTS = ("B", "CH", "D", "DH", "F", "G", "HH", "JH", "K", "L", "M", "N", "NG", "P", "R",
               "S", "SH", "T", "TH", "V", "W", "Y", "Z", "ZH")

# Spelling pronunciations used for out-of-lexicon words.
LETTER_NAMES = {
    "A": "EY1", "B": "B IY1", "C": "S IY1", "D": "D IY1", "E": "IY1", "F": "EH1 F",
    "G": "JH IY1", "H": "EY1 CH", "I": "AY1", "J": "JH EY1", "K": "K EY1", "L": "EH1 L",
    "M": "EH1 M", "N": "EH1 N", "O": "OW1", "P": "P IY1", "Q": "K Y UW1", "R": "AA1 R",
    "S": "EH1 S", "T": "T IY1", "U": "Y UW1", "V": "V IY1", "W": "D AH1 B AH0 L Y UW0",
    "X": "EH1 K S", "Y": "W AY1", "Z": "Z IY1",
}

_TOKEN = re.compile(r"[a-z]+(?:'[a-z]+)*|[^a-z\s']+")
_VARIANT = re.compile(r"\(\d+\)$")


class PhonemeInventory:
    """Bijective symbol/id map with reserved ids 0=PAD, 1=UNK, 2=SIL."""

    def __init__(self, symbols: Sequence[str] | None = None):
        if symbols is None:
            symbols = [v + s for v in _VOWELS for s in "012"] + list(_CONSONANTS)
        self.symbols: list[str] = [PAD, UNK, SIL] + [s for s in symbols if s not in (PAD, UNK, SIL)]
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("duplicate phoneme symbols")
        self._ids = {s: i for i, s in enumerate(self.symbols)}

    def __len__(self) -> int:
        return len(self.symbols)

    def __contains__(self, symbol: str) -> bool:
        return symbol in self._ids

    def encode(self, symbols: Iterable[str]) -> list[int]:
        return [self._ids.get(s, UNK_ID) for s in symbols]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.symbols[int(i)] for i in ids if int(i) != PAD_ID]


DEFAULT_INVENTORY = PhonemeInventory()


@dataclass
class PhonemeSequence:
    ids: list[int]
    mask: list[int] = field(default_factory=list)
    text: str = ""

    def __post_init__(self):
        if not self.mask:
            self.mask = [int(i != PAD_ID) for i in self.ids]

    def __len__(self) -> int:
        return len(self.ids)

    def symbols(self, inventory: PhonemeInventory = DEFAULT_INVENTORY) -> list[str]:
        return inventory.decode(self.ids)


def parse_lexicon(lines: Iterable[str]) -> dict[str, list[str]]:
    lexicon: dict[str, list[str]] = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        word, *phones = line.split()
        if not phones:
            raise ValueError(f"lexicon line {lineno}: no phonemes for {word!r}")
        word = _VARIANT.sub("", word)  # CMU-style "WORD(1)" alternates keep the first entry
        lexicon.setdefault(word.upper(), phones)
    return lexicon


def load_lexicon(path: str | Path | None = None) -> dict[str, list[str]]:
    """Read a ``WORD PH1 PH2 ...`` lexicon; ``None`` gives the bundled one."""
    if path is None:
        return dict(_bundled_lexicon())
    with open(path, encoding="utf-8") as fh:
        return parse_lexicon(fh)


@lru_cache(maxsize=1)
def _bundled_lexicon() -> dict[str, list[str]]:
    text = resources.files("avtts").joinpath("data/lexicon.txt").read_text(encoding="utf-8")
    return parse_lexicon(text.splitlines())


def normalize(text: str) -> list[str]:
    """Lowercase and split into words; every punctuation run becomes ``SIL``."""
    out: list[str] = []
    for tok in _TOKEN.findall(text.lower()):
        if tok[0].isalpha():
            out.append(tok)
        elif out and out[-1] != SIL:
            out.append(SIL)
    while out and out[-1] == SIL:
        out.pop()
    return out


def word_phonemes(word: str, lexicon: Mapping[str, list[str]]) -> list[str]:
    entry = lexicon.get(word.upper())
    if entry is not None:
        return list(entry)
    phones: list[str] = []
    for ch in word.upper():
        if ch in LETTER_NAMES:
            phones.extend(LETTER_NAMES[ch].split())
    return phones


def g2p(text: str, lexicon: Mapping[str, list[str]] | None = None,
        inventory: PhonemeInventory = DEFAULT_INVENTORY) -> PhonemeSequence:
    """Convert text to phoneme ids with one ``SIL`` between words."""
    lexicon = _bundled_lexicon() if lexicon is None else lexicon
    words = normalize(text)
    if not any(w != SIL for w in words):
        raise ValueError(f"no speakable content in {text!r}")
    symbols: list[str] = []
    for w in words:
        if symbols and symbols[-1] != SIL:
            symbols.append(SIL)
        if w != SIL:
            symbols.extend(word_phonemes(w, lexicon))
    ids = inventory.encode(symbols)
    return PhonemeSequence(ids=ids, mask=[1] * len(ids), text=text)


def pad_batch(sequences: Sequence[PhonemeSequence | Sequence[int]], max_len: int | None = None
              ) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad id sequences to a common length; returns ``(ids, mask)``."""
    if not sequences:
        raise ValueError("pad_batch needs at least one sequence")
    rows = [list(s.ids) if isinstance(s, PhonemeSequence) else list(s) for s in sequences]
    longest = max(len(r) for r in rows)
    width = longest if max_len is None else max_len
    if width < longest:
        raise ValueError(f"max_len {max_len} shorter than longest sequence ({longest})")
    ids = np.zeros((len(rows), width), dtype=np.int64)
    mask = np.zeros((len(rows), width), dtype=np.float32)
    for i, r in enumerate(rows):
        ids[i, :len(r)] = r
        mask[i, :len(r)] = 1.0
    return ids, mask
