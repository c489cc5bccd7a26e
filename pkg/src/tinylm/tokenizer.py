"""Byte-pair-encoding tokenizer with the standard GPT-2 vocabulary.

The vocab (50,257 entries) and the 50,000 ranked merge rules ship as package
assets. Byte-level fallback makes every UTF-8 string encodable; there is no
unknown-token id. The end-of-text marker ``<|endoftext|>`` (id 50,256) is the
only special token.
"""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources
from pathlib import Path

import regex

EOT_MARKER = "<|endoftext|>"
EXPECTED_VOCAB_SIZE = 50257

# GPT-2 word-split pattern: contractions, letter runs, digit runs, punctuation
# runs, then whitespace (trailing space glued to the following word).
_SPLIT_PATTERN = regex.compile(
    r"""'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+"""
)


@lru_cache(maxsize=1)
def _bytes_to_unicode() -> dict[int, str]:
    """The reversible byte <-> printable-unicode table GPT-2 vocab files use."""
    printable = (
        list(range(ord("!"), ord("~") + 1))
        + list(range(ord("\xa1"), ord("\xac") + 1))
        + list(range(ord("\xae"), ord("\xff") + 1))
    )
    chars = printable[:]
    n = 0
    for b in range(256):
        if b not in printable:
            printable.append(b)
            chars.append(256 + n)
            n += 1
    return dict(zip(printable, (chr(c) for c in chars)))


def default_asset_paths() -> tuple[Path, Path]:
    base = resources.files("tinylm") / "assets"
    return Path(str(base / "gpt2_vocab.json")), Path(str(base / "gpt2_merges.txt"))


class Tokenizer:
    """Immutable after construction; safe to share across workers."""

    def __init__(self, vocab: dict[str, int], merges: list[tuple[str, str]]):
        if len(vocab) != EXPECTED_VOCAB_SIZE:
            raise ValueError(
                f"vocab size mismatch: expected {EXPECTED_VOCAB_SIZE}, got {len(vocab)}"
            )
        if EOT_MARKER not in vocab:
            raise ValueError(f"vocab is missing the end-of-text entry {EOT_MARKER!r}")
        self.vocab = vocab
        self.decoder = {i: t for t, i in vocab.items()}
        if len(self.decoder) != len(vocab):
            raise ValueError("vocab contains duplicate token ids")
        self.merge_ranks = {pair: rank for rank, pair in enumerate(merges)}
        self.byte_encoder = _bytes_to_unicode()
        self.byte_decoder = {c: b for b, c in self.byte_encoder.items()}
        self.eot_id = vocab[EOT_MARKER]
        self._word_cache: dict[str, list[int]] = {}

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def _bpe(self, word: str) -> tuple[str, ...]:
        """Greedily apply merge rules by rank to one pre-split word."""
        parts = tuple(word)
        if len(parts) < 2:
            return parts
        while True:
            pairs = {(parts[i], parts[i + 1]) for i in range(len(parts) - 1)}
            best = min(pairs, key=lambda p: self.merge_ranks.get(p, float("inf")))
            if best not in self.merge_ranks:
                break
            first, second = best
            merged: list[str] = []
            i = 0
            while i < len(parts):
                if i < len(parts) - 1 and parts[i] == first and parts[i + 1] == second:
                    merged.append(first + second)
                    i += 2
                else:
                    merged.append(parts[i])
                    i += 1
            parts = tuple(merged)
            if len(parts) == 1:
                break
        return parts

    def _encode_word(self, word: str) -> list[int]:
        cached = self._word_cache.get(word)
        if cached is None:
            cached = [self.vocab[part] for part in self._bpe(word)]
            if len(self._word_cache) < 65536:
                self._word_cache[word] = cached
        return cached

    def encode(self, text: str) -> list[int]:
        """Encode UTF-8 text to token ids.

        The literal end-of-text marker maps to ``eot_id``; it is never emitted
        otherwise.
        """
        ids: list[int] = []
        for idx, chunk in enumerate(text.split(EOT_MARKER)):
            if idx:
                ids.append(self.eot_id)
            if not chunk:
                continue
            for match in _SPLIT_PATTERN.finditer(chunk):
                word = "".join(
                    self.byte_encoder[b] for b in match.group(0).encode("utf-8")
                )
                ids.extend(self._encode_word(word))
        return ids

    def decode(self, ids) -> str:
        size = self.vocab_size
        chars: list[str] = []
        for i in ids:
            i = int(i)
            if not 0 <= i < size:
                raise ValueError(f"token id {i} out of range [0, {size})")
            chars.append(self.decoder[i])
        data = bytes(self.byte_decoder[c] for c in "".join(chars))
        return data.decode("utf-8", errors="replace")


def load_tokenizer(
    vocab_asset: str | Path | None = None, merges_asset: str | Path | None = None
) -> Tokenizer:
    """Load vocab/merges assets; defaults to the bundled GPT-2 files."""
    default_vocab, default_merges = default_asset_paths()
    vocab_path = Path(vocab_asset) if vocab_asset is not None else default_vocab
    merges_path = Path(merges_asset) if merges_asset is not None else default_merges
    for path in (vocab_path, merges_path):
        if not path.is_file():
            raise FileNotFoundError(f"asset not found: {path}")
    try:
        with open(vocab_path, encoding="utf-8") as fh:
            vocab = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed vocab file {vocab_path}: {exc}") from exc
    if not isinstance(vocab, dict) or not all(
        isinstance(k, str) and isinstance(v, int) for k, v in vocab.items()
    ):
        raise ValueError(f"malformed vocab file {vocab_path}: expected string->int map")

    merges: list[tuple[str, str]] = []
    with open(merges_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#version"):
                continue
            parts = line.split(" ")
            if len(parts) != 2:
                raise ValueError(
                    f"malformed merges file {merges_path}: line {lineno}: {line!r}"
                )
            merges.append((parts[0], parts[1]))
    if not merges:
        raise ValueError(f"malformed merges file {merges_path}: no merge rules")
    return Tokenizer(vocab, merges)
