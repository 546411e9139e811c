"""Character-level vocabulary with reserved PAD/EOS/UNK ids."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable

PAD, EOS, UNK = 0, 1, 2
RESERVED = ("<pad>", "<eos>", "<unk>")


class Vocab:
    def __init__(self, symbols: Iterable[str]):
        self.symbols: list[str] = list(RESERVED) + list(symbols)
        self.index = {s: i for i, s in enumerate(self.symbols)}
        if len(self.index) != len(self.symbols):
            raise ValueError("duplicate symbols in vocabulary")

    def __len__(self) -> int:
        return len(self.symbols)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.symbols == other.symbols

    def encode(self, text: str) -> list[int]:
        """Lower-cased characters to ids, EOS-terminated; unseen characters map to UNK."""
        return [self.index.get(ch, UNK) for ch in text.lower()] + [EOS]

    def decode(self, ids: Iterable[int]) -> str:
        out = []
        for i in ids:
            if i == EOS:
                break
            if i == PAD:
                continue
            out.append(self.symbols[i] if i != UNK else "�")
        return "".join(out)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.symbols) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if tuple(lines[:3]) != RESERVED:
            raise ValueError(f"{path}: vocabulary must start with {', '.join(RESERVED)}")
        return cls(lines[3:])


def build_vocab(corpus: Iterable[str]) -> Vocab:
    lines = list(corpus)
    if not lines or not any(line for line in lines):
        raise ValueError("cannot build a vocabulary from an empty corpus")
    chars = {ch for line in lines for ch in line.lower() if ch not in "\r\n"}
    return Vocab(sorted(chars))
