from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

# Characters observed in the public Kaggle text-captcha corpus (1040 images).
CAPTCHA_CHARACTERS = "2345678bcdefgmnpwxy"


class AlphabetError(ValueError):
    """A character or index is outside the alphabet."""


@dataclass(frozen=True)
class Alphabet:
    """Ordered character set; the CTC blank takes index ``len(characters)``."""

    characters: str
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        chars = "".join(self.characters)
        if not chars:
            raise AlphabetError("alphabet must contain at least one character")
        if len(set(chars)) != len(chars):
            dupes = sorted({c for c in chars if chars.count(c) > 1})
            raise AlphabetError(f"alphabet characters must be distinct, repeated: {dupes}")
        object.__setattr__(self, "characters", chars)
        object.__setattr__(self, "_index", {c: i for i, c in enumerate(chars)})

    @classmethod
    def from_text(cls, texts) -> "Alphabet":
        """Alphabet of every character in ``texts``, sorted by code point."""
        return cls("".join(sorted({c for t in texts for c in t})))

    @classmethod
    def default(cls) -> "Alphabet":
        return cls(CAPTCHA_CHARACTERS)

    @property
    def size(self) -> int:
        return len(self.characters)

    @property
    def blank(self) -> int:
        return len(self.characters)

    @property
    def num_classes(self) -> int:
        return len(self.characters) + 1

    def __len__(self) -> int:
        return len(self.characters)

    def __contains__(self, ch: str) -> bool:
        return ch in self._index

    def index(self, ch: str) -> int:
        try:
            return self._index[ch]
        except KeyError:
            raise AlphabetError(f"character {ch!r} is not in the alphabet {self.characters!r}") from None

    def char(self, i: int) -> str:
        if not 0 <= i < len(self.characters):
            raise AlphabetError(f"index {i} is outside [0, {len(self.characters)})")
        return self.characters[i]

    def encode(self, text: str) -> list[int]:
        out = []
        for pos, ch in enumerate(text):
            if ch not in self._index:
                raise AlphabetError(f"unknown character {ch!r} at position {pos} of {text!r}")
            out.append(self._index[ch])
        return out

    def decode(self, indices) -> str:
        return "".join(self.char(int(i)) for i in indices)

    def unknown_characters(self, text: str) -> list[str]:
        return sorted({c for c in text if c not in self._index})

    def digest(self) -> str:
        return hashlib.sha256(self.characters.encode("utf-8")).hexdigest()[:16]


def encode_label(text: str, alphabet: Alphabet) -> list[int]:
    return alphabet.encode(text)


def decode_label(indices, alphabet: Alphabet) -> str:
    return alphabet.decode(indices)
