"""Closed token vocabulary shared by the data generator and the toy language model."""

from __future__ import annotations

from typing import Iterable, Sequence

PREDICATES = ("left-of", "right-of", "above", "below", "inside", "larger-than")
NONE_ANSWER = "none"
SG_TOKEN = "<sg>"
TEXT_TOKEN = "<text>"
PAD_TOKEN = "<pad>"

CATEGORY_NAMES = (
    "cat", "dog", "ball", "cup", "tree", "car", "bird", "box",
    "lamp", "book", "shoe", "kite", "fish", "vase", "sign", "bell",
)
TEMPLATE_WORDS = ("describe", "the", "scene", "what", "is", "to", "how", "many", "?", ".")
NUMERALS = tuple(str(i) for i in range(10))
MAX_ORDINAL = 6


def category_name(k: int) -> str:
    return CATEGORY_NAMES[k] if k < len(CATEGORY_NAMES) else f"obj{k}"


class Vocabulary:
    """Token <-> id mapping. The two sentinel tokens always take the last two ids."""

    def __init__(self, category_count: int = 8):
        if category_count < 1:
            raise ValueError("category_count must be positive")
        self.category_count = category_count
        tokens = [PAD_TOKEN, *TEMPLATE_WORDS]
        tokens += [category_name(k) for k in range(category_count)]
        tokens += [*PREDICATES, NONE_ANSWER]
        tokens += NUMERALS
        tokens += [f"#{i}" for i in range(1, MAX_ORDINAL + 1)]
        tokens += [SG_TOKEN, TEXT_TOKEN]
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens: tuple[str, ...] = tuple(tokens)
        self._ids = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise KeyError(f"unknown token {token!r}") from None

    def encode(self, tokens: Iterable[str]) -> tuple[int, ...]:
        return tuple(self.id(t) for t in tokens)

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[int(i)] for i in ids]

    def category_id(self, k: int) -> int:
        return self.id(category_name(k))

    @property
    def sg_id(self) -> int:
        return self._ids[SG_TOKEN]

    @property
    def text_id(self) -> int:
        return self._ids[TEXT_TOKEN]

    @property
    def relation_answer_ids(self) -> tuple[int, ...]:
        return self.encode([*PREDICATES, NONE_ANSWER])

    @property
    def numeral_ids(self) -> tuple[int, ...]:
        return self.encode(NUMERALS)

    @property
    def n_regular(self) -> int:
        """Number of ids before the sentinel rows."""
        return len(self.tokens) - 2
