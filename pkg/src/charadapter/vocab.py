"""The fixed 64-word caption vocabulary.

The caption grammar only needs 26 words; the remaining slots are reserved
so the text embedding table has a stable size of exactly 64. Token id 0 is
the null word used when the text condition is dropped.
"""

from __future__ import annotations

from .errors import DataError

NULL_WORD = "<null>"

_GRAMMAR_WORDS = [
    NULL_WORD,
    # structural words of the caption template
    "a",
    "character",
    "background",
    "style",
    # textures
    "solid",
    "stripes",
    "dots",
    # body shapes
    "circle",
    "square",
    "triangle",
    "star",
    # pose words (0, 45, 90, 135 degrees)
    "upright",
    "tilted",
    "sideways",
    "leaning",
    # scale words (0.6, 0.8, 1.0)
    "small",
    "medium",
    "large",
    # background colors
    "red",
    "green",
    "blue",
    "white",
    "gray",
    # styles
    "flat",
    "outline",
]

VOCAB_SIZE = 64
VOCAB: tuple[str, ...] = tuple(
    _GRAMMAR_WORDS + [f"<reserved{i}>" for i in range(len(_GRAMMAR_WORDS), VOCAB_SIZE)]
)
_WORD_TO_ID = {word: i for i, word in enumerate(VOCAB)}

NULL_ID = _WORD_TO_ID[NULL_WORD]
GRAMMAR_WORDS = tuple(_GRAMMAR_WORDS[1:])  # the words a caption may contain


def token_id(word: str) -> int:
    try:
        return _WORD_TO_ID[word]
    except KeyError:
        raise DataError(
            f"word {word!r} is not in the caption vocabulary; known words: "
            + ", ".join(GRAMMAR_WORDS)
        ) from None


def word_for(token: int) -> str:
    if not 0 <= token < VOCAB_SIZE:
        raise DataError(f"token id {token} outside vocabulary of size {VOCAB_SIZE}")
    return VOCAB[token]


def tokenize_text(text: str) -> list[int]:
    """Map free caption text to token ids; punctuation is ignored."""
    words = text.lower().replace(",", " ").replace(".", " ").split()
    if not words:
        raise DataError("caption text is empty")
    return [token_id(w) for w in words]
