"""Tokenization shared by metrics and the generators.

Lowercase, punctuation split off, placeholders kept atomic.
"""
import re

TOKENIZER_VERSION = "ws-punct-v1"

_TOKEN_RE = re.compile(r"\$[A-Za-z][\w\-]*|\w+(?:['\-]\w+)*|[^\w\s]")


def tokenize(text: str, lower: bool = True) -> list[str]:
    """
    >>> tokenize("Such as $cuisine_1, $cuisine_2, or else?")
    ['such', 'as', '$cuisine_1', ',', '$cuisine_2', ',', 'or', 'else', '?']
    """
    if lower:
        text = text.lower()
    return _TOKEN_RE.findall(text)


def detokenize(tokens) -> str:
    return " ".join(tokens)


def ngrams(tokens, n: int):
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]
