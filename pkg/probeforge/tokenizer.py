"""Byte-level tokenizer: ids 0-255 are raw UTF-8 bytes, then three special ids."""

from typing import Iterable, List, Optional, Sequence

PAD_ID = 256
BOS_ID = 257
ANSWER_ID = 258
VOCAB_SIZE = 259


def encode(text: str, add_bos: bool = False) -> List[int]:
    """Encode text as UTF-8 byte ids, optionally prefixed with BOS."""
    ids = list(text.encode("utf-8"))
    if add_bos:
        ids.insert(0, BOS_ID)
    return ids


def decode(ids: Iterable[int]) -> str:
    """Decode ids back to text; special ids are dropped."""
    raw = bytes(i for i in ids if 0 <= i < 256)
    return raw.decode("utf-8", errors="replace")


def marker_ids(marker: Optional[str], reserved: bool = False) -> Optional[List[int]]:
    """Token ids of an answer marker; ``reserved`` selects the single ANSWER id instead of text."""
    if reserved:
        return [ANSWER_ID]
    return encode(marker) if marker else None


def count_tokens(text: str) -> int:
    """Number of tokens the workbench tokenizer produces for text."""
    return len(text.encode("utf-8"))


def find_subsequence(haystack: Sequence[int], needle: Sequence[int]) -> int:
    """Index of the first occurrence of needle in haystack, or -1."""
    n = len(needle)
    if n == 0:
        return -1
    for start in range(len(haystack) - n + 1):
        if list(haystack[start:start + n]) == list(needle):
            return start
    return -1
