"""Rule-based captions from box annotations, and a hashing text encoder.

A caption lists, for every (category, image region) group, how many objects
of that category sit there::

    an infrared image with two persons in the top left, one car in the middle center.

Counts above ten collapse to "a large number of".
"""

from __future__ import annotations

import hashlib
import re
from collections import Counter
from dataclasses import dataclass
from typing import List, Protocol, Sequence

import numpy as np

from .boxes import BBox

NUMBER_WORDS = ("one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten")
LARGE_COUNT = "a large number of"
ROWS = ("top", "middle", "bottom")
COLS = ("left", "center", "right")
PREFIX = "an infrared image with "
EMPTY_CAPTION = "an infrared image with no objects."


@dataclass(frozen=True)
class CaptionRecord:
    text: str
    tokens: List[str]
    embedding: np.ndarray


def _third(coord: float, extent: float) -> int:
    # a centre exactly on a grid line belongs to the lower bucket
    if 3 * coord <= extent:
        return 0
    if 3 * coord <= 2 * extent:
        return 1
    return 2


def region_index(box: BBox, image_w: int, image_h: int) -> int:
    """Row-major index (0..8) of the 3x3 image cell holding the box centre."""
    cx, cy = box.center
    if not (0 <= cx <= image_w and 0 <= cy <= image_h):
        raise ValueError(f"box centre ({cx}, {cy}) lies outside the {image_w}x{image_h} image")
    return 3 * _third(cy, image_h) + _third(cx, image_w)


def spatial_bucket(box: BBox, image_w: int, image_h: int) -> str:
    idx = region_index(box, image_w, image_h)
    return f"{ROWS[idx // 3]} {COLS[idx % 3]}"


def count_phrase(n: int) -> str:
    if n < 1:
        raise ValueError(f"count must be at least 1, got {n}")
    if n > 10:
        return LARGE_COUNT
    return NUMBER_WORDS[n - 1]


def generate_caption(annotations: Sequence[BBox], image_w: int, image_h: int, categories: Sequence[str]) -> str:
    if not annotations:
        return EMPTY_CAPTION
    groups = Counter()
    for box in annotations:
        if not 0 <= box.category_id < len(categories):
            raise ValueError(f"category id {box.category_id} is not in the {len(categories)}-entry category table")
        groups[(box.category_id, region_index(box, image_w, image_h))] += 1
    clauses = []
    for (cat, region), n in sorted(groups.items()):
        noun = categories[cat] + ("s" if n > 1 else "")
        clauses.append(f"{count_phrase(n)} {noun} in the {ROWS[region // 3]} {COLS[region % 3]}")
    return PREFIX + ", ".join(clauses) + "."


_TOKEN = re.compile(r"[^\W_]+")


def tokenize(text: str) -> List[str]:
    return _TOKEN.findall(text.lower())


def caption_vocabulary(categories: Sequence[str]) -> List[str]:
    """Every word the caption template can emit for ``categories``."""
    words = set(tokenize(PREFIX + EMPTY_CAPTION + " in the " + LARGE_COUNT))
    words.update(NUMBER_WORDS, ROWS, COLS)
    for name in categories:
        words.update(tokenize(name))
        words.update(tokenize(name + "s"))
    return sorted(words)


class TextEncoder(Protocol):
    dim: int

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        ...


class HashEncoder:
    """Signed feature hashing of a bag of words, L2-normalised.

    Bucket and sign come from disjoint bytes of a keyed BLAKE2b digest, so the
    mapping is identical across processes and platforms (unlike ``hash()``).
    """

    def __init__(self, dim: int, seed: int = 42):
        if dim < 8:
            raise ValueError(f"text embedding width must be at least 8, got {dim}")
        self.dim = dim
        self.seed = seed
        self._key = f"lgfd-{seed}".encode()

    def slot(self, token: str):
        digest = hashlib.blake2b(token.encode("utf-8"), key=self._key, digest_size=16).digest()
        bucket = int.from_bytes(digest[:8], "little") % self.dim
        sign = 1.0 if digest[8] & 1 else -1.0
        return bucket, sign

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        vec = np.zeros(self.dim)
        for tok in tokens:
            bucket, sign = self.slot(tok)
            vec[bucket] += sign
        norm = np.sqrt(vec @ vec)
        if norm == 0.0:
            vec[:] = 0.0
            vec[0] = 1.0
            return vec
        return vec / norm


def hash_encode(tokens: Sequence[str], dim: int, seed: int = 42) -> np.ndarray:
    return HashEncoder(dim, seed).encode(tokens)


def caption_record(
    annotations: Sequence[BBox], image_w: int, image_h: int, categories: Sequence[str], encoder: TextEncoder
) -> CaptionRecord:
    text = generate_caption(annotations, image_w, image_h, categories)
    tokens = tokenize(text)
    return CaptionRecord(text=text, tokens=tokens, embedding=encoder.encode(tokens))
