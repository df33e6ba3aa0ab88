"""Synthetic markup corpus: grammar, tokenizer, rasterizer, and disk format.

The grammar covers single-character atoms (a-z, 0-9, +, -, =) plus three
compound forms: ``\\frac{A}{B}``, ``X^{S}`` and ``X_{S}``, with brace
nesting at most two deep.  Documents are rendered to 32x128 binary images
with an embedded 5x7 font and stored as PGM files next to a JSONL index.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import font
from .numerics import stream

IMG_H = 32
IMG_W = 128

LETTERS = "abcdefghijklmnopqrstuvwxyz"
DIGITS = "0123456789"
OPERATORS = "+-="
ATOMS = LETTERS + DIGITS + OPERATORS

FRAC = "\\frac"
STRUCTURAL = (FRAC, "{", "}", "^", "_")

# Closed vocabulary, fixed order: atoms first, then structural tokens.
VOCAB: tuple[str, ...] = tuple(ATOMS) + STRUCTURAL

MIN_TOKENS = 3
MAX_TOKENS = 48

LEFT_MARGIN = 2
CENTER_ROW = 16
ADVANCE = font.GLYPH_W + 1
SCRIPT_SHIFT = 4
FRAC_HALF_SHIFT = 5


class ParseError(ValueError):
    """Raised on malformed markup; ``offset`` is the byte position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


def tokenize(text: str) -> list[str]:
    """Split markup into vocabulary tokens, validating braces and commands.

    tokenize("\\frac{a}{b}") == ["\\frac", "{", "a", "}", "{", "b", "}"]
    """
    tokens: list[str] = []
    depth_stack: list[int] = []
    i = 0
    n = len(text)
    while i < n:
        c = text[i]
        if c == "\\":
            m = re.match(r"\\[a-zA-Z]+", text[i:])
            if m is None or m.group(0) != FRAC:
                raise ParseError(f"unknown command at {text[i:i + 8]!r}", i)
            tokens.append(FRAC)
            i += len(FRAC)
        elif c == "{":
            depth_stack.append(i)
            if len(depth_stack) > 2:
                raise ParseError("nesting deeper than 2", i)
            tokens.append(c)
            i += 1
        elif c == "}":
            if not depth_stack:
                raise ParseError("unbalanced closing brace", i)
            depth_stack.pop()
            tokens.append(c)
            i += 1
        elif c in ("^", "_"):
            tokens.append(c)
            i += 1
        elif c in ATOMS:
            tokens.append(c)
            i += 1
        else:
            raise ParseError(f"unexpected character {c!r}", i)
    if depth_stack:
        raise ParseError("unclosed brace", n)
    return tokens


def detokenize(tokens: list[str] | tuple[str, ...]) -> str:
    return "".join(tokens)


@dataclass(frozen=True)
class MarkupDoc:
    """A markup string, its token sequence, and the seed it came from."""

    tokens: tuple[str, ...]
    source_text: str
    seed: int


# --- structural parse used by the renderer ---------------------------------


def _parse_items(tokens: list[str], i: int, stop_at_close: bool):
    """Parse a run of items; returns (items, next_index).

    Items are ("glyph", ch), ("frac", num_items, den_items) or
    ("script", base_ch, direction, items) with direction +1 for
    superscript and -1 for subscript.
    """
    items = []
    n = len(tokens)
    while i < n:
        tok = tokens[i]
        if tok == "}":
            if stop_at_close:
                return items, i
            raise ParseError("unbalanced closing brace", i)
        if tok == FRAC:
            num, i = _parse_group(tokens, i + 1)
            den, i = _parse_group(tokens, i)
            items.append(("frac", num, den))
        elif tok in ATOMS:
            if i + 1 < n and tokens[i + 1] in ("^", "_"):
                direction = 1 if tokens[i + 1] == "^" else -1
                sub, i = _parse_group(tokens, i + 2)
                items.append(("script", tok, direction, sub))
            else:
                items.append(("glyph", tok))
                i += 1
        else:
            raise ParseError(f"unexpected token {tok!r}", i)
    return items, i


def _parse_group(tokens: list[str], i: int):
    if i >= len(tokens) or tokens[i] != "{":
        raise ParseError("expected '{'", i)
    items, i = _parse_items(tokens, i + 1, stop_at_close=True)
    if i >= len(tokens) or tokens[i] != "}":
        raise ParseError("expected '}'", i)
    return items, i + 1


def _items_width(items) -> int:
    w = 0
    for item in items:
        if item[0] == "glyph":
            w += ADVANCE
        elif item[0] == "script":
            w += ADVANCE + _items_width(item[3])
        else:
            _, num, den = item
            bar = max(_items_width(num), _items_width(den)) - 1 + 2
            w += bar + 1
    return w


def _draw_glyph(img: np.ndarray, ch: str, x: int, cy: int) -> None:
    mask = font.glyph_mask(ch)
    top = cy - font.GLYPH_H // 2
    for r in range(font.GLYPH_H):
        rr = top + r
        if not 0 <= rr < IMG_H:
            continue
        for c in range(font.GLYPH_W):
            cc = x + c
            if 0 <= cc < IMG_W and mask[r, c]:
                img[rr, cc] = 1.0


def _emit(img: np.ndarray, items, x: int, cy: int) -> int:
    for item in items:
        if item[0] == "glyph":
            _draw_glyph(img, item[1], x, cy)
            x += ADVANCE
        elif item[0] == "script":
            _, base, direction, sub = item
            _draw_glyph(img, base, x, cy)
            x += ADVANCE
            x = _emit(img, sub, x, cy - direction * SCRIPT_SHIFT)
        else:
            _, num, den = item
            wn = _items_width(num) - 1
            wd = _items_width(den) - 1
            bar = max(wn, wd) + 2
            _emit(img, num, x + 1 + (bar - 2 - wn) // 2, cy - FRAC_HALF_SHIFT)
            for cc in range(x, x + bar):
                if 0 <= cc < IMG_W:
                    img[cy, cc] = 1.0
            _emit(img, den, x + 1 + (bar - 2 - wd) // 2, cy + FRAC_HALF_SHIFT)
            x += bar + 1
    return x


def render(doc: MarkupDoc | str) -> np.ndarray:
    """Rasterize markup to a (32, 128) float64 image with ink pixels at 1.0.

    Glyph boxes are 5x7 with a 1-px advance gap, centered on row 16.
    Scripts shift 4 px up or down; fractions stack around a 1-px bar.
    Content past column 127 is clipped.
    """
    if isinstance(doc, MarkupDoc):
        tokens = list(doc.tokens)
    else:
        tokens = tokenize(doc)
    items, _ = _parse_items(tokens, 0, stop_at_close=False)
    img = np.zeros((IMG_H, IMG_W))
    _emit(img, items, LEFT_MARGIN, CENTER_ROW)
    return img


# --- generation -------------------------------------------------------------


def _draw_atoms(gen: np.random.Generator, lo: int, hi: int) -> list[str]:
    k = int(gen.integers(lo, hi + 1))
    return [ATOMS[int(gen.integers(0, len(ATOMS)))] for _ in range(k)]


def _draw_doc_tokens(gen: np.random.Generator) -> list[str]:
    u = gen.random()
    if u < 0.4:
        return _draw_atoms(gen, 3, 15)
    if u < 0.7:
        head = _draw_atoms(gen, 0, 3)
        num = _draw_atoms(gen, 1, 3)
        den = _draw_atoms(gen, 1, 3)
        tail = _draw_atoms(gen, 0, 3)
        return head + [FRAC, "{"] + num + ["}", "{"] + den + ["}"] + tail
    head = _draw_atoms(gen, 0, 3)
    base = ATOMS[int(gen.integers(0, len(ATOMS)))]
    mark = "^" if gen.random() < 0.5 else "_"
    sub = _draw_atoms(gen, 1, 2)
    tail = _draw_atoms(gen, 0, 3)
    return head + [base, mark, "{"] + sub + ["}"] + tail


def generate(seed: int, count: int) -> list[MarkupDoc]:
    """Generate ``count`` unique documents, 40% flat / 30% fraction / 30% script.

    Each document draws from its own keyed stream, retrying inside that
    stream if its text collides with an earlier document.
    """
    docs: list[MarkupDoc] = []
    seen: set[str] = set()
    for i in range(count):
        gen = stream(seed, "corpus", i)
        for _ in range(64):
            tokens = _draw_doc_tokens(gen)
            text = detokenize(tokens)
            if text not in seen:
                break
        else:
            raise RuntimeError(f"could not draw a unique document at index {i}")
        assert MIN_TOKENS <= len(tokens) <= MAX_TOKENS
        assert tokenize(text) == tokens
        seen.add(text)
        docs.append(MarkupDoc(tokens=tuple(tokens), source_text=text, seed=seed))
    return docs


# --- disk format ------------------------------------------------------------


def write_pgm(path: str | Path, img: np.ndarray) -> None:
    """Write a [0, 1] float image as binary PGM (P5, maxval 255)."""
    h, w = img.shape
    data = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a binary PGM into a [0, 1] float64 array."""
    blob = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", blob)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(m.group(k)) for k in (1, 2, 3))
    data = np.frombuffer(blob[m.end():m.end() + w * h], dtype=np.uint8)
    if data.size != w * h:
        raise ValueError(f"{path}: truncated PGM payload")
    return data.reshape(h, w).astype(np.float64) / float(maxval)


def write_corpus(out_dir: str | Path, docs: list[MarkupDoc]) -> None:
    """Write corpus.jsonl plus one PGM per document under images/."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    with open(out / "corpus.jsonl", "w", encoding="utf-8") as f:
        for doc in docs:
            f.write(json.dumps({"seed": doc.seed, "source_text": doc.source_text}) + "\n")
    for i, doc in enumerate(docs):
        img = render(doc)
        assert img.sum() >= 1.0, f"document {i} rendered blank"
        write_pgm(out / "images" / f"{i:06d}.pgm", img)


def read_corpus(corpus_dir: str | Path) -> tuple[list[MarkupDoc], np.ndarray]:
    """Load documents and their images; images come back as (B, 32, 128)."""
    root = Path(corpus_dir)
    docs = []
    with open(root / "corpus.jsonl", encoding="utf-8") as f:
        for line in f:
            rec = json.loads(line)
            text = rec["source_text"]
            docs.append(MarkupDoc(tokens=tuple(tokenize(text)), source_text=text,
                                  seed=int(rec["seed"])))
    images = np.stack([read_pgm(root / "images" / f"{i:06d}.pgm")
                       for i in range(len(docs))])
    return docs, images
