"""Embedded 5x7 bitmap font for the rendered glyph set.

Each glyph is 5 columns by 7 rows, given as strings with '#' for ink.
The shapes follow the classic public-domain 5x7 dot-matrix patterns.
"""

from __future__ import annotations

import numpy as np

GLYPH_W = 5
GLYPH_H = 7

_RAW = {
    "0": (
        ".###.",
        "#...#",
        "#..##",
        "#.#.#",
        "##..#",
        "#...#",
        ".###.",
    ),
    "1": (
        "..#..",
        ".##..",
        "..#..",
        "..#..",
        "..#..",
        "..#..",
        ".###.",
    ),
    "2": (
        ".###.",
        "#...#",
        "....#",
        "...#.",
        "..#..",
        ".#...",
        "#####",
    ),
    "3": (
        "#####",
        "...#.",
        "..#..",
        "...#.",
        "....#",
        "#...#",
        ".###.",
    ),
    "4": (
        "...#.",
        "..##.",
        ".#.#.",
        "#..#.",
        "#####",
        "...#.",
        "...#.",
    ),
    "5": (
        "#####",
        "#....",
        "####.",
        "....#",
        "....#",
        "#...#",
        ".###.",
    ),
    "6": (
        "..##.",
        ".#...",
        "#....",
        "####.",
        "#...#",
        "#...#",
        ".###.",
    ),
    "7": (
        "#####",
        "....#",
        "...#.",
        "..#..",
        ".#...",
        ".#...",
        ".#...",
    ),
    "8": (
        ".###.",
        "#...#",
        "#...#",
        ".###.",
        "#...#",
        "#...#",
        ".###.",
    ),
    "9": (
        ".###.",
        "#...#",
        "#...#",
        ".####",
        "....#",
        "...#.",
        ".##..",
    ),
    "a": (
        ".....",
        ".....",
        ".###.",
        "....#",
        ".####",
        "#...#",
        ".####",
    ),
    "b": (
        "#....",
        "#....",
        "#.##.",
        "##..#",
        "#...#",
        "#...#",
        "####.",
    ),
    "c": (
        ".....",
        ".....",
        ".###.",
        "#....",
        "#....",
        "#...#",
        ".###.",
    ),
    "d": (
        "....#",
        "....#",
        ".##.#",
        "#..##",
        "#...#",
        "#...#",
        ".####",
    ),
    "e": (
        ".....",
        ".....",
        ".###.",
        "#...#",
        "#####",
        "#....",
        ".###.",
    ),
    "f": (
        "..##.",
        ".#..#",
        ".#...",
        "###..",
        ".#...",
        ".#...",
        ".#...",
    ),
    "g": (
        ".....",
        ".####",
        "#...#",
        "#...#",
        ".####",
        "....#",
        ".###.",
    ),
    "h": (
        "#....",
        "#....",
        "#.##.",
        "##..#",
        "#...#",
        "#...#",
        "#...#",
    ),
    "i": (
        "..#..",
        ".....",
        ".##..",
        "..#..",
        "..#..",
        "..#..",
        ".###.",
    ),
    "j": (
        "...#.",
        ".....",
        "..##.",
        "...#.",
        "...#.",
        "#..#.",
        ".##..",
    ),
    "k": (
        "#....",
        "#....",
        "#..#.",
        "#.#..",
        "##...",
        "#.#..",
        "#..#.",
    ),
    "l": (
        ".##..",
        "..#..",
        "..#..",
        "..#..",
        "..#..",
        "..#..",
        ".###.",
    ),
    "m": (
        ".....",
        ".....",
        "##.#.",
        "#.#.#",
        "#.#.#",
        "#.#.#",
        "#.#.#",
    ),
    "n": (
        ".....",
        ".....",
        "#.##.",
        "##..#",
        "#...#",
        "#...#",
        "#...#",
    ),
    "o": (
        ".....",
        ".....",
        ".###.",
        "#...#",
        "#...#",
        "#...#",
        ".###.",
    ),
    "p": (
        ".....",
        "####.",
        "#...#",
        "#...#",
        "####.",
        "#....",
        "#....",
    ),
    "q": (
        ".....",
        ".####",
        "#...#",
        "#...#",
        ".####",
        "....#",
        "....#",
    ),
    "r": (
        ".....",
        ".....",
        "#.##.",
        "##..#",
        "#....",
        "#....",
        "#....",
    ),
    "s": (
        ".....",
        ".....",
        ".####",
        "#....",
        ".###.",
        "....#",
        "####.",
    ),
    "t": (
        ".#...",
        ".#...",
        "###..",
        ".#...",
        ".#...",
        ".#..#",
        "..##.",
    ),
    "u": (
        ".....",
        ".....",
        "#...#",
        "#...#",
        "#...#",
        "#..##",
        ".##.#",
    ),
    "v": (
        ".....",
        ".....",
        "#...#",
        "#...#",
        "#...#",
        ".#.#.",
        "..#..",
    ),
    "w": (
        ".....",
        ".....",
        "#...#",
        "#.#.#",
        "#.#.#",
        "#.#.#",
        ".#.#.",
    ),
    "x": (
        ".....",
        ".....",
        "#...#",
        ".#.#.",
        "..#..",
        ".#.#.",
        "#...#",
    ),
    "y": (
        ".....",
        "#...#",
        "#...#",
        "#...#",
        ".####",
        "....#",
        ".###.",
    ),
    "z": (
        ".....",
        ".....",
        "#####",
        "...#.",
        "..#..",
        ".#...",
        "#####",
    ),
    "+": (
        ".....",
        "..#..",
        "..#..",
        "#####",
        "..#..",
        "..#..",
        ".....",
    ),
    "-": (
        ".....",
        ".....",
        ".....",
        "#####",
        ".....",
        ".....",
        ".....",
    ),
    "=": (
        ".....",
        ".....",
        "#####",
        ".....",
        "#####",
        ".....",
        ".....",
    ),
}


def glyph_mask(ch: str) -> np.ndarray:
    """Return the (7, 5) float64 ink mask for a drawable character."""
    rows = _RAW[ch]
    return np.array([[1.0 if c == "#" else 0.0 for c in row] for row in rows])


DRAWABLE = frozenset(_RAW)
