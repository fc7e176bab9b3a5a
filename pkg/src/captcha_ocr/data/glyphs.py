"""Built-in 5×7 bitmap glyphs for the captcha character set."""
from __future__ import annotations

import numpy as np

_RAW = {
    "2": """
.###.
#...#
....#
...#.
..#..
.#...
#####""",
    "3": """
####.
....#
....#
.###.
....#
....#
####.""",
    "4": """
...#.
..##.
.#.#.
#..#.
#####
...#.
...#.""",
    "5": """
#####
#....
####.
....#
....#
#...#
.###.""",
    "6": """
..##.
.#...
#....
####.
#...#
#...#
.###.""",
    "7": """
#####
....#
...#.
..#..
.#...
.#...
.#...""",
    "8": """
.###.
#...#
#...#
.###.
#...#
#...#
.###.""",
    "b": """
#....
#....
#.##.
##..#
#...#
#...#
####.""",
    "c": """
.....
.....
.###.
#....
#....
#...#
.###.""",
    "d": """
....#
....#
.##.#
#..##
#...#
#...#
.####""",
    "e": """
.....
.....
.###.
#...#
#####
#....
.###.""",
    "f": """
..##.
.#..#
.#...
###..
.#...
.#...
.#...""",
    "g": """
.####
#...#
#...#
.####
....#
#...#
.###.""",
    "m": """
.....
.....
##.#.
#.#.#
#.#.#
#...#
#...#""",
    "n": """
.....
.....
#.##.
##..#
#...#
#...#
#...#""",
    "p": """
####.
#...#
#...#
####.
#....
#....
#....""",
    "w": """
.....
.....
#...#
#...#
#.#.#
#.#.#
.#.#.""",
    "x": """
.....
.....
#...#
.#.#.
..#..
.#.#.
#...#""",
    "y": """
#...#
#...#
#...#
.####
....#
#...#
.###.""",
}

GLYPH_ROWS = 7
GLYPH_COLS = 5


def _parse(text: str) -> np.ndarray:
    rows = [r for r in text.strip().splitlines()]
    grid = np.array([[ch == "#" for ch in r] for r in rows], dtype=np.float64)
    assert grid.shape == (GLYPH_ROWS, GLYPH_COLS), grid.shape
    return grid


GLYPHS: dict[str, np.ndarray] = {ch: _parse(bits) for ch, bits in _RAW.items()}


def glyph(ch: str) -> np.ndarray:
    """Ink mask (1 = ink) for ``ch``."""
    try:
        return GLYPHS[ch]
    except KeyError:
        raise KeyError(f"no built-in glyph for {ch!r}; available: {''.join(sorted(GLYPHS))}") from None
