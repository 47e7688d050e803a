"""The blob world: a small template family used as the toy data distribution.

Templates are flat-background images with one coloured square blob placed in
one of ``cells x cells`` position cells.  Each template is tagged with its
colour token, its cell token, and a shared scene token, which gives the
conditional / unconditional split a concrete meaning: conditioning on a
colour keeps the blob position free, so spatial control has to come from
vision guidance alone.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .guidance import BoundingBox
from .scores import Template, TemplateDistribution, TokenSequence

# Convenience colour table for constant-mode guidance and template blobs.
COLOR_TABLE: dict[str, tuple[float, float, float]] = {
    "red": (0.85, 0.15, 0.15),
    "green": (0.15, 0.85, 0.15),
    "blue": (0.15, 0.15, 0.85),
    "white": (0.95, 0.95, 0.95),
    "black": (0.05, 0.05, 0.05),
}

BACKGROUND_VALUE = 0.5


@dataclass(frozen=True)
class BlobWorld:
    """Template distribution plus the vocabulary that addresses it."""

    dist: TemplateDistribution
    vocab: dict[str, int]
    cells: int
    cell_px: int
    colors: tuple[str, ...]
    channels: int = 3

    @property
    def height(self) -> int:
        return self.cells * self.cell_px

    @property
    def width(self) -> int:
        return self.cells * self.cell_px

    def token(self, name: str) -> int:
        try:
            return self.vocab[name]
        except KeyError:
            raise ConfigError(f"unknown token name {name!r}") from None

    def caption(self, *names: str) -> TokenSequence:
        return TokenSequence([self.token(n) for n in names])

    def cell_box(self, row: int, col: int) -> BoundingBox:
        """Pixel bounding box of a position cell."""
        if not (0 <= row < self.cells and 0 <= col < self.cells):
            raise ConfigError(f"cell ({row}, {col}) outside {self.cells}x{self.cells}")
        p = self.cell_px
        return BoundingBox(col * p, row * p, (col + 1) * p, (row + 1) * p)

    def color_value(self, name: str) -> np.ndarray:
        return np.array(COLOR_TABLE[name], dtype=np.float64)[: self.channels]

    def guidance_delta(self, color: str, scale: float = 1.0) -> np.ndarray:
        """Constant-mode direction: blob colour relative to the background."""
        return scale * (self.color_value(color) - BACKGROUND_VALUE)


def _blob_support(cells: int, cell_px: int, row: int, col: int, margin: int) -> np.ndarray:
    h = w = cells * cell_px
    support = np.zeros((h, w), dtype=bool)
    support[
        row * cell_px + margin : (row + 1) * cell_px - margin,
        col * cell_px + margin : (col + 1) * cell_px - margin,
    ] = True
    return support


def make_blob_world(
    cells: int = 3,
    cell_px: int = 4,
    colors: tuple[str, ...] = ("red", "green", "blue"),
    blob_margin: int = 1,
    channels: int = 3,
) -> BlobWorld:
    """One template per (colour, cell) pair with uniform prior weights."""
    if cells < 1 or cell_px < 2 * blob_margin + 1:
        raise ConfigError("cells must be >= 1 and cell_px large enough for the blob")
    for c in colors:
        if c not in COLOR_TABLE:
            raise ConfigError(f"unknown colour {c!r}; known: {sorted(COLOR_TABLE)}")

    vocab: dict[str, int] = {c: i for i, c in enumerate(colors)}
    for r in range(cells):
        for c in range(cells):
            vocab[f"cell_{r}_{c}"] = len(vocab)
    vocab["scene"] = len(vocab)

    h = w = cells * cell_px
    templates = []
    n = len(colors) * cells * cells
    for color in colors:
        value = np.array(COLOR_TABLE[color], dtype=np.float64)[:channels]
        for r in range(cells):
            for c in range(cells):
                img = np.full((h, w, channels), BACKGROUND_VALUE, dtype=np.float64)
                support = _blob_support(cells, cell_px, r, c, blob_margin)
                img[support] = value
                templates.append(
                    Template(
                        values=img,
                        weight=1.0 / n,
                        tags=frozenset(
                            {vocab[color], vocab[f"cell_{r}_{c}"], vocab["scene"]}
                        ),
                        support=support,
                    )
                )
    return BlobWorld(
        dist=TemplateDistribution(templates),
        vocab=vocab,
        cells=cells,
        cell_px=cell_px,
        colors=tuple(colors),
        channels=channels,
    )
