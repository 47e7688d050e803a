"""Desk-scale placement metrics: centroid-in-box rate and mask IoU.

Object pixels are segmented by nearest-colour classification against the
blob world's palette (object colours vs. the flat background), which is a
domain-specific stand-in for a detector, not a general segmenter.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DimensionError
from .guidance import RegionMask
from .renderer import SceneSpec
from .world import BACKGROUND_VALUE, BlobWorld


@dataclass(frozen=True)
class LayerRecord:
    """Placement outcome for one object layer of one render."""

    layer_index: int
    centroid: Optional[tuple[float, float]]  # (row, col), None if nothing segmented
    in_box: bool
    iou: float
    texture_var: float = 0.0  # pixel variance inside the segmented object


@dataclass(frozen=True)
class RenderRecord:
    seed: Optional[int]
    layers: tuple[LayerRecord, ...]

    @property
    def hit(self) -> bool:
        return bool(self.layers) and all(l.in_box for l in self.layers)


@dataclass(frozen=True)
class MetricsReport:
    placement_rate: float
    mean_iou: float
    records: tuple[RenderRecord, ...]
    config: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not 0.0 <= self.placement_rate <= 1.0:
            raise ConfigError(f"placement_rate {self.placement_rate} outside [0, 1]")


def segment_color(x0: np.ndarray, color: np.ndarray, background: float = BACKGROUND_VALUE) -> np.ndarray:
    """Pixels classified nearer to ``color`` than to the flat background."""
    d_obj = np.sum((x0 - color[None, None, :]) ** 2, axis=2)
    d_bg = np.sum((x0 - background) ** 2, axis=2)
    return d_obj < d_bg


def centroid(mask: np.ndarray) -> Optional[tuple[float, float]]:
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        return None
    return float(rows.mean()), float(cols.mean())


def iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def _layer_color(layer_caption, world: BlobWorld) -> np.ndarray:
    for name in world.colors:
        if world.vocab[name] in layer_caption.tokens:
            return world.color_value(name)
    raise ConfigError(f"layer caption {layer_caption.tokens} names no known colour")


def evaluate_render(
    x0: np.ndarray,
    scene: SceneSpec,
    world: BlobWorld,
    seed: Optional[int] = None,
) -> RenderRecord:
    """Score one render against every object layer's target region."""
    layer_records = []
    for i, layer in enumerate(scene.layers):
        if layer.is_background:
            continue
        color = _layer_color(layer.caption, world)
        seg = segment_color(x0, color)
        target = layer.mask.mask.astype(bool)
        c = centroid(seg)
        in_box = c is not None and bool(target[int(round(c[0])), int(round(c[1]))])
        texture_var = float(x0[seg].var()) if seg.any() else 0.0
        layer_records.append(
            LayerRecord(
                layer_index=i,
                centroid=c,
                in_box=in_box,
                iou=iou(seg, target),
                texture_var=texture_var,
            )
        )
    return RenderRecord(seed=seed, layers=tuple(layer_records))


def evaluate_placement(
    outputs: Sequence[np.ndarray],
    scene: SceneSpec,
    world: BlobWorld,
    seeds: Optional[Sequence[int]] = None,
    config: Optional[dict] = None,
) -> MetricsReport:
    """Aggregate placement rate and mean IoU over a batch of renders."""
    if not outputs:
        raise ConfigError("no outputs to evaluate")
    for x0 in outputs:
        if x0.shape != scene.shape:
            raise DimensionError(f"output shape {x0.shape} != scene {scene.shape}")
    if seeds is None:
        seeds = [None] * len(outputs)
    if len(seeds) != len(outputs):
        raise ConfigError(f"{len(seeds)} seeds for {len(outputs)} outputs")
    records = tuple(
        evaluate_render(x0, scene, world, seed) for x0, seed in zip(outputs, seeds)
    )
    ious = [l.iou for r in records for l in r.layers]
    return MetricsReport(
        placement_rate=sum(r.hit for r in records) / len(records),
        mean_iou=float(np.mean(ious)) if ious else 0.0,
        records=records,
        config=dict(config or {}),
    )
