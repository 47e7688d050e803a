"""Vision-guidance construction: region masks and the additive field xi.

The field factorises into a channel vector delta and a binary mask M:

    xi[j,k,:] = delta * (2*M[j,k] - 1)            (enhance-and-suppress)
    xi[j,k,:] = -delta * (1 - M[j,k])             (suppress-only ablation)

Dynamic modes derive delta from the top-K attended positions of a token's
cross-attention row at the initial latent x_T, scaled by lambda; the
random-vectors variant fills each in-mask position with an independently
sampled top-K vector instead of their mean.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, GuidanceError, LayoutError
from .scores import AttentionMap

GUIDANCE_MODES = ("constant", "dynamic-mean", "dynamic-random", "suppress-only", "null")


@dataclass(frozen=True)
class BoundingBox:
    """Half-open pixel box: x in [x_min, x_max), y in [y_min, y_max)."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int


@dataclass(frozen=True)
class RegionMask:
    """Binary h x w mask with a provenance tag."""

    mask: np.ndarray  # (h, w) uint8 in {0, 1}
    provenance: str = "from-box"

    def __post_init__(self) -> None:
        m = np.asarray(self.mask)
        if m.ndim != 2:
            raise DimensionError(f"mask must be 2-D, got shape {m.shape}")
        if not np.isin(m, (0, 1)).all():
            raise LayoutError("mask values must be 0 or 1")
        object.__setattr__(self, "mask", m.astype(np.uint8))

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    def complement(self) -> "RegionMask":
        return RegionMask(1 - self.mask, provenance="complement")


def all_ones_mask(h: int, w: int) -> RegionMask:
    return RegionMask(np.ones((h, w), dtype=np.uint8), provenance="all-ones")


def rasterize_box(box: BoundingBox, h: int, w: int) -> RegionMask:
    """Rasterise a half-open box into a binary mask."""
    if not (0 <= box.x_min < box.x_max <= w and 0 <= box.y_min < box.y_max <= h):
        raise LayoutError(f"box {box} degenerate or outside {h}x{w}")
    m = np.zeros((h, w), dtype=np.uint8)
    m[box.y_min : box.y_max, box.x_min : box.x_max] = 1
    return RegionMask(m, provenance="from-box")


def mask_from_image(gray: np.ndarray, threshold: float = 0.5) -> RegionMask:
    """Threshold a single-channel instance-mask image at 0.5."""
    if gray.ndim != 2:
        raise DimensionError(f"instance mask must be single-channel, got {gray.shape}")
    return RegionMask((gray >= threshold).astype(np.uint8), provenance="from-instance-mask")


@dataclass(frozen=True)
class VisionGuidance:
    """Inputs for one layer's xi field.

    ``delta`` is the channel vector (for dynamic modes it already includes
    the lambda factor); ``position_vectors`` is only set in dynamic-random
    mode and holds the per-position lambda-scaled samples.
    """

    mode: str
    mask: Optional[RegionMask] = None
    delta: Optional[np.ndarray] = None
    lam: float = 0.0
    K: int = 0
    position_vectors: Optional[np.ndarray] = None  # (h, w, D)

    def __post_init__(self) -> None:
        if self.mode not in GUIDANCE_MODES:
            raise ConfigError(f"unknown guidance mode {self.mode!r}")
        if self.mode == "null":
            if self.delta is not None:
                raise GuidanceError("null guidance carries no delta")
            return
        if self.mask is None or self.delta is None:
            raise GuidanceError(f"{self.mode} guidance requires a mask and a delta")
        d = np.asarray(self.delta, dtype=np.float64)
        if not np.isfinite(d).all():
            raise GuidanceError("delta must be finite")
        object.__setattr__(self, "delta", d)
        if self.mode.startswith("dynamic") and self.K < 1:
            raise ConfigError(f"dynamic guidance requires K >= 1, got {self.K}")

    @property
    def is_null(self) -> bool:
        return self.mode == "null"


NULL_GUIDANCE = VisionGuidance(mode="null")


def build_xi(g: VisionGuidance) -> np.ndarray:
    """Materialise the h x w x D guidance field for one layer."""
    if g.is_null:
        raise GuidanceError("null guidance has no field; callers skip the addition")
    m = g.mask.mask.astype(np.float64)[:, :, None]
    delta = g.delta[None, None, :]
    if g.mode in ("constant", "dynamic-mean"):
        return delta * (2.0 * m - 1.0)
    if g.mode == "suppress-only":
        return -delta * (1.0 - m)
    if g.mode == "dynamic-random":
        if g.position_vectors is None:
            raise GuidanceError(
                "dynamic-random guidance is unresolved; build it from a position set"
            )
        if g.position_vectors.shape[:2] != g.mask.shape:
            raise DimensionError("position vectors do not match the mask resolution")
        return g.position_vectors * m - delta * (1.0 - m)
    raise ConfigError(f"unknown guidance mode {g.mode!r}")


def compute_dynamic_delta(
    A: AttentionMap, token_index: int, x_T: np.ndarray, K: int, lam: float
) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """Top-K attended positions of one token row, and their lambda-scaled mean.

    Positions whose attention ties the K-th largest value are all included,
    so the set has exactly K members whenever the row values are distinct.
    """
    h, w = A.height, A.width
    if x_T.shape[:2] != (h, w):
        raise DimensionError(f"x_T shape {x_T.shape} does not match {h}x{w} attention")
    if not 1 <= K <= h * w:
        raise ConfigError(f"K must lie in [1, {h * w}], got {K}")
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    row = A.values[token_index]
    threshold = np.partition(row, -K)[-K]
    flat_idx = np.flatnonzero(row >= threshold)
    positions = [(int(i // w), int(i % w)) for i in flat_idx]
    vectors = x_T.reshape(h * w, -1)[flat_idx]
    delta = lam * vectors.mean(axis=0)
    return delta, positions


def build_dynamic_random(
    S: Sequence[tuple[int, int]],
    x_T: np.ndarray,
    lam: float,
    M: RegionMask,
    rng: np.random.Generator,
    K: int = 0,
) -> VisionGuidance:
    """Random-vectors variant: each in-mask position gets one sampled S vector.

    Outside the mask the field falls back to the negated lambda-scaled mean
    over S, mirroring the suppression side of the enhance-and-suppress form.
    """
    if not S:
        raise GuidanceError("position set S is empty")
    h, w = M.shape
    if x_T.shape[:2] != (h, w):
        raise DimensionError(f"x_T shape {x_T.shape} does not match mask {h}x{w}")
    pool = np.stack([x_T[j, k] for (j, k) in S])
    choice = rng.integers(0, len(S), size=(h, w))
    position_vectors = lam * pool[choice]
    delta = lam * pool.mean(axis=0)
    return VisionGuidance(
        mode="dynamic-random",
        mask=M,
        delta=delta,
        lam=lam,
        K=K or len(S),
        position_vectors=position_vectors,
    )
