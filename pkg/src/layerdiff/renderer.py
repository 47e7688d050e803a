"""The layered rendering loop.

The reverse process is split at the boundary t0: for grid timesteps t > t0
every object layer's score is evaluated at x_t + xi_i under its own caption,
the per-layer scores are fused by coverage-normalised mask weighting, and
the fused direction is stepped with classifier-free guidance; for t <= t0
the standard guided reverse process runs under the global caption.

Dynamic guidance vectors are computed once, from the attention map extracted
at the initial latent, and stay frozen for the whole render.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .diffusion import Schedule, build_schedule, cfg_direction, reverse_step
from .errors import (
    CapabilityError,
    ConfigError,
    DimensionError,
    FusionError,
    GuidanceError,
    SchedulingError,
)
from .guidance import (
    NULL_GUIDANCE,
    RegionMask,
    VisionGuidance,
    all_ones_mask,
    build_dynamic_random,
    build_xi,
    compute_dynamic_delta,
)
from .scores import ScoreEstimator, TokenSequence, extract_attention


@dataclass(frozen=True)
class Layer:
    """Per-object condition bundle: caption, region mask, and guidance."""

    caption: TokenSequence
    mask: RegionMask
    guidance: VisionGuidance = NULL_GUIDANCE
    is_background: bool = False


@dataclass(frozen=True)
class SceneSpec:
    """Everything needed to render one scene; background layer comes last."""

    global_caption: TokenSequence
    layers: tuple[Layer, ...]
    height: int
    width: int
    channels: int = 3
    gamma: float = 7.5
    T: int = 50
    t0: int = 15
    kind: str = "linear"
    num_sample_steps: Optional[int] = None
    deterministic: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ConfigError("scene needs at least one layer")
        backgrounds = [l for l in self.layers if l.is_background]
        if len(backgrounds) != 1 or not self.layers[-1].is_background:
            raise ConfigError("scene needs exactly one background layer, placed last")
        bg = self.layers[-1]
        if not bg.guidance.is_null:
            raise ConfigError("background layer must carry null guidance")
        if not (bg.mask.mask == 1).all():
            raise ConfigError("background layer must have an all-ones mask")
        for i, layer in enumerate(self.layers):
            if layer.mask.shape != (self.height, self.width):
                raise DimensionError(
                    f"layer {i} mask {layer.mask.shape} != scene "
                    f"{(self.height, self.width)}"
                )

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.channels)

    def make_schedule(self) -> Schedule:
        return build_schedule(
            self.T,
            self.kind,
            self.t0,
            num_sample_steps=self.num_sample_steps,
            deterministic=self.deterministic,
        )


def background_layer(caption: TokenSequence, h: int, w: int) -> Layer:
    return Layer(caption=caption, mask=all_ones_mask(h, w), is_background=True)


def fuse_layer_scores(
    layers: Sequence[Layer], scores: Sequence[np.ndarray]
) -> np.ndarray:
    """Coverage-normalised mask-weighted sum of per-layer scores."""
    if len(layers) != len(scores):
        raise FusionError(f"{len(layers)} layers but {len(scores)} scores")
    coverage = np.zeros(layers[0].mask.shape, dtype=np.int64)
    for layer in layers:
        coverage += layer.mask.mask
    if (coverage == 0).any():
        raise FusionError("zero mask coverage at some pixel")
    fused = np.zeros_like(np.asarray(scores[0], dtype=np.float64))
    for layer, s in zip(layers, scores):
        if s.shape != fused.shape:
            raise DimensionError(f"score shape {s.shape} != {fused.shape}")
        weight = layer.mask.mask / coverage
        fused += weight[:, :, None] * s
    return fused


def compose_masked_solution(
    per_layer_x: Sequence[np.ndarray], masks: Sequence[RegionMask]
) -> np.ndarray:
    """Minimiser of sum_i ||M_i * (x - x_i)||^2: the coverage-weighted average.

    Serves as the executable oracle for the equivalence of the layered step
    with per-layer stepping followed by masked composition.
    """
    if len(per_layer_x) != len(masks):
        raise FusionError(f"{len(per_layer_x)} fields but {len(masks)} masks")
    coverage = np.zeros(masks[0].shape, dtype=np.int64)
    for m in masks:
        coverage += m.mask
    if (coverage == 0).any():
        raise FusionError("zero mask coverage at some pixel")
    out = np.zeros_like(np.asarray(per_layer_x[0], dtype=np.float64))
    for x_i, m in zip(per_layer_x, masks):
        out += (m.mask / coverage)[:, :, None] * x_i
    return out


def build_layer_guidances(
    scene: SceneSpec,
    est: ScoreEstimator,
    x_T: np.ndarray,
    rng: Optional[np.random.Generator] = None,
) -> list[VisionGuidance]:
    """Resolve dynamic guidance at x_T; constant modes pass through unchanged.

    The dynamic delta for a layer is computed from the attention row of the
    global-caption token matching the layer's first caption token (by id).
    """
    needs_attention = any(
        l.guidance.mode in ("dynamic-mean", "dynamic-random") for l in scene.layers
    )
    A = None
    if needs_attention:
        A = extract_attention(est, x_T, scene.global_caption)
    resolved: list[VisionGuidance] = []
    for layer in scene.layers:
        g = layer.guidance
        if g.mode in ("dynamic-mean", "dynamic-random"):
            if not layer.caption.tokens:
                raise GuidanceError("dynamic guidance needs a non-null layer caption")
            token_index = scene.global_caption.index_of(layer.caption.tokens[0])
            delta, S = compute_dynamic_delta(A, token_index, x_T, g.K, g.lam)
            if g.mode == "dynamic-mean":
                g = replace(g, delta=delta)
            else:
                if rng is None:
                    raise GuidanceError("dynamic-random guidance requires an RNG")
                g = build_dynamic_random(S, x_T, g.lam, g.mask, rng, K=g.K)
        resolved.append(g)
    return resolved


def layered_step(
    x_t: np.ndarray,
    scene: SceneSpec,
    est: ScoreEstimator,
    t: int,
    sched: Schedule,
    noise: Optional[np.ndarray] = None,
    xis: Optional[Sequence[Optional[np.ndarray]]] = None,
) -> np.ndarray:
    """One layered reverse transition (only valid in the section t > t0)."""
    if t <= sched.t0:
        raise SchedulingError(f"layered step at t={t} outside the section t > {sched.t0}")
    if xis is None:
        xis = [None if l.guidance.is_null else build_xi(l.guidance) for l in scene.layers]
    scores = []
    for layer, xi in zip(scene.layers, xis):
        x_in = x_t if xi is None else x_t + xi
        scores.append(est.estimate(x_in, t, layer.caption))
    phi = fuse_layer_scores(scene.layers, scores)
    s_uncond = est.estimate(x_t, t, None)
    s_hat = cfg_direction(phi, s_uncond, scene.gamma)
    return reverse_step(x_t, s_hat, t, sched, noise)


def render(
    scene: SceneSpec,
    est: ScoreEstimator,
    rng: Optional[np.random.Generator | int] = None,
    x_T: Optional[np.ndarray] = None,
    sched: Optional[Schedule] = None,
) -> np.ndarray:
    """Full two-section render of a scene; deterministic given the seed.

    ``x_T`` overrides the initial latent (used by editing, which installs an
    inverted source latent); the RNG is still consumed in the same order so
    renders stay reproducible.
    """
    if rng is None:
        rng = scene.seed
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    if sched is None:
        sched = scene.make_schedule()

    x = rng.standard_normal(scene.shape)
    if x_T is not None:
        x_T = np.asarray(x_T, dtype=np.float64)
        if x_T.shape != scene.shape:
            raise DimensionError(f"x_T shape {x_T.shape} != scene {scene.shape}")
        x = x_T

    guidances = build_layer_guidances(scene, est, x, rng)
    xis = [None if g.is_null else build_xi(g) for g in guidances]

    for t in sched.timestep_grid:
        t = int(t)
        noise = None if sched.deterministic else rng.standard_normal(scene.shape)
        if t > sched.t0:
            x = layered_step(x, scene, est, t, sched, noise, xis)
        else:
            s_c = est.estimate(x, t, scene.global_caption)
            s_u = est.estimate(x, t, None)
            s_hat = cfg_direction(s_c, s_u, scene.gamma)
            x = reverse_step(x, s_hat, t, sched, noise)
    return x
