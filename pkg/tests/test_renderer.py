"""Layered fusion, the guided step, and the two-section render loop."""
import numpy as np
import pytest

from layerdiff.diffusion import build_schedule, cfg_direction, reverse_step, sample
from layerdiff.errors import (
    CapabilityError,
    ConfigError,
    DimensionError,
    FusionError,
    SchedulingError,
)
from layerdiff.guidance import (
    NULL_GUIDANCE,
    BoundingBox,
    RegionMask,
    VisionGuidance,
    all_ones_mask,
    build_xi,
    rasterize_box,
)
from layerdiff.renderer import (
    Layer,
    SceneSpec,
    background_layer,
    build_layer_guidances,
    compose_masked_solution,
    fuse_layer_scores,
    layered_step,
    render,
)
from layerdiff.scores import AnalyticScoreModel, TokenSequence
from layerdiff.world import make_blob_world


class SyntheticScore:
    """Pure deterministic pseudo-score: a smooth function of (x, t, cond)."""

    attention_capable = False

    def estimate(self, x, t, cond):
        shift = 0.0 if cond is None else float(sum(cond.tokens) + 1)
        return np.sin(x * (1.0 + 0.01 * t) + shift)

    def attend(self, x_T, c):
        raise NotImplementedError


class RecordingScore(SyntheticScore):
    def __init__(self):
        self.calls = []

    def estimate(self, x, t, cond):
        self.calls.append((None if cond is None else tuple(cond.tokens), x.copy()))
        return super().estimate(x, t, cond)


def two_layer_scene(h=6, w=6, **kw):
    obj_mask = rasterize_box(BoundingBox(0, 0, 3, 3), h, w)
    guidance = VisionGuidance(mode="constant", mask=obj_mask, delta=np.array([0.2, -0.1, 0.0]))
    layers = (
        Layer(caption=TokenSequence([1]), mask=obj_mask, guidance=guidance),
        background_layer(TokenSequence([5]), h, w),
    )
    defaults = dict(global_caption=TokenSequence([5]), layers=layers, height=h, width=w)
    defaults.update(kw)
    return SceneSpec(**defaults)


def test_scene_spec_validation():
    h = w = 4
    obj = Layer(TokenSequence([1]), rasterize_box(
        BoundingBox(0, 0, 2, 2), h, w))
    bg = background_layer(TokenSequence([2]), h, w)
    with pytest.raises(ConfigError):
        SceneSpec(TokenSequence([2]), (obj,), h, w)
    with pytest.raises(ConfigError):
        SceneSpec(TokenSequence([2]), (bg, obj), h, w)
    bad_bg = Layer(TokenSequence([2]), obj.mask, is_background=True)
    with pytest.raises(ConfigError):
        SceneSpec(TokenSequence([2]), (obj, bad_bg), h, w)
    with pytest.raises(DimensionError):
        SceneSpec(TokenSequence([2]), (obj, bg), 8, 8)


def test_fuse_single_layer_is_identity():
    bg = background_layer(TokenSequence([0]), 3, 3)
    s = np.random.default_rng(0).standard_normal((3, 3, 2))
    assert np.array_equal(fuse_layer_scores([bg], [s]), s)


def test_fuse_disjoint_partition():
    left = Layer(TokenSequence([1]), rasterize_box(
        BoundingBox(0, 0, 2, 4), 4, 4))
    right = Layer(TokenSequence([2]), RegionMask(1 - left.mask.mask))
    rng = np.random.default_rng(1)
    s1, s2 = rng.standard_normal((2, 4, 4, 3))
    fused = fuse_layer_scores([left, right], [s1, s2])
    inside = left.mask.mask.astype(bool)
    assert np.array_equal(fused[inside], s1[inside])
    assert np.array_equal(fused[~inside], s2[~inside])


def test_fuse_overlap_against_per_pixel_loop():
    rng = np.random.default_rng(2)
    masks = [(rng.random((4, 4)) < 0.6).astype(np.uint8) for _ in range(3)]
    masks[-1][:] = 1  # guarantee coverage
    layers = [Layer(TokenSequence([i]), RegionMask(m)) for i, m in enumerate(masks)]
    scores = [rng.standard_normal((4, 4, 3)) for _ in range(3)]
    fused = fuse_layer_scores(layers, scores)
    for j in range(4):
        for k in range(4):
            cover = sum(int(m[j, k]) for m in masks)
            expected = sum(
                (m[j, k] / cover) * s[j, k] for m, s in zip(masks, scores)
            )
            assert np.allclose(fused[j, k], expected, rtol=1e-12)


def test_fuse_errors():
    bg = background_layer(TokenSequence([0]), 2, 2)
    s = np.zeros((2, 2, 3))
    with pytest.raises(FusionError):
        fuse_layer_scores([bg], [s, s])
    empty = Layer(TokenSequence([1]), RegionMask(np.zeros((2, 2), dtype=np.uint8)))
    with pytest.raises(FusionError):
        fuse_layer_scores([empty], [s])


def test_compose_masked_solution_basics():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((3, 3, 2))
    ones = all_ones_mask(3, 3)
    assert np.array_equal(compose_masked_solution([x, x], [ones, ones]), x)
    left = rasterize_box(BoundingBox(0, 0, 1, 3), 3, 3)
    right = RegionMask(1 - left.mask)
    a, b = rng.standard_normal((2, 3, 3, 2))
    stitched = compose_masked_solution([a, b], [left, right])
    inside = left.mask.astype(bool)
    assert np.array_equal(stitched[inside], a[inside])
    assert np.array_equal(stitched[~inside], b[~inside])


def test_compose_masked_solution_matches_quadratic_minimiser():
    rng = np.random.default_rng(4)
    masks = [RegionMask((rng.random((4, 4)) < 0.7).astype(np.uint8)) for _ in range(2)]
    masks.append(all_ones_mask(4, 4))
    fields = [rng.standard_normal((4, 4, 3)) for _ in range(3)]
    out = compose_masked_solution(fields, masks)
    for j in range(4):
        for k in range(4):
            num = sum(m.mask[j, k] * f[j, k] for m, f in zip(masks, fields))
            den = sum(int(m.mask[j, k]) for m in masks)
            assert np.allclose(out[j, k], num / den, rtol=1e-12, atol=1e-12)


def test_layered_step_outside_section_errors():
    scene = two_layer_scene(T=20, t0=10)
    sched = scene.make_schedule()
    x = np.zeros(scene.shape)
    with pytest.raises(SchedulingError):
        layered_step(x, scene, SyntheticScore(), 10, sched)


def test_layered_step_gamma_one_drops_unconditional():
    scene = two_layer_scene(T=20, t0=10, gamma=1.0)
    sched = scene.make_schedule()
    est = SyntheticScore()
    rng = np.random.default_rng(5)
    x = rng.standard_normal(scene.shape)
    t = 15
    out = layered_step(x, scene, est, t, sched)
    xis = [build_xi(l.guidance) if not l.guidance.is_null else None for l in scene.layers]
    scores = [
        est.estimate(x if xi is None else x + xi, t, l.caption)
        for l, xi in zip(scene.layers, xis)
    ]
    phi = fuse_layer_scores(scene.layers, scores)
    assert np.allclose(out, reverse_step(x, phi, t, sched), rtol=1e-12)


def test_background_only_step_reduces_to_cfg():
    h = w = 4
    bg = background_layer(TokenSequence([3]), h, w)
    scene = SceneSpec(TokenSequence([3]), (bg,), h, w, gamma=4.0, T=20, t0=10)
    sched = scene.make_schedule()
    est = SyntheticScore()
    rng = np.random.default_rng(6)
    x = rng.standard_normal(scene.shape)
    t = 18
    plain = reverse_step(
        x,
        cfg_direction(est.estimate(x, t, bg.caption), est.estimate(x, t, None), 4.0),
        t,
        sched,
    )
    assert np.array_equal(layered_step(x, scene, est, t, sched), plain)


def test_background_only_render_matches_plain_sampler_bitwise():
    world = make_blob_world()
    h = w = world.height
    caption = world.caption("red", "scene")
    scene = SceneSpec(
        caption, (background_layer(caption, h, w),), h, w, gamma=7.5, T=30, t0=15
    )
    sched = scene.make_schedule()
    est = AnalyticScoreModel(world.dist, sched)
    for seed in (0, 1):
        a = render(scene, est, rng=seed, sched=sched)
        b = sample(est, caption, sched, np.random.default_rng(seed), scene.shape, 7.5)
        assert np.array_equal(a, b)


def test_t0_equal_T_ignores_layers_and_guidance():
    scene = two_layer_scene(T=20, t0=20, gamma=2.0)
    est = SyntheticScore()
    base = render(scene, est, rng=3)
    moved_mask = rasterize_box(BoundingBox(3, 3, 6, 6), 6, 6)
    other = SceneSpec(
        global_caption=scene.global_caption,
        layers=(
            Layer(
                TokenSequence([2]),
                moved_mask,
                VisionGuidance(mode="constant", mask=moved_mask, delta=np.ones(3)),
            ),
            scene.layers[-1],
        ),
        height=6,
        width=6,
        gamma=2.0,
        T=20,
        t0=20,
    )
    assert np.array_equal(render(other, est, rng=3), base)


def test_xi_reaches_only_that_layers_conditional_branch():
    scene = two_layer_scene(T=20, t0=18, gamma=2.0)
    est = RecordingScore()
    render(scene, est, rng=0)
    xi = build_xi(scene.layers[0].guidance)
    layered_calls = [c for c in est.calls if c[0] == (1,)]
    uncond_calls = [c for c in est.calls if c[0] is None]
    bg_calls = [c for c in est.calls if c[0] == (5,)]
    assert layered_calls and uncond_calls and bg_calls
    # The object layer's first evaluation sees the shifted latent; the
    # unconditional and background branches see the unshifted one.
    x0_obj = layered_calls[0][1]
    x0_unc = uncond_calls[0][1]
    x0_bg = bg_calls[0][1]
    assert np.array_equal(x0_obj, x0_unc + xi)
    assert np.array_equal(x0_bg, x0_unc)


def test_render_x_T_override_and_shape_check():
    scene = two_layer_scene(T=10, t0=5)
    est = SyntheticScore()
    x_T = np.zeros(scene.shape)
    out = render(scene, est, rng=0, x_T=x_T)
    assert out.shape == scene.shape
    with pytest.raises(DimensionError):
        render(scene, est, rng=0, x_T=np.zeros((2, 2, 3)))


def test_dynamic_guidance_requires_attention_capability():
    world = make_blob_world()
    h = w = world.height
    mask = rasterize_box(world.cell_box(0, 0), h, w)
    layers = (
        Layer(
            world.caption("red"),
            mask,
            VisionGuidance(mode="dynamic-mean", mask=mask, delta=np.zeros(3), lam=1.0, K=4),
        ),
        background_layer(world.caption("scene"), h, w),
    )
    scene = SceneSpec(world.caption("red", "scene"), layers, h, w, T=10, t0=5)
    with pytest.raises(CapabilityError):
        render(scene, SyntheticScore(), rng=0)


def test_dynamic_guidance_resolution_on_oracle():
    world = make_blob_world()
    h = w = world.height
    mask = rasterize_box(world.cell_box(1, 1), h, w)
    for mode in ("dynamic-mean", "dynamic-random"):
        layers = (
            Layer(
                world.caption("red"),
                mask,
                VisionGuidance(mode=mode, mask=mask, delta=np.zeros(3), lam=0.5, K=6),
            ),
            background_layer(world.caption("scene"), h, w),
        )
        scene = SceneSpec(world.caption("red", "scene"), layers, h, w, T=10, t0=5)
        sched = scene.make_schedule()
        est = AnalyticScoreModel(world.dist, sched)
        rng = np.random.default_rng(0)
        x_T = rng.standard_normal(scene.shape)
        resolved = build_layer_guidances(scene, est, x_T, rng)
        assert resolved[0].mode == mode
        assert np.isfinite(resolved[0].delta).all()
        assert resolved[1].is_null
        out = render(scene, est, rng=1, sched=sched)
        assert np.isfinite(out).all()
