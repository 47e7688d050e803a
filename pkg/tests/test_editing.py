"""DDIM inversion and layered editing round trips."""
import numpy as np
import pytest

from layerdiff.diffusion import build_schedule, sample
from layerdiff.editing import ddim_invert, edit_scene
from layerdiff.errors import ConfigError, DimensionError
from layerdiff.guidance import rasterize_box
from layerdiff.metrics import segment_color
from layerdiff.renderer import Layer, SceneSpec, background_layer
from layerdiff.scores import AnalyticScoreModel
from layerdiff.world import make_blob_world


@pytest.fixture(scope="module")
def world():
    return make_blob_world()


@pytest.fixture(scope="module")
def sched():
    return build_schedule(50, "linear", 15)


@pytest.fixture(scope="module")
def est(world, sched):
    return AnalyticScoreModel(world.dist, sched)


def oracle_image(world):
    idx = world.dist.select(world.caption("red", "cell_1_1"))[0]
    return world.dist.templates[idx].values


def test_inversion_round_trip_on_oracle_image(world, sched, est):
    x0 = oracle_image(world)
    inv = ddim_invert(x0, est, world.caption("red"), sched)
    assert inv.recon_mse < 1e-3
    assert inv.x_T_hat.shape == x0.shape


def test_inversion_error_non_increasing_with_step_count(world):
    x0 = oracle_image(world)
    errors = []
    for steps in (10, 25, 50):
        sched = build_schedule(50, "linear", 15, num_sample_steps=steps)
        est = AnalyticScoreModel(world.dist, sched)
        inv = ddim_invert(x0, est, world.caption("red"), sched)
        errors.append(inv.recon_mse)
    assert errors[0] < 1e-3
    # allow tiny float jitter around an already-exact round trip
    assert errors[2] <= errors[1] + 1e-12 and errors[1] <= errors[0] + 1e-12


def test_inversion_keeps_trajectory_and_rejects_stochastic(world, sched, est):
    x0 = oracle_image(world)
    inv = ddim_invert(x0, est, world.caption("red"), sched,
                      keep_trajectory=True, verify=False)
    assert inv.recon_mse is None
    assert len(inv.trajectory) == len(sched.timestep_grid)
    noisy = build_schedule(50, "linear", 15, deterministic=False)
    with pytest.raises(ConfigError):
        ddim_invert(x0, est, world.caption("red"), noisy)
    with pytest.raises(DimensionError):
        ddim_invert(np.full_like(x0, np.nan), est, world.caption("red"), sched)


def test_noop_edit_reconstructs_source(world, sched, est):
    cap = world.caption("red", "cell_1_1")
    src = sample(est, cap, sched, np.random.default_rng(5), world.dist.shape, gamma=1.0)
    scene = SceneSpec(cap, (background_layer(cap, 12, 12),), 12, 12,
                      gamma=1.0, T=50, t0=15)
    out = edit_scene(src, scene, est, sched)
    assert np.mean((out - src) ** 2) < 1e-3


def test_replace_edit_recolours_the_box(world, sched, est):
    src_cap = world.caption("red", "cell_1_1")
    src = sample(est, src_cap, sched, np.random.default_rng(5), world.dist.shape, gamma=1.0)
    mask = rasterize_box(world.cell_box(1, 1), 12, 12)
    scene = SceneSpec(
        world.caption("blue", "cell_1_1"),
        (
            Layer(caption=world.caption("blue"), mask=mask),
            background_layer(world.caption("scene"), 12, 12),
        ),
        12, 12, gamma=1.0, T=50, t0=35,
    )
    out = edit_scene(src, scene, est, sched, source_caption=src_cap)
    box = mask.mask.astype(bool)
    blue = segment_color(out, world.color_value("blue"))
    red = segment_color(out, world.color_value("red"))
    assert blue[box].sum() > 0
    assert red[box].sum() == 0
    assert np.mean((out - src)[~box] ** 2) < 1e-3


def test_edit_scene_rejects_resolution_mismatch(world, sched, est):
    scene = SceneSpec(
        world.caption("red"),
        (background_layer(world.caption("red"), 12, 12),),
        12, 12, gamma=1.0, T=50, t0=15,
    )
    with pytest.raises(DimensionError):
        edit_scene(np.zeros((4, 4, 3)), scene, est, sched)
