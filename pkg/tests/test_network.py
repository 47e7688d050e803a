"""Trainable score network: gradients, training loop, and checkpoints."""
import numpy as np
import pytest
import torch

from layerdiff.diffusion import build_schedule, sample
from layerdiff.errors import ConfigError, TrainingError
from layerdiff.network import (
    NetConfig,
    ToyScoreEstimator,
    ToyScoreNet,
    TrainConfig,
    dsm_loss,
    gradient_check,
    load_checkpoint,
    sample_training_batch,
    train_toy_score,
)
from layerdiff.scores import Template, TemplateDistribution
from layerdiff.world import make_blob_world


def tiny_net(vocab_size=6, channels=2):
    torch.manual_seed(0)
    return ToyScoreNet(NetConfig(vocab_size=vocab_size, channels=channels, width=4, embed_dim=4))


def single_template_dist(h=4, w=4, channels=2):
    rng = np.random.default_rng(0)
    values = 0.25 + 0.5 * rng.random((h, w, channels))
    return TemplateDistribution([Template(values, 1.0, frozenset({0}))])


def test_parameter_budget():
    world = make_blob_world()
    net = ToyScoreNet(NetConfig(vocab_size=len(world.vocab)))
    assert net.parameter_count() < 50_000


def test_network_rejects_oversized_config():
    dist = single_template_dist()
    with pytest.raises(ConfigError):
        train_toy_score(dist, TrainConfig(steps=0, width=128, embed_dim=128))


def test_gradient_check_on_dsm_loss():
    net = tiny_net()
    dist = single_template_dist()
    sched = build_schedule(10, "linear", 5)
    batch = sample_training_batch(dist, sched, np.random.default_rng(1), 2, 0.5)

    worst = gradient_check(net, lambda: dsm_loss(net, batch, sched), eps=1e-6)
    assert worst < 1e-4


def test_training_smoke_and_loss_logging():
    dist = single_template_dist()
    sched = build_schedule(10, "linear", 5)
    est = train_toy_score(dist, TrainConfig(steps=5, batch_size=2), seed=0, sched=sched)
    assert len(est.training_losses) == 5
    assert all(np.isfinite(l) for l in est.training_losses)
    fresh = train_toy_score(dist, TrainConfig(steps=0), seed=0, sched=sched)
    x = np.zeros(dist.shape)
    assert fresh.estimate(x, 5, None).shape == dist.shape


def test_training_target_loss_enforced():
    dist = single_template_dist()
    sched = build_schedule(10, "linear", 5)
    with pytest.raises(TrainingError):
        train_toy_score(
            dist, TrainConfig(steps=1, batch_size=1, target_loss=0.0), sched=sched
        )


def test_estimate_is_scaled_noise_prediction():
    net = tiny_net()
    sched = build_schedule(10, "linear", 5)
    est = ToyScoreEstimator(net, sched)
    rng = np.random.default_rng(2)
    x = rng.standard_normal((4, 4, 2))
    t = 7
    eps_hat = est.predict_eps(x, t, None)
    s = est.estimate(x, t, None)
    assert np.allclose(s, -eps_hat / np.sqrt(1.0 - sched.alpha_bars[t]), rtol=1e-12)


def test_attention_maps_are_row_stochastic():
    world = make_blob_world()
    net = ToyScoreNet(NetConfig(vocab_size=len(world.vocab)))
    sched = build_schedule(10, "linear", 5)
    est = ToyScoreEstimator(net, sched, world.vocab)
    rng = np.random.default_rng(3)
    x_T = rng.standard_normal((world.height, world.width, 3))
    A = est.attend(x_T, world.caption("red", "scene"))
    assert A.values.shape == (2, world.height * world.width)
    assert np.allclose(A.values.sum(axis=1), 1.0)


def test_checkpoint_round_trip(tmp_path):
    from layerdiff.network import save_checkpoint

    dist = single_template_dist()
    sched = build_schedule(10, "linear", 5)
    est = train_toy_score(dist, TrainConfig(steps=2, batch_size=2), seed=1, sched=sched)
    path = tmp_path / "ckpt.npz"
    save_checkpoint(est, path)
    loaded = load_checkpoint(path, sched=sched)
    rng = np.random.default_rng(4)
    x = rng.standard_normal(dist.shape)
    assert np.array_equal(est.estimate(x, 5, None), loaded.estimate(x, 5, None))
    assert loaded.vocab == est.vocab


@pytest.mark.slow
def test_trained_network_reverses_single_template():
    """After short DSM training, deterministic sampling lands near the template."""
    dist = single_template_dist()
    sched = build_schedule(20, "linear", 5)
    est = train_toy_score(
        dist, TrainConfig(steps=1500, batch_size=8, lr=3e-3, p_uncond=0.2),
        seed=0, sched=sched,
    )
    out = sample(est, None, sched, np.random.default_rng(0), dist.shape, gamma=1.0)
    target = dist.templates[0].values
    assert np.max(np.abs(out - target)) < 0.15
