"""A tiny trainable conditional score network with real cross-attention maps.

The network predicts the perturbing noise from (x_t, t, tokens) and exposes
the score via s = -eps_hat / sqrt(1 - alpha_bar_t).  It runs in float64 on
CPU and stays well under 50k parameters, so full-parameter finite-difference
gradient checks are practical.

Two cross-attention blocks (full and half resolution) attend spatial
features to the token embeddings; their token-to-position maps, softmaxed
over positions, are captured on demand and averaged for extraction.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .diffusion import Schedule, build_schedule, forward_diffuse
from .errors import ConfigError, TrainingError
from .scores import (
    AttentionMap,
    TemplateDistribution,
    TokenSequence,
    average_attention_maps,
)

CHECKPOINT_VERSION = 1


class CrossAttentionBlock(nn.Module):
    """Single-head cross-attention from spatial features to token embeddings."""

    def __init__(self, width: int, embed_dim: int):
        super().__init__()
        self.q = nn.Linear(width, embed_dim)
        self.k = nn.Linear(embed_dim, embed_dim)
        self.v = nn.Linear(embed_dim, embed_dim)
        self.out = nn.Linear(embed_dim, width)
        self.scale = 1.0 / math.sqrt(embed_dim)

    def forward(
        self, feats: torch.Tensor, tokens: torch.Tensor, capture: Optional[list] = None
    ) -> torch.Tensor:
        # feats: (B, C, H, W); tokens: (L, E)
        b, c, h, w = feats.shape
        flat = feats.reshape(b, c, h * w).transpose(1, 2)  # (B, HW, C)
        q = self.q(flat)                                   # (B, HW, E)
        k = self.k(tokens)                                 # (L, E)
        v = self.v(tokens)                                 # (L, E)
        logits = q @ k.T * self.scale                      # (B, HW, L)
        attn = torch.softmax(logits, dim=-1)
        mixed = self.out(attn @ v)                         # (B, HW, C)
        if capture is not None:
            # Token-to-position view: softmax over spatial positions.
            capture.append(
                torch.softmax(logits, dim=1).transpose(1, 2).reshape(b, -1, h, w)
            )
        return feats + mixed.transpose(1, 2).reshape(b, c, h, w)


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        -math.log(1000.0) * torch.arange(half, dtype=t.dtype) / max(half - 1, 1)
    )
    args = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


@dataclass(frozen=True)
class NetConfig:
    vocab_size: int
    channels: int = 3
    width: int = 16
    embed_dim: int = 16


class ToyScoreNet(nn.Module):
    """Conv encoder, cross-attention at two resolutions, conv decoder."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        w, e = cfg.width, cfg.embed_dim
        self.null_token = cfg.vocab_size
        self.token_embed = nn.Embedding(cfg.vocab_size + 1, e)
        self.time_mlp = nn.Sequential(nn.Linear(e, w), nn.SiLU(), nn.Linear(w, w))
        self.conv_in = nn.Conv2d(cfg.channels, w, 3, padding=1)
        self.attn_full = CrossAttentionBlock(w, e)
        self.down = nn.Conv2d(w, w, 3, stride=2, padding=1)
        self.attn_half = CrossAttentionBlock(w, e)
        self.up = nn.ConvTranspose2d(w, w, 2, stride=2)
        self.conv_out = nn.Conv2d(2 * w, cfg.channels, 3, padding=1)
        self.double()

    def embed_tokens(self, tokens: Sequence[int]) -> torch.Tensor:
        ids = list(tokens) if tokens else [self.null_token]
        return self.token_embed(torch.tensor(ids, dtype=torch.long))

    def forward(
        self,
        x: torch.Tensor,
        t_frac: torch.Tensor,
        tokens: torch.Tensor,
        capture: Optional[list] = None,
    ) -> torch.Tensor:
        # x: (B, D, H, W); t_frac: (B,) in (0, 1]; tokens: (L, E)
        temb = self.time_mlp(sinusoidal_embedding(t_frac, self.cfg.embed_dim))
        h = F.silu(self.conv_in(x) + temb[:, :, None, None])
        h = self.attn_full(h, tokens, capture)
        skip = h
        h = F.silu(self.down(h))
        h = self.attn_half(h, tokens, capture)
        h = self.up(h)
        return self.conv_out(torch.cat([h, skip], dim=1))

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


class ToyScoreEstimator:
    """ScoreEstimator interface around a trained (or fresh) ToyScoreNet."""

    attention_capable = True

    def __init__(self, net: ToyScoreNet, sched: Schedule, vocab: Optional[dict] = None):
        self.net = net
        self.sched = sched
        self.vocab = dict(vocab or {})
        self.net.eval()

    def _tokens(self, cond) -> torch.Tensor:
        if cond is None:
            return self.net.embed_tokens(())
        tokens = cond.tokens if isinstance(cond, TokenSequence) else tuple(cond)
        return self.net.embed_tokens(tokens)

    def predict_eps(self, x: np.ndarray, t: int, cond) -> np.ndarray:
        xt = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float64))
        xt = xt.permute(2, 0, 1)[None]
        t_frac = torch.tensor([t / self.sched.T], dtype=torch.float64)
        with torch.no_grad():
            eps = self.net(xt, t_frac, self._tokens(cond))
        return eps[0].permute(1, 2, 0).numpy()

    def estimate(self, x: np.ndarray, t: int, cond) -> np.ndarray:
        a = self.sched.alpha_bar(t)
        return -self.predict_eps(x, t, cond) / np.sqrt(1.0 - a)

    def attend(self, x_T: np.ndarray, c) -> AttentionMap:
        h, w = x_T.shape[:2]
        xt = torch.from_numpy(np.ascontiguousarray(x_T, dtype=np.float64))
        xt = xt.permute(2, 0, 1)[None]
        t_frac = torch.tensor([1.0], dtype=torch.float64)
        capture: list = []
        with torch.no_grad():
            self.net(xt, t_frac, self._tokens(c), capture)
        maps = [m[0].numpy() for m in capture]
        return average_attention_maps(maps, h, w)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    lr: float = 2e-3
    batch_size: int = 16
    p_uncond: float = 0.1
    width: int = 16
    embed_dim: int = 16
    target_loss: Optional[float] = None
    log_every: int = 200


def _default_caption(tags: frozenset[int]) -> tuple[int, ...]:
    return tuple(sorted(tags))


def sample_training_batch(
    dist: TemplateDistribution,
    sched: Schedule,
    rng: np.random.Generator,
    batch_size: int,
    p_uncond: float,
    caption_fn: Callable[[frozenset[int]], tuple[int, ...]] = _default_caption,
):
    """Draw (x_t, t, caption, eps) tuples for denoising score matching."""
    weights = np.array([tpl.weight for tpl in dist.templates])
    batch = []
    for _ in range(batch_size):
        m = rng.choice(len(dist.templates), p=weights)
        tpl = dist.templates[m]
        t = int(rng.integers(1, sched.T + 1))
        eps = rng.standard_normal(tpl.values.shape)
        x_t = forward_diffuse(tpl.values, t, eps, sched)
        caption = () if rng.random() < p_uncond else caption_fn(tpl.tags)
        batch.append((x_t, t, caption, eps))
    return batch


def dsm_loss(
    net: ToyScoreNet, batch, sched: Schedule
) -> torch.Tensor:
    """Mean denoising score-matching loss ||eps_hat - eps||^2 over a batch."""
    total = torch.zeros((), dtype=torch.float64)
    for x_t, t, caption, eps in batch:
        xt = torch.from_numpy(np.ascontiguousarray(x_t)).permute(2, 0, 1)[None]
        t_frac = torch.tensor([t / sched.T], dtype=torch.float64)
        eps_hat = net(xt, t_frac, net.embed_tokens(caption))
        target = torch.from_numpy(np.ascontiguousarray(eps)).permute(2, 0, 1)[None]
        total = total + torch.mean((eps_hat - target) ** 2)
    return total / len(batch)


def train_toy_score(
    dist: TemplateDistribution,
    config: TrainConfig,
    seed: int = 0,
    sched: Optional[Schedule] = None,
    vocab: Optional[dict] = None,
) -> ToyScoreEstimator:
    """Train the toy network by denoising score matching on the template mixture.

    With ``steps=0`` the randomly initialised estimator is returned, still
    satisfying the full interface.
    """
    if sched is None:
        sched = build_schedule(50, "linear", 15)
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    vocab_size = 1 + max((max(t.tags) for t in dist.templates if t.tags), default=0)
    if vocab:
        vocab_size = max(vocab_size, 1 + max(vocab.values()))
    net = ToyScoreNet(
        NetConfig(
            vocab_size=vocab_size,
            channels=dist.shape[2],
            width=config.width,
            embed_dim=config.embed_dim,
        )
    )
    if net.parameter_count() > 50_000:
        raise ConfigError(f"network too large: {net.parameter_count()} parameters")

    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    losses: list[float] = []
    for step in range(config.steps):
        batch = sample_training_batch(
            dist, sched, rng, config.batch_size, config.p_uncond
        )
        loss = dsm_loss(net, batch, sched)
        if not torch.isfinite(loss):
            raise TrainingError(f"loss diverged to {loss.item()} at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.detach().item())

    if config.target_loss is not None and losses:
        tail = float(np.mean(losses[-20:]))
        if tail > config.target_loss:
            raise TrainingError(
                f"final loss {tail:.4f} above target {config.target_loss}"
            )
    est = ToyScoreEstimator(net, sched, vocab)
    est.training_losses = losses
    return est


def save_checkpoint(est: ToyScoreEstimator, path) -> None:
    """Serialise parameters plus vocabulary to a versioned .npz file."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "net": asdict(est.net.cfg),
        "schedule": {"T": est.sched.T, "t0": est.sched.t0},
        "vocab": est.vocab,
    }
    arrays = {
        f"param::{k}": v.detach().numpy() for k, v in est.net.state_dict().items()
    }
    np.savez(path, meta=json.dumps(meta), **arrays)


def load_checkpoint(path, sched: Optional[Schedule] = None) -> ToyScoreEstimator:
    data = np.load(path, allow_pickle=False)
    meta = json.loads(str(data["meta"]))
    if meta["version"] != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {meta['version']}")
    net = ToyScoreNet(NetConfig(**meta["net"]))
    state = {
        k[len("param::") :]: torch.from_numpy(data[k])
        for k in data.files
        if k.startswith("param::")
    }
    net.load_state_dict(state)
    if sched is None:
        sched = build_schedule(meta["schedule"]["T"], "linear", meta["schedule"]["t0"])
    return ToyScoreEstimator(net, sched, meta.get("vocab"))


def finite_difference_gradients(
    net: ToyScoreNet, loss_fn: Callable[[], torch.Tensor], eps: float = 1e-6
) -> dict[str, np.ndarray]:
    """Central-difference gradient of the loss for every parameter element."""
    grads: dict[str, np.ndarray] = {}
    with torch.no_grad():
        for name, p in net.named_parameters():
            g = np.zeros(p.numel())
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
                g[i] = (up - down) / (2.0 * eps)
            grads[name] = g.reshape(p.shape)
    return grads


def gradient_check(
    net: ToyScoreNet, loss_fn: Callable[[], torch.Tensor], eps: float = 1e-6
) -> float:
    """Max relative error between autograd and central-difference gradients."""
    net.zero_grad()
    loss_fn().backward()
    analytic = {n: p.grad.detach().numpy().copy() for n, p in net.named_parameters()}
    numeric = finite_difference_gradients(net, loss_fn, eps)
    worst = 0.0
    for name in analytic:
        a, n = analytic[name].ravel(), numeric[name].ravel()
        denom = np.maximum(np.abs(a) + np.abs(n), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
