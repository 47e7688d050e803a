"""Conditional score estimation over a finite template distribution.

The toy data distribution is a weighted mixture of clean template images.
Its perturbed marginal at timestep t is a Gaussian mixture

    p_t(x | cond) = sum_m w_m N(x; sqrt(a_bar_t) u_m, (1 - a_bar_t) I)

over the templates compatible with ``cond``, so the score and the
log-density are available in closed form and serve as exact oracles for
every sampler in the package.

Conditioning is tag-based: each template carries a set of token ids, and a
token sequence selects the templates whose tag set contains every token.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence, runtime_checkable

import numpy as np
from scipy.special import logsumexp, softmax

from .diffusion import Schedule
from .errors import CapabilityError, ConditionError, DimensionError


@dataclass(frozen=True)
class TokenSequence:
    """Ordered integer token ids; the empty sequence is the null symbol."""

    tokens: tuple[int, ...]

    def __init__(self, tokens: Sequence[int] = ()):
        object.__setattr__(self, "tokens", tuple(int(t) for t in tokens))

    @property
    def is_null(self) -> bool:
        return not self.tokens

    def __len__(self) -> int:
        return len(self.tokens)

    def index_of(self, token: int) -> int:
        try:
            return self.tokens.index(int(token))
        except ValueError:
            raise ConditionError(f"token {token} not in sequence {self.tokens}") from None


NULL = TokenSequence(())


def _as_token_sequence(cond) -> TokenSequence:
    if cond is None:
        return NULL
    if isinstance(cond, TokenSequence):
        return cond
    return TokenSequence(cond)


@dataclass(frozen=True)
class Template:
    """One clean image with its prior weight, condition tags, and object support."""

    values: np.ndarray                 # (h, w, D)
    weight: float
    tags: frozenset[int]
    support: Optional[np.ndarray] = None  # (h, w) bool mask of object pixels


class TemplateDistribution:
    """Finite mixture of clean templates with tag-based conditioning."""

    def __init__(self, templates: Sequence[Template]):
        if not templates:
            raise ConditionError("template distribution must be non-empty")
        shape = templates[0].values.shape
        for m, tpl in enumerate(templates):
            if tpl.values.shape != shape:
                raise DimensionError(
                    f"template {m} shape {tpl.values.shape} != {shape}"
                )
            if tpl.weight < 0:
                raise ConditionError(f"template {m} has negative weight {tpl.weight}")
        total = sum(t.weight for t in templates)
        if abs(total - 1.0) > 1e-12:
            raise ConditionError(f"template weights sum to {total}, expected 1")
        self.templates = list(templates)
        self.shape = shape
        self._stack = np.stack([t.values for t in templates]).reshape(len(templates), -1)
        self._log_w = np.log(np.array([t.weight for t in templates]))

    def select(self, cond) -> np.ndarray:
        """Indices of templates compatible with ``cond`` (all, if null)."""
        cond = _as_token_sequence(cond)
        if cond.is_null:
            return np.arange(len(self.templates))
        wanted = set(cond.tokens)
        idx = np.array(
            [m for m, t in enumerate(self.templates) if wanted <= t.tags], dtype=np.int64
        )
        if idx.size == 0:
            raise ConditionError(f"tokens {cond.tokens} select no template")
        return idx

    def _log_terms(self, x: np.ndarray, t: int, cond, sched: Schedule) -> tuple:
        if x.shape != self.shape:
            raise DimensionError(f"x shape {x.shape} != template shape {self.shape}")
        idx = self.select(cond)
        a = sched.alpha_bar(t)
        v = 1.0 - a
        flat = x.reshape(-1)
        diff = flat[None, :] - np.sqrt(a) * self._stack[idx]
        sq = np.einsum("mi,mi->m", diff, diff)
        # Renormalised prior over the selected subset.
        log_w = self._log_w[idx] - logsumexp(self._log_w[idx])
        log_terms = log_w - 0.5 * sq / v
        return idx, a, v, diff, log_terms

    def log_density(self, x: np.ndarray, t: int, cond, sched: Schedule) -> float:
        """log p_t(x | cond), evaluated directly from the mixture."""
        idx, a, v, diff, log_terms = self._log_terms(x, t, cond, sched)
        n = x.size
        return float(logsumexp(log_terms) - 0.5 * n * np.log(2.0 * np.pi * v))

    def responsibilities(self, x: np.ndarray, t: int, cond, sched: Schedule) -> tuple:
        idx, a, v, diff, log_terms = self._log_terms(x, t, cond, sched)
        return idx, softmax(log_terms)

    def score(self, x: np.ndarray, t: int, cond, sched: Schedule) -> np.ndarray:
        """Exact score of the perturbed conditional mixture."""
        idx, a, v, diff, log_terms = self._log_terms(x, t, cond, sched)
        r = softmax(log_terms)
        grad = -(r @ diff) / v
        return grad.reshape(self.shape)


@dataclass(frozen=True)
class AttentionMap:
    """Row-stochastic token-to-position attention, rows = tokens, cols = h*w."""

    values: np.ndarray  # (n_tokens, h*w)
    height: int
    width: int

    def __post_init__(self) -> None:
        v = self.values
        if v.ndim != 2 or v.shape[1] != self.height * self.width:
            raise DimensionError(
                f"attention values {v.shape} inconsistent with {self.height}x{self.width}"
            )
        if v.shape[0] and (np.any(v < 0) or np.any(np.abs(v.sum(axis=1) - 1.0) > 1e-9)):
            raise DimensionError("attention rows must be nonnegative and sum to 1")

    def row_grid(self, i: int) -> np.ndarray:
        return self.values[i].reshape(self.height, self.width)


@runtime_checkable
class ScoreEstimator(Protocol):
    """Conditional score function with an optional attention capability."""

    attention_capable: bool

    def estimate(self, x: np.ndarray, t: int, cond) -> np.ndarray: ...

    def attend(self, x_T: np.ndarray, c) -> AttentionMap: ...


def analytic_score(
    dist: TemplateDistribution, x: np.ndarray, t: int, cond, sched: Schedule
) -> np.ndarray:
    """Exact grad_x log p_t(x | cond) of the template mixture."""
    return dist.score(x, t, cond, sched)


def analytic_attention(
    dist: TemplateDistribution, x: np.ndarray, t: int, cond, sched: Schedule
) -> AttentionMap:
    """Synthetic token-to-position attention for oracle-mode dynamic guidance.

    Row for token i is the responsibility-weighted average of the normalised
    object supports of the compatible templates carrying that token; templates
    without that token (or without a support) contribute a uniform row.  A
    null ``cond`` yields a map with zero rows (trivially row-stochastic).
    """
    cond = _as_token_sequence(cond)
    h, w, _ = dist.shape
    hw = h * w
    if cond.is_null:
        return AttentionMap(np.zeros((0, hw)), h, w)
    idx, r = dist.responsibilities(x, t, cond, sched)
    rows = np.zeros((len(cond), hw))
    uniform = np.full(hw, 1.0 / hw)
    for i, token in enumerate(cond.tokens):
        for m, resp in zip(idx, r):
            tpl = dist.templates[m]
            if token in tpl.tags and tpl.support is not None and tpl.support.any():
                ind = tpl.support.reshape(-1).astype(np.float64)
                rows[i] += resp * ind / ind.sum()
            else:
                rows[i] += resp * uniform
    return AttentionMap(rows, h, w)


class AnalyticScoreModel:
    """ScoreEstimator backed by the exact template-mixture oracle."""

    attention_capable = True

    def __init__(self, dist: TemplateDistribution, sched: Schedule):
        self.dist = dist
        self.sched = sched

    def estimate(self, x: np.ndarray, t: int, cond) -> np.ndarray:
        return self.dist.score(x, t, cond, self.sched)

    def attend(self, x_T: np.ndarray, c) -> AttentionMap:
        return analytic_attention(self.dist, x_T, int(self.sched.T), c, self.sched)


def extract_attention(est: ScoreEstimator, x_T: np.ndarray, c) -> AttentionMap:
    """Attention map at the initial step, averaged across the estimator's blocks."""
    if not getattr(est, "attention_capable", False):
        raise CapabilityError(f"{type(est).__name__} provides no attention maps")
    return est.attend(x_T, c)


def average_attention_maps(
    maps: Sequence[np.ndarray], height: int, width: int
) -> AttentionMap:
    """Average per-block maps of shape (n_tokens, h_i, w_i) at a common resolution.

    Coarser blocks are nearest-neighbour upsampled to (height, width); every
    row is renormalised so the result stays row-stochastic.
    """
    if not maps:
        raise CapabilityError("no attention maps to average")
    acc = np.zeros((maps[0].shape[0], height, width))
    for m in maps:
        if m.shape[0] != acc.shape[0]:
            raise DimensionError("attention blocks disagree on token count")
        hi, wi = m.shape[1], m.shape[2]
        rows = (np.arange(height) * hi) // height
        cols = (np.arange(width) * wi) // width
        acc += m[:, rows][:, :, cols]
    flat = acc.reshape(acc.shape[0], -1)
    sums = flat.sum(axis=1, keepdims=True)
    sums[sums == 0] = 1.0
    return AttentionMap(flat / sums, height, width)
