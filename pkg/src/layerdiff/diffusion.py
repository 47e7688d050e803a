"""Noise schedules, forward perturbation, and reverse-time stepping.

The reverse step is kept in *score* parameterisation throughout:

    x_{t-1} = alpha_tilde_t * x_t + beta_tilde_t * s_hat + sigma_t * eps

where ``s_hat`` approximates the score of the perturbed data distribution.
In deterministic mode the coefficients are the (eta = 0) DDIM coefficients
rewritten for the score via ``eps_hat = -sqrt(1 - alpha_bar_t) * s_hat``;
in stochastic mode they are the standard ancestral DDPM coefficients.

Timesteps are 1-based; ``t = 0`` denotes clean data and ``alpha_bar[0] = 1``.
All arithmetic is float64; quantisation happens only at image export.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, DimensionError, SchedulingError

BETA_START = 1e-4
BETA_END = 0.02

SCHEDULE_KINDS = ("linear", "scaled-linear")


def _make_betas(T: int, kind: str) -> np.ndarray:
    if kind == "linear":
        return np.linspace(BETA_START, BETA_END, T, dtype=np.float64)
    if kind == "scaled-linear":
        return np.linspace(BETA_START**0.5, BETA_END**0.5, T, dtype=np.float64) ** 2
    raise ConfigError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")


@dataclass(frozen=True)
class Schedule:
    """Variance schedule plus per-transition reverse coefficients.

    ``timestep_grid`` is strictly decreasing; transition ``i`` goes from
    ``timestep_grid[i]`` down to ``timestep_grid[i+1]`` (the last one to 0).
    ``t0`` splits sampling into a layered section (t > t0) and a general
    section (t <= t0); with t0 = T the layered section is empty.
    """

    T: int
    t0: int
    betas: np.ndarray        # (T,), betas[i] = beta_{i+1}
    alpha_bars: np.ndarray   # (T+1,), alpha_bars[0] = 1
    timestep_grid: np.ndarray  # strictly decreasing, first = T, last >= 1
    deterministic: bool
    alpha_tilde: np.ndarray  # (len(grid),) per-transition coefficients
    beta_tilde: np.ndarray
    sigma: np.ndarray
    strict_stride: bool = False

    def __post_init__(self) -> None:
        index = {int(t): i for i, t in enumerate(self.timestep_grid)}
        object.__setattr__(self, "_grid_index", index)

    def grid_index(self, t: int) -> int:
        try:
            return self._grid_index[int(t)]
        except KeyError:
            raise SchedulingError(f"timestep {t} is not on the sampling grid") from None

    def next_timestep(self, t: int) -> int:
        """Grid timestep the transition from ``t`` lands on (0 after the last)."""
        i = self.grid_index(t)
        if i + 1 < len(self.timestep_grid):
            return int(self.timestep_grid[i + 1])
        return 0

    def alpha_bar(self, t: int) -> float:
        if not 0 <= t <= self.T:
            raise SchedulingError(f"timestep {t} outside [0, {self.T}]")
        return float(self.alpha_bars[t])


def build_schedule(
    T: int,
    kind: str = "linear",
    t0: int = 1,
    *,
    num_sample_steps: Optional[int] = None,
    deterministic: bool = True,
    strict_stride: bool = False,
) -> Schedule:
    """Build a schedule with ``T`` noise scales and a section boundary ``t0``.

    ``num_sample_steps`` < T yields a strided (DDIM-style) grid.  Stochastic
    mode requires the dense grid, because the ancestral coefficients are
    single-step.
    """
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not 1 <= t0 <= T:
        raise ConfigError(f"t0 must lie in [1, {T}], got {t0}")

    betas = _make_betas(T, kind)
    alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])

    if num_sample_steps is None:
        grid = np.arange(T, 0, -1, dtype=np.int64)
    else:
        if not 1 <= num_sample_steps <= T:
            raise ConfigError(
                f"num_sample_steps must lie in [1, {T}], got {num_sample_steps}"
            )
        grid = np.unique(np.round(np.linspace(1, T, num_sample_steps)).astype(np.int64))[::-1]

    n = len(grid)
    alpha_tilde = np.empty(n)
    beta_tilde = np.empty(n)
    sigma = np.empty(n)
    for i, t_from in enumerate(grid):
        t_to = int(grid[i + 1]) if i + 1 < n else 0
        a_f = alpha_bars[t_from]
        a_t = alpha_bars[t_to]
        if deterministic:
            # DDIM (eta = 0) in score form.
            alpha_tilde[i] = np.sqrt(a_t / a_f)
            beta_tilde[i] = np.sqrt(a_t / a_f) * (1.0 - a_f) - np.sqrt(
                (1.0 - a_t) * (1.0 - a_f)
            )
            sigma[i] = 0.0
        else:
            if t_to != t_from - 1:
                raise ConfigError(
                    "stochastic mode requires a dense (stride-1) timestep grid"
                )
            beta_t = betas[t_from - 1]
            alpha_t = 1.0 - beta_t
            alpha_tilde[i] = 1.0 / np.sqrt(alpha_t)
            beta_tilde[i] = beta_t / np.sqrt(alpha_t)
            sigma[i] = np.sqrt(beta_t)

    return Schedule(
        T=T,
        t0=t0,
        betas=betas,
        alpha_bars=alpha_bars,
        timestep_grid=grid,
        deterministic=deterministic,
        alpha_tilde=alpha_tilde,
        beta_tilde=beta_tilde,
        sigma=sigma,
        strict_stride=strict_stride,
    )


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def forward_diffuse(x0: np.ndarray, t: int, eps: np.ndarray, sched: Schedule) -> np.ndarray:
    """Closed-form forward marginal x_t = sqrt(a_bar_t) x0 + sqrt(1 - a_bar_t) eps."""
    _check_same_shape(x0, eps, "forward_diffuse")
    if not 1 <= t <= sched.T:
        raise SchedulingError(f"timestep {t} outside [1, {sched.T}]")
    a = sched.alpha_bars[t]
    return np.sqrt(a) * x0 + np.sqrt(1.0 - a) * eps


def cfg_direction(s_cond: np.ndarray, s_uncond: np.ndarray, gamma: float) -> np.ndarray:
    """Classifier-free guidance: gamma * s_cond + (1 - gamma) * s_uncond."""
    _check_same_shape(s_cond, s_uncond, "cfg_direction")
    return gamma * s_cond + (1.0 - gamma) * s_uncond


def reverse_step(
    x_t: np.ndarray,
    s_hat: np.ndarray,
    t: int,
    sched: Schedule,
    noise: Optional[np.ndarray] = None,
) -> np.ndarray:
    """One reverse transition from grid timestep ``t`` using the score ``s_hat``."""
    _check_same_shape(x_t, s_hat, "reverse_step")
    i = sched.grid_index(t)
    out = sched.alpha_tilde[i] * x_t + sched.beta_tilde[i] * s_hat
    if sched.sigma[i] != 0.0:
        if noise is None:
            raise SchedulingError(f"stochastic step at t={t} requires a noise draw")
        _check_same_shape(x_t, noise, "reverse_step noise")
        out = out + sched.sigma[i] * noise
    return out


def _ddim_transport(
    x: np.ndarray, eps_hat: np.ndarray, a_from: float, a_to: float
) -> np.ndarray:
    x0_pred = (x - np.sqrt(1.0 - a_from) * eps_hat) / np.sqrt(a_from)
    return np.sqrt(a_to) * x0_pred + np.sqrt(1.0 - a_to) * eps_hat


def _check_grid_pair(sched: Schedule, hi: int, lo: int) -> None:
    if hi != 0:
        sched.grid_index(hi)
    if lo != 0:
        sched.grid_index(lo)
    if sched.strict_stride and lo != 0 and sched.next_timestep(hi) != lo:
        raise SchedulingError(
            f"transition {hi} -> {lo} is not adjacent on the strict-stride grid"
        )


def ddim_step(
    x_t: np.ndarray, eps_hat: np.ndarray, t_from: int, t_to: int, sched: Schedule
) -> np.ndarray:
    """Deterministic DDIM update from ``t_from`` down to ``t_to`` (epsilon form)."""
    _check_same_shape(x_t, eps_hat, "ddim_step")
    if t_from == t_to:
        return x_t.copy()
    if t_from < t_to:
        raise SchedulingError(f"ddim_step requires t_from > t_to, got {t_from} -> {t_to}")
    _check_grid_pair(sched, t_from, t_to)
    return _ddim_transport(x_t, eps_hat, sched.alpha_bar(t_from), sched.alpha_bar(t_to))


def ddim_invert_step(
    x_t: np.ndarray, eps_hat: np.ndarray, t_from: int, t_to: int, sched: Schedule
) -> np.ndarray:
    """Exact algebraic inverse of :func:`ddim_step` given the same ``eps_hat``."""
    _check_same_shape(x_t, eps_hat, "ddim_invert_step")
    if t_from == t_to:
        return x_t.copy()
    if t_from > t_to:
        raise SchedulingError(
            f"ddim_invert_step requires t_from < t_to, got {t_from} -> {t_to}"
        )
    _check_grid_pair(sched, t_to, t_from)
    return _ddim_transport(x_t, eps_hat, sched.alpha_bar(t_from), sched.alpha_bar(t_to))


def score_to_eps(s: np.ndarray, t: int, sched: Schedule) -> np.ndarray:
    """Convert a score estimate at timestep ``t`` to a noise estimate."""
    return -np.sqrt(1.0 - sched.alpha_bar(t)) * s


def sample(
    est,
    cond,
    sched: Schedule,
    rng: np.random.Generator,
    shape: tuple[int, int, int],
    gamma: float,
    x_T: Optional[np.ndarray] = None,
    callback: Optional[Callable[[int, np.ndarray], None]] = None,
) -> np.ndarray:
    """Plain classifier-free-guided reverse run over the whole grid.

    ``est`` must expose ``estimate(x, t, cond)`` returning the conditional
    score (``cond=None`` for the unconditional branch).  The RNG draws the
    initial latent first, then one noise field per stochastic step, so two
    runs with equal seeds are bit-identical.
    """
    x = np.asarray(x_T, dtype=np.float64) if x_T is not None else rng.standard_normal(shape)
    if x.shape != shape:
        raise DimensionError(f"x_T shape {x.shape} != requested {shape}")
    for t in sched.timestep_grid:
        t = int(t)
        s_c = est.estimate(x, t, cond)
        s_u = est.estimate(x, t, None)
        s_hat = cfg_direction(s_c, s_u, gamma)
        noise = None if sched.deterministic else rng.standard_normal(shape)
        x = reverse_step(x, s_hat, t, sched, noise)
        if callback is not None:
            callback(t, x)
    return x
