"""Conditional flow matching: training targets, masked loss, guidance and ODE sampling.

The probability path interpolates from Gaussian noise ``m0`` at ``t=0``
towards the data ``m`` at ``t=1``::

    w_t = (1 - (1 - sigma_min) * t) * m0 + t * m

whose time derivative, the regression target, is ``m - (1 - sigma_min) * m0``.
Functions here work on numpy arrays and on torch tensors alike.
"""

import enum
from dataclasses import dataclass

import numpy as np

from .errors import AllMasked, ConfigError, ShapeMismatch
from .prompt import PromptPrefix
from .streams import FrameGrid, SpeakerStreamPair, TokenScheme


class Solver(enum.Enum):
    EULER = "euler"
    MIDPOINT = "midpoint"


@dataclass(frozen=True)
class FlowConfig:
    sigma_min: float = 0.1
    p_uncond: float = 0.2
    alpha: float = 1.0
    nfe: int = 32
    solver: Solver = Solver.EULER

    def __post_init__(self):
        object.__setattr__(self, "solver", Solver(self.solver))
        if not 0 < self.sigma_min < 1:
            raise ConfigError("sigma_min must lie in (0, 1)")
        if not 0 <= self.p_uncond <= 1:
            raise ConfigError("p_uncond must lie in [0, 1]")
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")
        if self.nfe < 1 or (self.solver is Solver.MIDPOINT and self.nfe < 2):
            raise ConfigError("nfe too small for the chosen solver")

    @property
    def steps(self):
        return self.nfe if self.solver is Solver.EULER else self.nfe // 2


@dataclass(frozen=True, eq=False)
class FlowSample:
    t: float
    w: object
    target: object
    mask: object


def sample_flow(m, m0, t, sigma_min=0.1, mask=None):
    if m.shape != m0.shape:
        raise ShapeMismatch(f"data {tuple(m.shape)} and noise {tuple(m0.shape)} differ")
    w = (1 - (1 - sigma_min) * t) * m0 + t * m
    target = m - (1 - sigma_min) * m0
    return FlowSample(t, w, target, mask)


def fm_loss(pred, target, mask):
    """Mean squared error over unmasked frames and all feature dimensions.

    ``mask`` has the frame shape of ``pred`` without its last axis. Masked
    frames are dropped by indexing, so they contribute exactly nothing,
    gradients included.
    """
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    if tuple(mask.shape) != tuple(pred.shape[:-1]):
        raise ShapeMismatch("mask must match the frame axes of the prediction")
    if not mask.any():
        raise AllMasked("every frame is masked out of the loss")
    diff = (pred - target)[mask]
    return (diff * diff).mean()


class _Unconditioned:
    def __repr__(self):
        return "UNCONDITIONED"


UNCONDITIONED = _Unconditioned()


def cfg_dropout(cond, p_uncond, rng):
    """Drop prompt and text together with probability ``p_uncond``."""
    if not 0 <= p_uncond <= 1:
        raise ConfigError("p_uncond must lie in [0, 1]")
    return UNCONDITIONED if rng.random() < p_uncond else cond


def cfg_field(v_cond, v_uncond, alpha):
    """Guided field ``(1 + alpha) * v_cond - alpha * v_uncond``.

    Written as ``v_cond + alpha * (v_cond - v_uncond)`` so that ``alpha = 0``
    and ``v_cond == v_uncond`` both return ``v_cond`` bit for bit.
    """
    if v_cond.shape != v_uncond.shape:
        raise ShapeMismatch("conditional and unconditional fields differ in shape")
    return v_cond + alpha * (v_cond - v_uncond)


@dataclass(frozen=True, eq=False)
class Condition:
    """What a vector field is conditioned on: a prompt prefix and body token streams."""

    prefix: PromptPrefix
    z1: np.ndarray
    z2: np.ndarray

    @property
    def prefix_len(self):
        return len(self.prefix)

    @property
    def full_z1(self):
        return np.concatenate([self.prefix.z1, self.z1])

    @property
    def full_z2(self):
        return np.concatenate([self.prefix.z2, self.z2])

    @classmethod
    def from_streams(cls, prefix, streams):
        return cls(prefix, streams.z1, streams.z2)

    @classmethod
    def null(cls, n_frames, d_features, token_scheme=TokenScheme.GENERIC_SILENCE):
        silent = SpeakerStreamPair.silent(FrameGrid(n_frames=n_frames), token_scheme)
        return cls(PromptPrefix.empty(d_features), silent.z1, silent.z2)


def ode_sample(field, context, streams, cfg=FlowConfig(), rng=None, m0=None,
               token_scheme=TokenScheme.GENERIC_SILENCE):
    """Integrate the guided flow from noise to features over the body region.

    ``field(w, t, condition)`` returns the velocity for the body frames.
    The prompt prefix is never noised or updated: it enters every call as
    clean context. Returns the body features at ``t = 1``.
    """
    n = len(streams)
    d = context.features.shape[1] if len(context) else None
    if m0 is None:
        if d is None:
            raise ShapeMismatch("feature dimension unknown: pass m0 or a non-empty context")
        rng = rng if rng is not None else np.random.default_rng()
        m0 = rng.standard_normal((n, d))
    m0 = np.asarray(m0, dtype=np.float64)
    if m0.shape[0] != n:
        raise ShapeMismatch(f"noise has {m0.shape[0]} frames, streams have {n}")
    if d is not None and m0.shape[1] != d:
        raise ShapeMismatch("noise and prompt feature dimensions differ")
    cond = Condition.from_streams(context, streams)
    null = Condition.null(n, m0.shape[1], token_scheme)

    def guided(w, t):
        v_c = field(w, t, cond)
        if cfg.alpha == 0:
            return v_c
        return cfg_field(v_c, field(w, t, null), cfg.alpha)

    return integrate(guided, m0, cfg.steps, cfg.solver)


def integrate(velocity, w0, steps, solver=Solver.EULER):
    """Fixed-step integration of ``dw/dt = velocity(w, t)`` over ``[0, 1]``."""
    solver = Solver(solver)
    w = w0
    h = 1.0 / steps
    for i in range(steps):
        t = i * h
        if solver is Solver.EULER:
            w = w + h * velocity(w, t)
        else:
            w_half = w + 0.5 * h * velocity(w, t)
            w = w + h * velocity(w_half, t + 0.5 * h)
    return w


class GaussianOracleField:
    """Exact marginal field of the path when the data are ``N(mean, spread**2)``.

    The field is affine in ``w`` with a closed-form :meth:`endpoint`. Usable
    as a drop-in ``field`` for :func:`ode_sample`. Its trajectories are too
    benign to expose the midpoint rule's order (errors cancel to third
    order); :class:`ContractingOracleField` is the order benchmark.
    """

    def __init__(self, mean, spread=0.5, sigma_min=0.1):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.spread = spread
        self.sigma_min = sigma_min

    def _beta(self, t):
        a = 1 - (1 - self.sigma_min) * t
        beta = np.sqrt(a * a + (t * self.spread) ** 2)
        dbeta = (-(1 - self.sigma_min) * a + t * self.spread**2) / beta
        return beta, dbeta

    def __call__(self, w, t, condition=None):
        beta, dbeta = self._beta(t)
        return self.mean + (dbeta / beta) * (w - t * self.mean)

    def endpoint(self, m0):
        beta, _ = self._beta(1.0)
        return self.mean + beta * m0


class ContractingOracleField:
    """Closed-form affine field with trajectories ``w(t) = t * mean + m0 / (1 + rate * t)``.

    Used to measure solver convergence order. The Gaussian field above
    happens to cancel the leading midpoint error term and converges faster
    than second order, which would hide a midpoint defect.
    """

    def __init__(self, mean, rate=1.0):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.rate = rate

    def __call__(self, w, t, condition=None):
        return self.mean - self.rate / (1 + self.rate * t) * (w - t * self.mean)

    def trajectory(self, m0, t):
        return t * self.mean + m0 / (1 + self.rate * t)

    def endpoint(self, m0):
        return self.trajectory(m0, 1.0)
