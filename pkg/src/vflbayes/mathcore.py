"""Numeric primitives shared by every other module.

Gaussian log-densities with analytic gradients, counter-based random streams
and the Adam recurrence. Everything works on float64 numpy arrays.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

LOG_2PI = float(np.log(2.0 * np.pi))

# Each Philox block yields four 64-bit words.
WORDS_PER_BLOCK = 4


class ShapeError(ValueError):
    """Operands have incompatible dimensions."""


class DomainError(ValueError):
    """An argument lies outside the domain of the function."""


class NumericalError(FloatingPointError):
    """A non-finite value reached a place that requires finite input."""


def as_vec(x) -> np.ndarray:
    return np.atleast_1d(np.asarray(x, dtype=np.float64))


def _check_gaussian_args(x, mean, scale):
    x = as_vec(x)
    mean = as_vec(mean)
    scale = as_vec(scale)
    if mean.shape != x.shape:
        raise ShapeError(f"x has shape {x.shape} but mean has shape {mean.shape}")
    if scale.shape not in ((1,), x.shape):
        raise ShapeError(f"scale of shape {scale.shape} does not broadcast to {x.shape}")
    if np.any(~(scale > 0)):
        raise DomainError("Gaussian scale must be strictly positive")
    return x, mean, scale


def gaussian_logpdf(x, mean, scale) -> float:
    """Sum of independent normal log-densities.

    ``scale`` is a standard deviation, either a scalar or one entry per
    component of ``x``.
    """
    x, mean, scale = _check_gaussian_args(x, mean, scale)
    r = (x - mean) / scale
    logs = np.broadcast_to(np.log(scale), x.shape)
    return float(np.sum(-0.5 * LOG_2PI - logs - 0.5 * r * r))


def gaussian_logpdf_grads(x, mean, scale):
    """Gradients of :func:`gaussian_logpdf` w.r.t. ``x``, ``mean`` and ``scale``.

    Returns three arrays shaped like ``x``; the scale gradient is elementwise
    even when a scalar scale was passed, so callers sum it themselves.
    """
    x, mean, scale = _check_gaussian_args(x, mean, scale)
    d = x - mean
    s2 = scale * scale
    d_mean = d / s2
    d_x = -d_mean
    d_scale = d * d / (s2 * scale) - 1.0 / scale
    return d_x, d_mean, np.broadcast_to(d_scale, x.shape).copy()


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


def softplus_grad(x):
    """Derivative of softplus, i.e. the logistic sigmoid."""
    return sigmoid(x)


def softplus_inv(y):
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise DomainError("softplus inverse needs positive input")
    # log(expm1(y)) written to stay accurate for large y
    return y + np.log(-np.expm1(-y))


def sigmoid(x):
    return expit(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------


@dataclass
class RngStream:
    """Counter-based stream of standard normal draws.

    A stream is identified by ``(seed, stream_id)``, which becomes the Philox
    key, and a ``block`` counter. The same triple always yields the same
    values. Drawing ``n`` normals consumes ``ceil(n / 4)`` Philox blocks and
    advances ``counter`` by exactly that amount.

    ``epoch`` occupies the second counter word, so streams for different
    iterations of the same actor never overlap.
    """

    seed: int
    stream_id: int
    epoch: int = 0
    counter: int = 0

    def __post_init__(self):
        for name in ("seed", "stream_id", "epoch", "counter"):
            v = getattr(self, name)
            if not 0 <= int(v) < 2**64:
                raise DomainError(f"{name}={v} does not fit in an unsigned 64-bit word")

    def _bitgen(self) -> np.random.Philox:
        # a generator left exactly at our counter continues the same sequence
        cached = self.__dict__.get("_cache")
        if cached is not None and cached[0] == (self.seed, self.stream_id, self.epoch, self.counter):
            st = cached[1].state
            if st["buffer_pos"] == WORDS_PER_BLOCK and int(st["state"]["counter"][0]) == self.counter:
                return cached[1]
        return np.random.Philox(
            key=np.array([self.seed, self.stream_id], dtype=np.uint64),
            counter=np.array([self.counter, self.epoch, 0, 0], dtype=np.uint64),
        )

    def _remember(self, bg: np.random.Philox) -> None:
        self.__dict__["_cache"] = ((self.seed, self.stream_id, self.epoch, self.counter), bg)

    def normal(self, n: int) -> np.ndarray:
        """Draw ``n`` i.i.d. N(0, 1) values (Box-Muller on Philox words)."""
        n = int(n)
        if n < 1:
            raise DomainError("need at least one draw")
        blocks = -(-n // WORDS_PER_BLOCK)
        bg = self._bitgen()
        # Philox increments its counter before producing a block, so the
        # first block used is counter+1; consumption is still one block per
        # four words and disjoint across calls.
        raw = bg.random_raw(blocks * WORDS_PER_BLOCK)
        self.counter += blocks
        self._remember(bg)
        u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
        u1, u2 = u[0::2], u[1::2]
        rad = np.sqrt(-2.0 * np.log(u1))
        ang = 2.0 * np.pi * u2
        out = np.empty(2 * rad.size)
        out[0::2] = rad * np.cos(ang)
        out[1::2] = rad * np.sin(ang)
        return out[:n]

    def uniform_int(self, low: int, high: int, n: int) -> np.ndarray:
        """``n`` integers drawn uniformly from ``[low, high]`` inclusive."""
        blocks = -(-int(n) // WORDS_PER_BLOCK)
        raw = self._bitgen().random_raw(blocks * WORDS_PER_BLOCK)[:n]
        self.counter += blocks
        span = int(high) - int(low) + 1
        u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
        return (low + np.floor(u * span)).astype(np.int64)

    def generator(self) -> np.random.Generator:
        """A numpy Generator seeded from this stream; consumes one block."""
        g = np.random.Generator(self._bitgen())
        self.counter += 1
        return g


def rng_standard_normal(stream: RngStream, n: int) -> np.ndarray:
    return stream.normal(n)


def actor_stream(seed: int, actor: int, iteration: int) -> RngStream:
    """Stream owned by one protocol actor for one iteration.

    Actor 0 is the server; client ``j`` (1-based) is actor ``j``.
    """
    return RngStream(seed=seed, stream_id=actor, epoch=iteration)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Moment estimates for one flat parameter vector."""

    dim: int
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray = field(default=None)
    v: np.ndarray = field(default=None)
    t: int = 0

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.dim)
        if self.v is None:
            self.v = np.zeros(self.dim)


def adam_step(state: AdamState, grad, ascent: bool = True) -> np.ndarray:
    """Advance ``state`` by one step and return the additive parameter update.

    With ``ascent`` the update moves along ``grad`` (ELBO maximisation);
    otherwise against it.
    """
    g = as_vec(grad)
    if g.shape != (state.dim,):
        raise ShapeError(f"gradient has shape {g.shape}, optimizer expects ({state.dim},)")
    if not np.isfinite(g.sum()) and not np.all(np.isfinite(g)):
        bad = np.flatnonzero(~np.isfinite(g))
        raise NumericalError(f"non-finite gradient at indices {bad[:10].tolist()}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    state.m = b1 * state.m + (1.0 - b1) * g
    state.v = b2 * state.v + (1.0 - b2) * (g * g)
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    step = (state.lr / c1) * state.m / (np.sqrt(state.v / c2) + state.eps)
    return step if ascent else -step
