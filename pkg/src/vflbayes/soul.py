"""Stochastic optimisation via unadjusted Langevin.

``z`` is treated as a hyperparameter and driven to a maximiser of
``log p(y, z; rho)`` by Robbins-Monro steps whose gradient is a Langevin
average over ``theta ~ p(theta | y, z; rho)``. The outputs are therefore a
point estimate ``z_hat`` and draws from the *conditional* posterior
``p(theta | y, z_hat; rho)``, which is narrower than the marginal one.
:class:`ConditionalSoulResult` carries that label on purpose.

Clients keep their own Langevin chains and never contact the server between
the ``M`` inner steps. Under the augmented formulation each client also owns
its ``z_j``; under the power formulation the server owns ``z`` and combines
the clients' cross pieces.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .federation import SERVER, ConfigError
from .mathcore import DomainError, NumericalError, actor_stream
from .messages import SHARED_KEY, Message, MessageLog
from .models import (
    Dataset,
    ModelSpec,
    SharedParams,
    build_blocks,
    linear_predictor,
    loglik_aux,
    loglik_eta,
    loglik_power_j,
)
from .transport import Transport, make_transport


@dataclass
class SoulConfig:
    outer_iterations: int = 5000
    inner_steps: int = 10
    h: float = 1e-3
    delta0: float = 0.1
    tau: float = 1000.0
    decreasing: bool = True
    shared_delta0: Optional[float] = None
    learn_shared: bool = True
    average_last: int = 0
    z_bound: float = 1e6
    seed: int = 0
    run_id: int = 0
    transport: str = "in-process"
    log_path: Optional[str] = None
    keep_log: bool = False

    def __post_init__(self):
        if self.inner_steps < 1:
            raise ConfigError("at least one Langevin step per outer iteration is needed")
        if self.h < 0:
            raise ConfigError("Langevin step must be non-negative")
        if self.delta0 < 0 or self.tau <= 0:
            raise ConfigError("Robbins-Monro schedule needs delta0 >= 0 and tau > 0")

    def delta(self, t: int) -> float:
        return self.delta0 / (1.0 + t / self.tau) if self.decreasing else self.delta0

    def shared_delta(self, t: int, n: int) -> float:
        d0 = self.shared_delta0 if self.shared_delta0 is not None else self.delta0 / n
        return d0 / (1.0 + t / self.tau) if self.decreasing else d0


@dataclass
class SoulState:
    z: list
    thetas: list
    u: np.ndarray
    t: int = 0


@dataclass
class ConditionalSoulResult:
    """Point estimate of ``z`` and Langevin draws of ``theta`` *given* it.

    ``theta_draws[j]`` has one row per outer iteration (the last inner draw).
    ``trace`` rows: ``(iteration, ||dlog p/dz||_2 estimate, sigma)``.
    """

    spec: ModelSpec
    config: SoulConfig
    blocks: list
    z_hat: list
    theta_draws: list
    u: np.ndarray
    shared: SharedParams
    trace: np.ndarray
    conditional: bool = True
    n_messages: int = 0
    messages_per_iteration: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def gamma(self):
        return self.shared.unpack(self.u)

    def theta_mean(self, j: int, burn: float = 0.5) -> np.ndarray:
        d = self.theta_draws[j]
        return d[int(len(d) * burn):].mean(axis=0)

    def theta_std(self, j: int, burn: float = 0.5) -> np.ndarray:
        d = self.theta_draws[j]
        return d[int(len(d) * burn):].std(axis=0, ddof=1)


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


def ula_step(theta, grad, h: float, noise) -> np.ndarray:
    """One unadjusted Langevin move ``theta + h grad + sqrt(2h) noise``."""
    if h < 0:
        raise DomainError("Langevin step must be non-negative")
    return np.asarray(theta, dtype=np.float64) + h * np.asarray(grad) + np.sqrt(2.0 * h) * np.asarray(noise)


def theta_logpost_grad(block, theta, z_j, rho, power=None):
    """Gradient in ``theta_j`` of client ``j``'s conditional log target.

    ``power`` is ``None`` for the augmented formulation, otherwise a tuple
    ``(y, z_others_sum, gamma, kind, offset, J)``.
    """
    pred = block.predictor(theta)
    d_pred = (z_j - pred) / (rho * rho)
    if power is not None:
        y, others, gamma, kind, offset, J = power
        b, sigma = gamma
        _, d_eta, _ = loglik_eta(kind, y, linear_predictor(pred + others, b, offset), sigma)
        d_pred = d_pred + d_eta / J
    g_theta, _ = block.predictor_vjp(theta, d_pred)
    return g_theta + block.log_prior_grad(theta)


def run_chain(block, theta0, z_j, rho, h, noise, power=None) -> np.ndarray:
    """``len(noise)`` Langevin steps; returns the draws, one per row."""
    draws = np.empty((len(noise), block.dim))
    theta = np.asarray(theta0, dtype=np.float64)
    for m, xi in enumerate(noise):
        theta = ula_step(theta, theta_logpost_grad(block, theta, z_j, rho, power), h, xi)
        draws[m] = theta
    return draws


def soul_client_piece(block, samples, z_j, rho) -> np.ndarray:
    """Monte Carlo average of ``d/dz_j log p(z_j | theta_j; rho)``."""
    samples = np.atleast_2d(samples)
    if samples.shape[0] == 0:
        raise DomainError("need at least one theta draw")
    # linear in the predictor, so average the predictors first
    mean_pred = np.mean([block.predictor(th) for th in samples], axis=0)
    return (mean_pred - np.asarray(z_j, dtype=np.float64)) / (rho * rho)


def soul_z_grad_augmented(blocks, samples, y, z, gamma, rho, kind, offset=None) -> list:
    """Estimate of ``d/dz_j log p(y, z; rho)`` for every client (augmented model)."""
    if any(np.atleast_2d(s).shape[0] == 0 for s in samples):
        raise DomainError("need at least one theta draw per client")
    _, dzs, _ = loglik_aux(y, z, gamma, kind, offset, check=False)
    return [dzs[j] + soul_client_piece(blocks[j], samples[j], z[j], rho) for j in range(len(blocks))]


def soul_z_grad_power(block, j: int, samples, y, z, gamma, rho, kind, offset=None) -> dict:
    """Client ``j``'s pieces for the power model, keyed by 0-based target client.

    Entry ``k != j`` is the average of ``d/dz_k (1/J) log p(y | theta_j, z_{-j})``;
    entry ``j`` is the average of ``d/dz_j log p(z_j | theta_j; rho)``.
    """
    samples = np.atleast_2d(samples)
    if samples.shape[0] == 0:
        raise DomainError("need at least one theta draw")
    J = len(z)
    out = {k: np.zeros_like(z[j]) for k in range(J) if k != j}
    for th in samples:
        _, _, cross, _ = loglik_power_j(y, block.predictor(th), z, j, gamma, kind, offset, check=False)
        for k in out:
            out[k] += cross[k]
    for k in out:
        out[k] /= samples.shape[0]
    out[j] = soul_client_piece(block, samples, z[j], rho)
    return out


def aggregate_power(pieces: dict, J: int) -> list:
    """Server-side sums: for each target, own piece plus the others' cross pieces.

    ``pieces`` maps 0-based sender to the dict from :func:`soul_z_grad_power`.
    Sums run in ascending sender order.
    """
    missing = set(range(J)) - set(pieces)
    if missing:
        raise ConfigError(f"missing SOUL contribution from client(s) {sorted(k + 1 for k in missing)}")
    out = []
    for target in range(J):
        total = pieces[target][target].copy()
        for sender in sorted(pieces):
            if sender != target:
                total = total + pieces[sender][target]
        out.append(total)
    return out


def map_prior_grad(shared: SharedParams, u) -> np.ndarray:
    """Gradient in ``u`` of ``log p(b) + log p(sigma)`` (no change-of-variable term).

    Updating ``log sigma`` along this direction keeps the stationary points
    of the density in ``sigma``.
    """
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    g = np.zeros(shared.dim)
    for i, name in enumerate(shared.names):
        if name == "b":
            g[i] = -u[i]
        elif shared.spec.sigma_prior == "halfnormal":
            g[i] = -np.exp(2.0 * u[i])
    return g


def soul_client_shared_piece(block, j: int, samples, y, z, gamma, kind, shared, offset=None) -> np.ndarray:
    """Average over draws of ``d/du (1/J) log p(y | theta_j, z_{-j}, gamma)``."""
    samples = np.atleast_2d(samples)
    acc = np.zeros(shared.dim)
    for th in samples:
        _, _, _, (db, dls) = loglik_power_j(y, block.predictor(th), z, j, gamma, kind, offset, check=False)
        acc += shared.pack_grad(db, dls)
    return acc / samples.shape[0]


def soul_shared_sigma_grad(shared: SharedParams, u, likelihood_pieces) -> np.ndarray:
    """Total shared-parameter gradient (log scale for sigma).

    ``likelihood_pieces`` is one likelihood gradient (augmented model) or
    the clients' averaged pieces (power model, already weighted by ``1/J``).
    Divide the ``log_sigma`` entry by ``sigma`` for ``d/d sigma``.
    """
    total = map_prior_grad(shared, u)
    for piece in likelihood_pieces:
        total = total + piece
    return total


# ---------------------------------------------------------------------------
# Closed-form oracle for the linear-Gaussian model
# ---------------------------------------------------------------------------


def joint_mode_linear(data: Dataset, spec: ModelSpec, sigma: float, b: float = 0.0):
    """Mode of the joint Gaussian ``p(theta, z | y)`` for the linear model.

    For a Gaussian the mode of the ``z`` marginal is the ``z`` block of the
    joint mode, so this gives the conditional MAP that SOUL targets.
    Returns ``(theta_blocks, z_blocks)``.
    """
    if spec.family != "linear-gaussian" or spec.formulation not in ("augmented", "power"):
        raise ConfigError("closed-form mode needs the linear-Gaussian augmented or power model")
    X = data.blocks
    J = len(X)
    n = data.n
    ps = [x.shape[1] for x in X]
    P = sum(ps)
    dim = P + J * n
    t_off = np.cumsum([0] + ps)
    prec = np.zeros((dim, dim))
    rhs = np.zeros(dim)
    rho2 = spec.rho**2
    y = data.y - b - (data.offset if data.offset is not None else 0.0)

    def add(weight, A, c):
        nonlocal prec, rhs
        prec += weight * A.T @ A
        rhs += weight * A.T @ c

    def zcols(k):
        return slice(P + k * n, P + (k + 1) * n)

    eye = np.eye(n)
    for j in range(J):
        # log N(z_j; X_j theta_j, rho)
        A = np.zeros((n, dim))
        A[:, zcols(j)] = eye
        A[:, t_off[j]:t_off[j + 1]] = -X[j]
        add(1.0 / rho2, A, np.zeros(n))
        s = spec.client_prior_scale(j)
        A = np.zeros((ps[j], dim))
        A[:, t_off[j]:t_off[j + 1]] = np.eye(ps[j])
        add(1.0 / s**2, A, np.zeros(ps[j]))
    if spec.formulation == "augmented":
        A = np.zeros((n, dim))
        for k in range(J):
            A[:, zcols(k)] = eye
        add(1.0 / sigma**2, A, y)
    else:
        for j in range(J):
            A = np.zeros((n, dim))
            A[:, t_off[j]:t_off[j + 1]] = X[j]
            for k in range(J):
                if k != j:
                    A[:, zcols(k)] = eye
            add(1.0 / (J * sigma**2), A, y)
    v = np.linalg.solve(prec, rhs)
    thetas = [v[t_off[j]:t_off[j + 1]] for j in range(J)]
    zs = [v[zcols(k)] for k in range(J)]
    return thetas, zs


def conditional_map_augmented(data: Dataset, spec: ModelSpec, sigma: float, b: float = 0.0) -> list:
    """``z`` maximising ``log p(y | z) + log p(z)`` with ``theta`` integrated out.

    Uses the per-client marginal ``z_j ~ N(0, s_j^2 X_j X_j^T + rho^2 I)``.
    """
    X = data.blocks
    J, n = len(X), data.n
    y = data.y - b - (data.offset if data.offset is not None else 0.0)
    S = np.tile(np.eye(n), (1, J))
    prec = S.T @ S / sigma**2
    for j, x in enumerate(X):
        C = spec.client_prior_scale(j) ** 2 * x @ x.T + spec.rho**2 * np.eye(n)
        prec[j * n:(j + 1) * n, j * n:(j + 1) * n] += np.linalg.inv(C)
    z = np.linalg.solve(prec, S.T @ y / sigma**2)
    return [z[j * n:(j + 1) * n] for j in range(J)]


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------


def _check(z, u, bound, t):
    for j, zj in enumerate(z):
        m = float(np.max(np.abs(zj))) if zj.size else 0.0
        if not np.isfinite(m) or m > bound:
            raise NumericalError(f"SOUL diverged at iteration {t}: max |z_{j + 1}| = {m:.3g} exceeds {bound:.3g}; "
                                 "reduce delta0 or h")
    if u.size and not np.all(np.isfinite(u)):
        raise NumericalError(f"SOUL diverged at iteration {t}: shared parameters not finite")


def _noise(config, actor, t, M, p):
    return actor_stream(config.seed, actor, t).normal(M * p).reshape(M, p)


def run_soul(spec: ModelSpec, data: Dataset, config: SoulConfig,
             transport: Optional[Transport] = None, z0=None, u0=None) -> ConditionalSoulResult:
    """Fit ``z_hat`` and conditional ``theta`` draws over a transport."""
    if spec.formulation not in ("augmented", "power"):
        raise ConfigError("SOUL needs the augmented or power formulation")
    spec.validate_data(data)
    blocks = build_blocks(spec, data, stream_seed=config.seed)
    if any(b.local is not None for b in blocks):
        raise ConfigError("SOUL does not handle point-estimated block parameters")
    t0 = time.perf_counter()
    log = None
    if transport is None:
        log = MessageLog(config.log_path) if (config.log_path or config.keep_log) else None
        transport = make_transport(config.transport, seed=config.seed + 7919, log=log)

    J, n = len(blocks), data.n
    y, offset, kind, rho = data.y, data.offset, spec.likelihood, spec.rho
    shared = SharedParams(spec)
    actors = list(range(1, J + 1))
    rid = config.run_id
    M = config.inner_steps
    learn_u = config.learn_shared and shared.dim > 0

    thetas = [np.zeros(b.dim) for b in blocks]
    z = [np.array(z0[j], dtype=np.float64) if z0 is not None else b.predictor(thetas[j])
         for j, b in enumerate(blocks)]
    u = np.zeros(shared.dim) if u0 is None else np.array(u0, dtype=np.float64)
    draws = [[] for _ in blocks]
    z_sum = [None] * J
    trace = []

    # warm start: clients announce z_j
    for j, a in enumerate(actors):
        transport.send(a, SERVER, Message("AuxUpdate", rid, 0, a, {a: z[j]}))
    srv_z = [None] * J
    for m in transport.receive(SERVER):
        srv_z[m.actor - 1] = m.parts[m.actor]

    for t in range(1, config.outer_iterations + 1):
        delta = config.delta(t)
        gamma = shared.unpack(u)
        if spec.formulation == "augmented":
            _, dzs, (db, dls) = loglik_aux(y, srv_z, gamma, kind, offset, check=False)
            for j, a in enumerate(actors):
                transport.send(SERVER, a, Message("ServerZGrad", rid, t, a, {a: dzs[j]}))
            if learn_u:
                g_u = soul_shared_sigma_grad(shared, u, [shared.pack_grad(db, dls)])
                u = u + config.shared_delta(t, n) * g_u
            gnorm2 = 0.0
            for j, a in enumerate(actors):
                msg = transport.receive(a)[0]
                noise = _noise(config, a, t, M, blocks[j].dim)
                s = run_chain(blocks[j], thetas[j], z[j], rho, config.h, noise)
                thetas[j] = s[-1]
                draws[j].append(s[-1].copy())
                g = msg.parts[a] + soul_client_piece(blocks[j], s, z[j], rho)
                gnorm2 += float(g @ g)
                z[j] = z[j] + delta * g
                transport.send(a, SERVER, Message("AuxUpdate", rid, t, a, {a: z[j]}))
            for m in transport.receive(SERVER):
                srv_z[m.actor - 1] = m.parts[m.actor]
        else:
            parts = {a: srv_z[j] for j, a in enumerate(actors)}
            if shared.dim:
                parts[SHARED_KEY] = u
            for a in actors:
                transport.send(SERVER, a, Message("AuxBroadcast", rid, t, a, parts))
            for j, a in enumerate(actors):
                msg = transport.receive(a)[0]
                zc = [msg.parts[k] for k in actors]
                uc = msg.parts.get(SHARED_KEY, np.zeros(0))
                gc = shared.unpack(uc)
                others = np.sum([zc[k] for k in range(J) if k != j], axis=0) if J > 1 else np.zeros(n)
                noise = _noise(config, a, t, M, blocks[j].dim)
                s = run_chain(blocks[j], thetas[j], zc[j], rho, config.h, noise,
                              power=(y, others, gc, kind, offset, J))
                thetas[j] = s[-1]
                draws[j].append(s[-1].copy())
                pieces = soul_z_grad_power(blocks[j], j, s, y, zc, gc, rho, kind, offset)
                transport.send(a, SERVER, Message("CrossGrad", rid, t, a, {k + 1: v for k, v in pieces.items()}))
                if learn_u:
                    sp = soul_client_shared_piece(blocks[j], j, s, y, zc, gc, kind, shared, offset)
                    transport.send(a, SERVER, Message("SigmaGrad", rid, t, a, {SHARED_KEY: sp}))
            pieces, sigma_pieces = {}, {}
            for m in transport.receive(SERVER):
                if m.tag == "CrossGrad":
                    pieces[m.actor - 1] = {k - 1: v for k, v in m.parts.items()}
                else:
                    sigma_pieces[m.actor] = m.parts[SHARED_KEY]
            grads = aggregate_power(pieces, J)
            gnorm2 = float(sum(g @ g for g in grads))
            srv_z = [srv_z[j] + delta * grads[j] for j in range(J)]
            z = srv_z
            if learn_u:
                g_u = soul_shared_sigma_grad(shared, u, [sigma_pieces[a] for a in sorted(sigma_pieces)])
                u = u + config.shared_delta(t, n) * g_u
        _check(z, u, config.z_bound, t)
        if config.average_last and t > config.outer_iterations - config.average_last:
            z_sum = [zj.copy() if zs is None else zs + zj for zs, zj in zip(z_sum, z)]
        trace.append((t, np.sqrt(gnorm2), shared.unpack(u)[1]))

    if config.average_last and z_sum[0] is not None:
        k = min(config.average_last, config.outer_iterations)
        z_hat = [zs / k for zs in z_sum]
    else:
        z_hat = [zj.copy() for zj in z]
    res = ConditionalSoulResult(
        spec=spec,
        config=config,
        blocks=blocks,
        z_hat=z_hat,
        theta_draws=[np.array(d).reshape(-1, b.dim) for d, b in zip(draws, blocks)],
        u=u,
        shared=shared,
        trace=np.array(trace).reshape(-1, 3),
        n_messages=transport.n_messages,
        messages_per_iteration=dict(transport.by_iteration),
        wall_time=time.perf_counter() - t0,
    )
    transport.close()
    return res
