"""Client/server execution of the two federated VI protocols.

``run_algorithm1``
    Augmented-variable model. Per iteration the server turns the clients'
    ``z_j`` into ``dL0/dz_j``; each client updates its factors and sends a
    fresh ``z_j``. Two messages per client per iteration.
``run_algorithm2``
    Power-likelihood model. The server broadcasts all ``z``; clients return
    the gradients of their own likelihood term w.r.t. the other clients'
    ``z``; the server sends back per-client sums; clients update and send a
    fresh ``z_j``. Four messages per client per iteration.
``monolithic_reference``
    The same arithmetic in one process without any messages. Used as the
    equivalence oracle for the two protocols and to fit the model without
    auxiliary variables.

A client keeps the noise ``(eps_j, tau_j)`` behind the ``z_j`` it last sent;
when the server's gradient for that ``z_j`` arrives, ``theta_j`` is rebuilt
from the same ``eps_j`` so the reparameterised sample is consistent.

Shared parameters (intercept, Gaussian scale) live on the server under a
diagonal Gaussian factor. Under the power formulation the server ships its
sample with the broadcast and receives the clients' gradients for it with
their cross-gradients.
"""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .mathcore import AdamState, NumericalError, RngStream, actor_stream, adam_step
from .messages import SHARED_KEY, Message, MessageLog
from .models import Dataset, ModelSpec, SharedParams, build_blocks, loglik_aux, loglik_power_j
from .transport import Transport, make_transport
from .variational import (
    GaussianFactor,
    ThetaFactor,
    assemble,
    client_terms,
    make_aux_factor,
    shared_terms,
    true_model_terms,
)

INIT_EPOCH = 2**63
SERVER = 0


class ConfigError(ValueError):
    """Invalid combination of model, protocol and settings."""


@dataclass
class FitConfig:
    iterations: int = 1000
    aux_family: str = "mean-field"
    amortized_hidden: tuple = (16,)
    theta_diagonal: bool = False
    lr: float = 1e-3
    lr_psi: Optional[float] = None
    lr_final: Optional[float] = None
    lr_decay_start: float = 0.0
    seed: int = 0
    run_id: int = 0
    transport: str = "in-process"
    y_visibility: str = "server"
    log_path: Optional[str] = None
    keep_log: bool = False
    average_last: int = 0
    parallel: bool = False
    init_scale: float = 0.1

    def __post_init__(self):
        if self.aux_family not in ("mean-field", "amortized"):
            raise ConfigError(f"unknown auxiliary family {self.aux_family!r}")
        if self.y_visibility not in ("server", "shared"):
            raise ConfigError("y_visibility must be 'server' or 'shared'")
        if self.iterations < 0:
            raise ConfigError("iterations must be non-negative")
        self.amortized_hidden = tuple(self.amortized_hidden)


@dataclass
class FitResult:
    """Trace and final state of a fit.

    ``trace`` has one row per iteration: ``(iteration, server part,
    client part, total)``; the server part is ``L0`` (or the sum of the
    clients' weighted likelihood terms under the power formulation) plus the
    shared-parameter terms.
    """

    spec: ModelSpec
    config: FitConfig
    blocks: list
    phis: list
    psis: list
    shared: SharedParams
    shared_factor: Optional[GaussianFactor]
    trace: np.ndarray
    averaged_phis: Optional[list] = None
    averaged_shared: Optional[np.ndarray] = None
    n_messages: int = 0
    n_bytes: int = 0
    messages_per_iteration: dict = field(default_factory=dict)
    wall_time: float = 0.0
    message_log: Optional[MessageLog] = None

    def theta_mean(self, j: int, averaged: bool = True) -> np.ndarray:
        phis = self.averaged_phis if averaged and self.averaged_phis is not None else self.phis
        return phis[j].mean.copy()

    def theta_std(self, j: int, averaged: bool = True) -> np.ndarray:
        phis = self.averaged_phis if averaged and self.averaged_phis is not None else self.phis
        return phis[j].marginal_std()

    def final_elbo(self, window: int = 500) -> float:
        if len(self.trace) == 0:
            return float("nan")
        return float(np.mean(self.trace[-window:, 3]))


# ---------------------------------------------------------------------------
# Actor state shared by the federated and monolithic executors
# ---------------------------------------------------------------------------


@dataclass
class ClientState:
    actor: int
    block: object
    phi: ThetaFactor
    psi: object
    opt_phi: AdamState
    opt_psi: AdamState
    opt_local: Optional[AdamState]
    y: Optional[np.ndarray] = None
    offset: Optional[np.ndarray] = None
    bundle: object = None
    value_server: float = 0.0
    shared_grad: Optional[np.ndarray] = None
    phi_sum: Optional[np.ndarray] = None


@dataclass
class ServerState:
    shared: SharedParams
    factor: Optional[GaussianFactor]
    opt: Optional[AdamState]
    y: Optional[np.ndarray]
    offset: Optional[np.ndarray]
    u: np.ndarray = None
    value_shared: float = 0.0
    grad_shared: np.ndarray = None
    u_sum: Optional[np.ndarray] = None


def _validate(spec: ModelSpec, data: Dataset, config: FitConfig, formulation: str):
    if spec.formulation != formulation:
        raise ConfigError(f"this protocol fits the {formulation} formulation, got {spec.formulation}")
    if formulation == "power" and config.y_visibility != "shared":
        raise ConfigError("the power-likelihood protocol needs the response on every client")
    spec.validate_data(data)


def init_clients(spec: ModelSpec, data: Dataset, config: FitConfig) -> list:
    blocks = build_blocks(spec, data, stream_seed=config.seed)
    use_y = spec.formulation == "power"
    lr_psi = config.lr_psi if config.lr_psi is not None else config.lr
    clients = []
    for j, blk in enumerate(blocks):
        actor = j + 1
        phi = ThetaFactor(blk.dim, diagonal=config.theta_diagonal, init_scale=config.init_scale)
        if spec.formulation == "true":
            psi = None
            opt_psi = None
        else:
            stream = RngStream(config.seed, actor, epoch=INIT_EPOCH)
            psi = make_aux_factor(config.aux_family, data.n, use_y, stream, config.amortized_hidden)
            opt_psi = AdamState(psi.n_params, lr=lr_psi)
        opt_local = AdamState(blk.local.size, lr=config.lr) if blk.local is not None else None
        see_y = config.y_visibility == "shared" or spec.formulation == "true"
        clients.append(ClientState(
            actor=actor,
            block=blk,
            phi=phi,
            psi=psi,
            opt_phi=AdamState(phi.n_params, lr=config.lr),
            opt_psi=opt_psi,
            opt_local=opt_local,
            y=data.y if see_y else None,
            offset=data.offset,
        ))
    return clients


def init_server(spec: ModelSpec, data: Dataset, config: FitConfig) -> ServerState:
    shared = SharedParams(spec)
    factor = opt = None
    if shared.dim:
        factor = GaussianFactor(shared.dim, diagonal=True, init_scale=config.init_scale)
        opt = AdamState(factor.n_params, lr=config.lr)
    return ServerState(shared, factor, opt, data.y, data.offset)


def client_draw(c: ClientState, spec: ModelSpec, seed: int, iteration: int):
    """Draw fresh noise and build the sample (and local terms) for ``z_j``."""
    stream = actor_stream(seed, c.actor, iteration)
    eps = stream.normal(c.block.dim)
    tau = stream.normal(c.block.x.shape[0])
    y_in = c.y if c.psi.amortized and c.psi.use_y else None
    c.bundle = client_terms(c.block, c.phi, c.psi, eps, tau, spec.rho, y_in)
    return c.bundle.z


def client_apply(c: ClientState, iteration: int):
    try:
        g = assemble(c.bundle)
        d_phi = adam_step(c.opt_phi, g.phi)
        d_psi = adam_step(c.opt_psi, g.psi)
        d_loc = adam_step(c.opt_local, g.local) if c.opt_local is not None else None
    except NumericalError as exc:
        raise NumericalError(f"client {c.actor}, iteration {iteration}: {exc}") from exc
    c.phi.params += d_phi
    c.psi.params[...] += d_psi
    if d_loc is not None:
        c.block.local[...] += d_loc


def server_draw(s: ServerState, seed: int, iteration: int):
    stream = actor_stream(seed, SERVER, iteration)
    eps = stream.normal(s.shared.dim) if s.shared.dim else np.zeros(0)
    s.u, s.value_shared, s.grad_shared = shared_terms(s.shared, s.factor, eps)
    s.eps = eps
    return s.u


def server_apply(s: ServerState, g_u, iteration: int):
    if s.factor is None:
        return
    try:
        step = adam_step(s.opt, s.factor.pullback(g_u + s.grad_shared, s.eps))
    except NumericalError as exc:
        raise NumericalError(f"server, iteration {iteration}: {exc}") from exc
    s.factor.params += step


def server_grad_L0(s: ServerState, zs: list, kind: str):
    """``dL0/dz_j`` for every client plus the packed shared-parameter gradient."""
    gamma = s.shared.unpack(s.u)
    v0, dzs, (db, dls) = loglik_aux(s.y, zs, gamma, kind, s.offset, check=False)
    return v0, dzs, s.shared.pack_grad(db, dls)


def client_cross_terms(c: ClientState, spec: ModelSpec, zs: list, u, shared: SharedParams, J: int):
    """Client-side power likelihood term; returns cross-gradients by target index."""
    j = c.actor - 1
    gamma = shared.unpack(u)
    v, d_pred, cross, (db, dls) = loglik_power_j(c.y, c.bundle.pred, zs, j, gamma, spec.likelihood,
                                                 c.offset, check=False)
    c.bundle.d_pred_server = d_pred
    c.value_server = v
    c.shared_grad = shared.pack_grad(db, dls)
    return cross


def sum_cross(cross_by_sender: dict, target: int) -> np.ndarray:
    """``sum_{k != target} dL_{0,k}/dz_target`` accumulated in sender order."""
    total = None
    for k in sorted(cross_by_sender):
        if k == target:
            continue
        g = cross_by_sender[k][target]
        total = g.copy() if total is None else total + g
    return total


def sum_shared(grads_by_sender: dict, dim: int) -> np.ndarray:
    total = np.zeros(dim)
    for k in sorted(grads_by_sender):
        total = total + grads_by_sender[k]
    return total


def lr_factor(config: FitConfig, i: int) -> float:
    """Hold ``lr``, then anneal geometrically to ``lr_final`` at the last iteration.

    The anneal starts after a ``lr_decay_start`` fraction of the run.
    """
    if config.lr_final is None or config.iterations < 2:
        return 1.0
    start = int(config.lr_decay_start * config.iterations)
    span = config.iterations - start
    if i <= start or span < 2:
        return 1.0
    return (config.lr_final / config.lr) ** ((i - start - 1) / (span - 1))


def _schedule(clients, server, i, config):
    if config.lr_final is None:
        return
    f = lr_factor(config, i)
    lr_psi = config.lr_psi if config.lr_psi is not None else config.lr
    for c in clients:
        c.opt_phi.lr = config.lr * f
        if c.opt_psi is not None:
            c.opt_psi.lr = lr_psi * f
        if c.opt_local is not None:
            c.opt_local.lr = config.lr * f
    if server.opt is not None:
        server.opt.lr = config.lr * f


def _accumulate(clients, server, i, config):
    if config.average_last and i > config.iterations - config.average_last:
        for c in clients:
            c.phi_sum = c.phi.params.copy() if c.phi_sum is None else c.phi_sum + c.phi.params
        if server.factor is not None:
            server.u_sum = server.factor.params.copy() if server.u_sum is None else server.u_sum + server.factor.params


def _result(spec, config, clients, server, trace, transport=None, log=None, t0=0.0):
    averaged = averaged_shared = None
    if config.average_last and clients and clients[0].phi_sum is not None:
        k = min(config.average_last, config.iterations)
        averaged = [ThetaFactor(c.phi.dim, c.phi.diagonal, params=c.phi_sum / k) for c in clients]
        if server.u_sum is not None:
            averaged_shared = server.u_sum / k
    return FitResult(
        spec=spec,
        config=config,
        blocks=[c.block for c in clients],
        phis=[c.phi for c in clients],
        psis=[c.psi for c in clients],
        shared=server.shared,
        shared_factor=server.factor,
        trace=np.array(trace, dtype=np.float64).reshape(-1, 4),
        averaged_phis=averaged,
        averaged_shared=averaged_shared,
        n_messages=transport.n_messages if transport else 0,
        n_bytes=transport.n_bytes if transport else 0,
        messages_per_iteration=dict(transport.by_iteration) if transport else {},
        wall_time=time.perf_counter() - t0,
        message_log=log,
    )


def _map(config, fn, items):
    if config.parallel and len(items) > 1:
        with ThreadPoolExecutor(max_workers=len(items)) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _by_actor(msgs, tag, expected):
    got = {}
    for m in msgs:
        if m.tag != tag:
            raise ConfigError(f"unexpected {m.tag} while waiting for {tag}")
        got[m.actor] = m
    missing = set(expected) - set(got)
    if missing:
        raise ConfigError(f"barrier incomplete: no {tag} from {sorted(missing)}")
    return got


# ---------------------------------------------------------------------------
# Algorithm 1
# ---------------------------------------------------------------------------


def _make_transport(config: FitConfig):
    log = MessageLog(config.log_path) if (config.log_path or config.keep_log) else None
    return make_transport(config.transport, seed=config.seed + 7919, log=log), log


def run_algorithm1(spec: ModelSpec, data: Dataset, config: FitConfig,
                   transport: Optional[Transport] = None) -> FitResult:
    """Fit the augmented-variable model over a transport."""
    _validate(spec, data, config, "augmented")
    t0 = time.perf_counter()
    log = None
    if transport is None:
        transport, log = _make_transport(config)
    clients = init_clients(spec, data, config)
    server = init_server(spec, data, config)
    actors = [c.actor for c in clients]
    rid = config.run_id
    kind = spec.likelihood

    def send_z(c, i):
        z = client_draw(c, spec, config.seed, i)
        transport.send(c.actor, SERVER, Message("AuxUpdate", rid, i, c.actor, {c.actor: z}))

    for c in clients:
        send_z(c, 0)

    trace = []
    for i in range(1, config.iterations + 1):
        _schedule(clients, server, i, config)
        # server
        ups = _by_actor(transport.receive(SERVER), "AuxUpdate", actors)
        zs = [ups[a].parts[a] for a in actors]
        server_draw(server, config.seed, i)
        v0, dzs, g_u = server_grad_L0(server, zs, kind)
        server_apply(server, g_u, i)
        for a, dz in zip(actors, dzs):
            transport.send(SERVER, a, Message("ServerZGrad", rid, i, a, {a: dz}))

        # clients
        def client_phase(c):
            msg = _by_actor(transport.receive(c.actor), "ServerZGrad", [c.actor])[c.actor]
            c.bundle.d_z_server = msg.parts[c.actor]
            value = c.bundle.value_local
            client_apply(c, i)
            send_z(c, i)
            return value

        local_vals = _map(config, client_phase, clients)
        server_part = v0 + server.value_shared
        client_part = float(np.sum(local_vals))
        trace.append((i, server_part, client_part, server_part + client_part))
        _accumulate(clients, server, i, config)

    res = _result(spec, config, clients, server, trace, transport, log, t0)
    transport.close()
    return res


# ---------------------------------------------------------------------------
# Algorithm 2
# ---------------------------------------------------------------------------


def run_algorithm2(spec: ModelSpec, data: Dataset, config: FitConfig,
                   transport: Optional[Transport] = None) -> FitResult:
    """Fit the power-likelihood model over a transport (two rounds per iteration)."""
    _validate(spec, data, config, "power")
    t0 = time.perf_counter()
    log = None
    if transport is None:
        transport, log = _make_transport(config)
    clients = init_clients(spec, data, config)
    server = init_server(spec, data, config)
    actors = [c.actor for c in clients]
    J = len(clients)
    rid = config.run_id

    def send_z(c, i):
        z = client_draw(c, spec, config.seed, i)
        transport.send(c.actor, SERVER, Message("AuxUpdate", rid, i, c.actor, {c.actor: z}))

    for c in clients:
        send_z(c, 0)

    trace = []
    for i in range(1, config.iterations + 1):
        _schedule(clients, server, i, config)
        # server: broadcast z (and the shared-parameter sample)
        ups = _by_actor(transport.receive(SERVER), "AuxUpdate", actors)
        server_draw(server, config.seed, i)
        parts = {a: ups[a].parts[a] for a in actors}
        if server.shared.dim:
            parts[SHARED_KEY] = server.u
        for a in actors:
            transport.send(SERVER, a, Message("AuxBroadcast", rid, i, a, parts))

        # clients: cross-gradients of their own likelihood term
        def cross_phase(c):
            msg = _by_actor(transport.receive(c.actor), "AuxBroadcast", [c.actor])[c.actor]
            zs = [msg.parts[a] for a in actors]
            u = msg.parts.get(SHARED_KEY, np.zeros(0))
            cross = client_cross_terms(c, spec, zs, u, server.shared, J)
            out = {k + 1: g for k, g in cross.items()}
            if server.shared.dim:
                out[SHARED_KEY] = c.shared_grad
            transport.send(c.actor, SERVER, Message("CrossGrad", rid, i, c.actor, out))

        _map(config, cross_phase, clients)

        # server: per-client sums
        grads = _by_actor(transport.receive(SERVER), "CrossGrad", actors)
        cross_by_sender = {a: grads[a].parts for a in actors}
        for a in actors:
            total = sum_cross(cross_by_sender, a)
            if total is None:
                total = np.zeros(data.n)
            transport.send(SERVER, a, Message("CrossGradSum", rid, i, a, {a: total}))
        if server.shared.dim:
            g_u = sum_shared({a: grads[a].parts[SHARED_KEY] for a in actors}, server.shared.dim)
            server_apply(server, g_u, i)

        # clients: update and redraw
        def update_phase(c):
            msg = _by_actor(transport.receive(c.actor), "CrossGradSum", [c.actor])[c.actor]
            c.bundle.d_z_server = msg.parts[c.actor]
            vals = (c.value_server, c.bundle.value_local)
            client_apply(c, i)
            send_z(c, i)
            return vals

        vals = _map(config, update_phase, clients)
        server_part = float(np.sum([v[0] for v in vals])) + server.value_shared
        client_part = float(np.sum([v[1] for v in vals]))
        trace.append((i, server_part, client_part, server_part + client_part))
        _accumulate(clients, server, i, config)

    res = _result(spec, config, clients, server, trace, transport, log, t0)
    transport.close()
    return res


# ---------------------------------------------------------------------------
# Single-process reference
# ---------------------------------------------------------------------------


def monolithic_reference(spec: ModelSpec, data: Dataset, config: FitConfig) -> FitResult:
    """Run the same updates as the protocols, in one process, with no messages."""
    spec.validate_data(data)
    if spec.formulation == "power" and config.y_visibility != "shared":
        raise ConfigError("the power-likelihood model needs the response on every client")
    t0 = time.perf_counter()
    clients = init_clients(spec, data, config)
    server = init_server(spec, data, config)
    if spec.formulation == "true":
        return _monolithic_true(spec, data, config, clients, server, t0)
    J = len(clients)
    for c in clients:
        client_draw(c, spec, config.seed, 0)
    trace = []
    for i in range(1, config.iterations + 1):
        _schedule(clients, server, i, config)
        zs = [c.bundle.z for c in clients]
        server_draw(server, config.seed, i)
        if spec.formulation == "augmented":
            v0, dzs, g_u = server_grad_L0(server, zs, spec.likelihood)
            server_apply(server, g_u, i)
            for c, dz in zip(clients, dzs):
                c.bundle.d_z_server = dz
            server_part = v0 + server.value_shared
        else:
            cross_by_sender = {}
            for c in clients:
                cross = client_cross_terms(c, spec, zs, server.u, server.shared, J)
                cross_by_sender[c.actor] = {k + 1: g for k, g in cross.items()}
            for c in clients:
                total = sum_cross(cross_by_sender, c.actor)
                c.bundle.d_z_server = total if total is not None else np.zeros(data.n)
            if server.shared.dim:
                g_u = sum_shared({c.actor: c.shared_grad for c in clients}, server.shared.dim)
                server_apply(server, g_u, i)
            server_part = float(np.sum([c.value_server for c in clients])) + server.value_shared
        local_vals = []
        for c in clients:
            local_vals.append(c.bundle.value_local)
            client_apply(c, i)
            client_draw(c, spec, config.seed, i)
        client_part = float(np.sum(local_vals))
        trace.append((i, server_part, client_part, server_part + client_part))
        _accumulate(clients, server, i, config)
    return _result(spec, config, clients, server, trace, t0=t0)


def _monolithic_true(spec, data, config, clients, server, t0):
    trace = []
    kind = spec.likelihood
    for i in range(1, config.iterations + 1):
        _schedule(clients, server, i, config)
        eps = []
        for c in clients:
            eps.append(actor_stream(config.seed, c.actor, i).normal(c.block.dim))
        server_draw(server, config.seed, i)
        gamma = server.shared.unpack(server.u)
        v_lik, v_loc, g_phi, g_local, db, dls = true_model_terms(
            [c.block for c in clients], [c.phi for c in clients], eps, data.y, kind, gamma, data.offset)
        server_apply(server, server.shared.pack_grad(db, dls), i)
        for c, gp, gl in zip(clients, g_phi, g_local):
            c.phi.params += adam_step(c.opt_phi, gp)
            if c.opt_local is not None:
                c.block.local[...] += adam_step(c.opt_local, gl)
        server_part = v_lik + server.value_shared
        trace.append((i, server_part, v_loc, server_part + v_loc))
        _accumulate(clients, server, i, config)
    return _result(spec, config, clients, server, trace, t0=t0)


def fit(spec: ModelSpec, data: Dataset, config: FitConfig, algorithm: str = "auto") -> FitResult:
    """Dispatch to the protocol matching the formulation (or the monolithic executor)."""
    if algorithm == "auto":
        algorithm = {"augmented": "alg1", "power": "alg2", "true": "monolithic"}[spec.formulation]
    if algorithm == "alg1":
        return run_algorithm1(spec, data, config)
    if algorithm == "alg2":
        return run_algorithm2(spec, data, config)
    if algorithm == "monolithic":
        return monolithic_reference(spec, data, config)
    raise ConfigError(f"unknown algorithm {algorithm!r}")
