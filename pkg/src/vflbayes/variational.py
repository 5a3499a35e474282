"""Gaussian variational factors and sticking-the-landing gradient assembly.

Client ``j`` owns a factor ``q(theta_j)`` (parameters ``phi_j``) and a factor
for its auxiliary vector ``z_j`` (parameters ``psi_j``), either mean-field
``N(mu_z, s_z)`` or amortized ``N(mu(a), s(a))`` with ``a`` the per-row
predictor (plus ``y`` for the power formulation). Samples are written as

    theta_j = mu + L eps,        z_j = mean(a) + scale(a) * tau.

Gradients follow the STL rule: ``log q`` is differentiated through the
sampled values (``theta``, ``z`` and the amortization input) but never
through the variational parameters directly. With the noise fixed, each
gradient here is the exact derivative of

    F(phi, psi) = log p(theta, z, y) - log q_{phi0}(theta) - log q_{psi0}(z | theta)

at ``phi = phi0``, ``psi = psi0``, which is what the finite-difference
tests check.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import solve_triangular

from .mathcore import LOG_2PI, RngStream, ShapeError, sigmoid, softplus, softplus_inv
from .models import ClientBlock, log_aux_conditional
from .neural import MlpParams, MlpSpec, mlp_backward, mlp_forward, mlp_init

SCALE_FLOOR = 1e-6


class ProtocolError(RuntimeError):
    """A gradient piece that must come from another actor is missing."""


class GaussianFactor:
    """``N(mu, L L^T)`` with ``L`` lower triangular and a positive diagonal.

    ``params`` is one flat vector: ``mu``, the unconstrained diagonal
    (``L_ii = softplus(r_i) + 1e-6``) and, unless ``diagonal``, the strictly
    lower entries in row-major order.
    """

    def __init__(self, dim: int, diagonal: bool = False, init_scale: float = 0.1, params=None):
        self.dim = int(dim)
        self.diagonal = bool(diagonal)
        n_off = 0 if self.diagonal else self.dim * (self.dim - 1) // 2
        self.n_params = 2 * self.dim + n_off
        self._tril = np.tril_indices(self.dim, -1)
        if params is None:
            params = np.zeros(self.n_params)
            params[self.dim : 2 * self.dim] = softplus_inv(init_scale - SCALE_FLOOR)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.n_params,):
            raise ShapeError(f"factor expects {self.n_params} parameters, got {params.shape}")
        self.params = params

    @property
    def mean(self) -> np.ndarray:
        return self.params[: self.dim]

    @property
    def diag_raw(self) -> np.ndarray:
        return self.params[self.dim : 2 * self.dim]

    def diag(self) -> np.ndarray:
        return softplus(self.diag_raw) + SCALE_FLOOR

    def scale_matrix(self) -> np.ndarray:
        L = np.diag(self.diag())
        if not self.diagonal:
            L[self._tril] = self.params[2 * self.dim :]
        return L

    def marginal_std(self) -> np.ndarray:
        if self.diagonal:
            return self.diag()
        L = self.scale_matrix()
        return np.sqrt(np.sum(L * L, axis=1))

    def covariance(self) -> np.ndarray:
        L = self.scale_matrix()
        return L @ L.T

    def sample(self, eps) -> np.ndarray:
        eps = np.asarray(eps, dtype=np.float64)
        if self.diagonal:
            return self.mean + self.diag() * eps
        return self.mean + self.scale_matrix() @ eps

    def set_from_moments(self, mean, cov):
        """Install the factor ``N(mean, cov)`` exactly (Cholesky of ``cov``)."""
        L = np.linalg.cholesky(np.asarray(cov, dtype=np.float64))
        self.params[: self.dim] = mean
        self.params[self.dim : 2 * self.dim] = softplus_inv(np.diag(L) - SCALE_FLOOR)
        if not self.diagonal:
            self.params[2 * self.dim :] = L[self._tril]
        elif np.any(np.abs(L[self._tril]) > 0):
            raise ValueError("diagonal factor cannot represent a correlated covariance")

    def log_density(self, x) -> float:
        x = np.asarray(x, dtype=np.float64)
        d = self.diag()
        if self.diagonal:
            e = (x - self.mean) / d
        else:
            e = solve_triangular(self.scale_matrix(), x - self.mean, lower=True, check_finite=False)
        return float(-0.5 * self.dim * LOG_2PI - np.sum(np.log(d)) - 0.5 * e @ e)

    def neg_logq_grad(self, eps) -> np.ndarray:
        """``-d/dx log q(x)`` at ``x = mu + L eps`` with parameters held fixed.

        Equals ``Sigma^{-1} (x - mu) = L^{-T} eps``.
        """
        eps = np.asarray(eps, dtype=np.float64)
        if self.diagonal:
            return eps / self.diag()
        return solve_triangular(self.scale_matrix(), eps, lower=True, trans="T", check_finite=False)

    def pullback(self, g_x, eps) -> np.ndarray:
        """``(d x / d params)^T g_x`` for ``x = mu + L eps``."""
        g_x = np.asarray(g_x, dtype=np.float64)
        eps = np.asarray(eps, dtype=np.float64)
        out = np.empty(self.n_params)
        out[: self.dim] = g_x
        out[self.dim : 2 * self.dim] = g_x * eps * sigmoid(self.diag_raw)
        if not self.diagonal:
            out[2 * self.dim :] = np.outer(g_x, eps)[self._tril]
        return out

    def copy(self) -> "GaussianFactor":
        return GaussianFactor(self.dim, self.diagonal, params=self.params.copy())


class ThetaFactor(GaussianFactor):
    """Client parameter factor ``q_phi(theta_j)``."""


class AuxFactorMeanField(GaussianFactor):
    """``q_psi(z_j) = N(mu_z, s_z)`` elementwise; ignores ``theta_j``."""

    amortized = False

    def __init__(self, n: int, init_scale: float = 0.1, params=None):
        super().__init__(n, diagonal=True, init_scale=init_scale, params=params)

    def copy(self) -> "AuxFactorMeanField":
        return AuxFactorMeanField(self.dim, params=self.params.copy())


class AuxFactorAmortized:
    """``q_psi(z_j | theta_j)`` with per-row mean and scale from one shared MLP.

    The network sees ``a_i = (g_ij,)`` or ``a_i = (g_ij, y_i)`` and emits two
    heads: the mean and the pre-softplus scale.
    """

    amortized = True

    def __init__(self, spec: MlpSpec, use_y: bool, params: Optional[MlpParams] = None):
        if spec.n_out != 2:
            raise ValueError("amortized factor needs exactly two output heads")
        if spec.n_in != (2 if use_y else 1):
            raise ValueError("network input width must match the input mode")
        self.spec = spec
        self.use_y = bool(use_y)
        self.net = params if params is not None else MlpParams(spec)

    @classmethod
    def create(cls, use_y: bool, hidden=(16,), stream: Optional[RngStream] = None,
               activation: str = "tanh", init_scale: float = 0.1):
        spec = MlpSpec((2 if use_y else 1,) + tuple(hidden) + (2,), activation)
        net = mlp_init(spec, stream) if stream is not None else MlpParams(spec)
        # Start near q(z | .) = N(0, init_scale): zero the heads' last layer.
        net.weights[-1][...] *= 0.0
        net.biases[-1][1] = softplus_inv(init_scale - SCALE_FLOOR)
        return cls(spec, use_y, net)

    @property
    def params(self) -> np.ndarray:
        return self.net.flat

    @property
    def n_params(self) -> int:
        return self.spec.n_params

    def inputs(self, pred, y=None) -> np.ndarray:
        if self.use_y:
            if y is None:
                raise ValueError("this amortized factor needs the response as input")
            return np.column_stack([pred, y])
        return np.asarray(pred, dtype=np.float64)[:, None]

    def heads(self, pred, y=None):
        out, tape = mlp_forward(self.net, self.inputs(pred, y))
        raw = out[:, 1]
        return out[:, 0], softplus(raw) + SCALE_FLOOR, raw, tape

    def copy(self) -> "AuxFactorAmortized":
        return AuxFactorAmortized(self.spec, self.use_y, self.net.copy())


def make_aux_factor(kind: str, n: int, use_y: bool, stream: Optional[RngStream] = None, hidden=(16,)):
    if kind == "mean-field":
        return AuxFactorMeanField(n)
    if kind == "amortized":
        return AuxFactorAmortized.create(use_y, hidden, stream)
    raise ValueError(f"unknown auxiliary family {kind!r}")


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def sample_theta(phi: GaussianFactor, eps) -> np.ndarray:
    return phi.sample(eps)


def sample_aux(psi, pred, y, tau):
    """Draw ``z_j`` given the predictor (ignored by the mean-field family)."""
    tau = np.asarray(tau, dtype=np.float64)
    if psi.amortized:
        mu, s, _, _ = psi.heads(pred, y)
        return mu + s * tau
    return psi.mean + psi.diag() * tau


def stl_entropy_grads(factor: GaussianFactor, eps) -> np.ndarray:
    """Contribution of ``-log q`` to the gradient w.r.t. the sampled value."""
    return factor.neg_logq_grad(eps)


# ---------------------------------------------------------------------------
# Per-client terms and gradient assembly
# ---------------------------------------------------------------------------


@dataclass
class GradientBundle:
    """Everything one client needs to assemble its gradients.

    ``d_theta_direct`` holds the prior and entropy paths of ``L_j``;
    ``d_pred_local`` the paths through ``g_j`` at fixed ``z_j``;
    ``d_z_local`` the explicit ``z_j`` derivative of ``L_j``. The server
    pieces are ``d_z_server`` (``dL0/dz_j``, or the cross-client sum for the
    power formulation) and, for the power formulation, ``d_pred_server``
    (``dL_{0,j}/d g_j``).
    """

    block: ClientBlock
    phi: GaussianFactor
    psi: object
    eps: np.ndarray
    tau: np.ndarray
    theta: np.ndarray
    pred: np.ndarray
    z: np.ndarray
    d_theta_direct: np.ndarray
    d_pred_local: np.ndarray
    d_z_local: np.ndarray
    scale_raw: Optional[np.ndarray] = None
    tape: object = None
    d_z_server: Optional[np.ndarray] = None
    d_pred_server: Optional[np.ndarray] = None
    value_local: float = 0.0
    value_server: float = 0.0

    def z_upstream(self) -> np.ndarray:
        if self.d_z_server is None:
            raise ProtocolError("server gradient for z_j has not been supplied")
        return self.d_z_server + self.d_z_local


@dataclass
class ClientGradients:
    phi: np.ndarray
    psi: np.ndarray
    local: Optional[np.ndarray]


def client_terms(block: ClientBlock, phi: GaussianFactor, psi, eps, tau, rho: float, y=None) -> GradientBundle:
    """Sample ``(theta_j, z_j)`` and evaluate the client-local ELBO term.

    ``L_j = log p(z_j | theta_j; rho) + log p(theta_j) - log q(z_j | .) - log q(theta_j)``.
    """
    eps = np.asarray(eps, dtype=np.float64)
    tau = np.asarray(tau, dtype=np.float64)
    theta = phi.sample(eps)
    pred = block.predictor(theta)
    if psi.amortized:
        mu, s, raw, tape = psi.heads(pred, y)
    else:
        mu, s, raw, tape = psi.mean, psi.diag(), psi.diag_raw, None
    z = mu + s * tau

    v_cond, dz_cond, dpred_cond, _ = log_aux_conditional(z, pred, rho)
    v_prior, g_prior = block.log_prior(theta)
    v_qz = float(np.sum(-0.5 * LOG_2PI - np.log(s) - 0.5 * tau * tau))
    v_qt = phi.log_density(theta)

    d_pred = dpred_cond.copy()
    if psi.amortized:
        # explicit dependence of -log q(z | a) on the input a, at fixed z
        up = np.column_stack([-tau / s, (1.0 - tau * tau) / s * sigmoid(raw)])
        _, g_in = mlp_backward(psi.net, tape, up)
        d_pred += g_in[:, 0]

    return GradientBundle(
        block=block,
        phi=phi,
        psi=psi,
        eps=eps,
        tau=tau,
        theta=theta,
        pred=pred,
        z=z,
        d_theta_direct=g_prior + phi.neg_logq_grad(eps),
        d_pred_local=d_pred,
        d_z_local=dz_cond + tau / s,
        scale_raw=raw,
        tape=tape,
        value_local=v_cond + v_prior - v_qz - v_qt,
    )


def assemble(bundle: GradientBundle) -> ClientGradients:
    """Gradients w.r.t. ``phi_j``, ``psi_j`` and the block's point parameters."""
    gz = bundle.z_upstream()
    psi = bundle.psi
    tau = bundle.tau
    d_pred = bundle.d_pred_local.copy()
    if bundle.d_pred_server is not None:
        d_pred += bundle.d_pred_server
    if psi.amortized:
        up = np.column_stack([gz, gz * tau * sigmoid(bundle.scale_raw)])
        g_psi, g_in = mlp_backward(psi.net, bundle.tape, up)
        d_pred += g_in[:, 0]
    else:
        g_psi = psi.pullback(gz, tau)
    g_theta, g_local = bundle.block.predictor_vjp(bundle.theta, d_pred)
    g_theta = g_theta + bundle.d_theta_direct
    return ClientGradients(bundle.phi.pullback(g_theta, bundle.eps), g_psi, g_local)


def grad_phi_augmented(bundle: GradientBundle) -> np.ndarray:
    if bundle.d_pred_server is not None:
        raise ProtocolError("augmented gradient received a power-likelihood term")
    return assemble(bundle).phi


def grad_psi_augmented(bundle: GradientBundle) -> np.ndarray:
    if bundle.d_pred_server is not None:
        raise ProtocolError("augmented gradient received a power-likelihood term")
    return assemble(bundle).psi


def grad_phi_power(bundle: GradientBundle) -> np.ndarray:
    if bundle.d_pred_server is None:
        raise ProtocolError("power gradient needs dL_{0,j}/dg_j")
    return assemble(bundle).phi


def grad_psi_power(bundle: GradientBundle) -> np.ndarray:
    if bundle.d_pred_server is None:
        raise ProtocolError("power gradient needs dL_{0,j}/dg_j")
    return assemble(bundle).psi


# ---------------------------------------------------------------------------
# Shared parameters and the true model
# ---------------------------------------------------------------------------


def shared_terms(shared, factor: Optional[GaussianFactor], eps):
    """Sample ``u`` and return ``(u, log p(u) - log q(u), d/du of that)``."""
    if factor is None or shared.dim == 0:
        return np.zeros(0), 0.0, np.zeros(0)
    u = factor.sample(eps)
    v_prior, g_prior = shared.log_prior(u)
    value = v_prior - factor.log_density(u)
    return u, value, g_prior + factor.neg_logq_grad(eps)


def true_model_terms(blocks, phis, eps_list, y, kind, gamma, offset=None):
    """Single-sample ELBO integrand of the model without auxiliary variables.

    Returns ``(likelihood value, sum of local values, [d/d phi_j],
    [d/d local_j], d/db, d/dlog sigma)``.
    """
    from .models import linear_predictor, loglik_eta

    thetas = [phi.sample(e) for phi, e in zip(phis, eps_list)]
    preds = [blk.predictor(t) for blk, t in zip(blocks, thetas)]
    b, sigma = gamma
    eta = linear_predictor(np.sum(preds, axis=0), b, offset)
    v_lik, d_eta, d_ls = loglik_eta(kind, y, eta, sigma)
    value = 0.0
    g_phi, g_local = [], []
    for blk, phi, t, e in zip(blocks, phis, thetas, eps_list):
        v_p, g_p = blk.log_prior(t)
        value += v_p - phi.log_density(t)
        g_t, g_l = blk.predictor_vjp(t, d_eta)
        g_phi.append(phi.pullback(g_t + g_p + phi.neg_logq_grad(e), e))
        g_local.append(g_l)
    return v_lik, value, g_phi, g_local, float(np.sum(d_eta)), d_ls


# ---------------------------------------------------------------------------
# ELBO estimate
# ---------------------------------------------------------------------------


@dataclass
class ElboParts:
    server: float
    clients: list
    total: float


def elbo_estimate(spec, blocks, phis, psis, y, noise, offset=None, shared=None, shared_factor=None) -> ElboParts:
    """Monte Carlo ELBO with the noise supplied by the caller.

    ``noise`` is a list of samples; each sample is a dict with ``eps`` and
    ``tau`` (lists over clients) and ``u`` (shared-parameter noise). The
    estimate averages the single-sample values and reports the server part
    (``L_0`` or the sum of ``L_{0,j}``) and the client parts separately.
    """
    from .models import SharedParams, loglik_aux, loglik_power_j

    if spec.formulation == "true":
        raise ValueError("use true_model_terms for the model without auxiliary variables")
    shared = shared if shared is not None else SharedParams(spec)
    J = len(blocks)
    srv_vals, cli_vals = [], []
    for sample in noise:
        u, v_shared, _ = shared_terms(shared, shared_factor, sample.get("u", np.zeros(shared.dim)))
        gamma = shared.unpack(u)
        bundles = [
            client_terms(blocks[j], phis[j], psis[j], sample["eps"][j], sample["tau"][j], spec.rho,
                         y if psis[j].amortized and psis[j].use_y else None)
            for j in range(J)
        ]
        zs = [bd.z for bd in bundles]
        if spec.formulation == "augmented":
            v0, _, _ = loglik_aux(y, zs, gamma, spec.likelihood, offset, check=False)
        else:
            v0 = sum(loglik_power_j(y, bundles[j].pred, zs, j, gamma, spec.likelihood, offset, check=False)[0]
                     for j in range(J))
        srv_vals.append(v0 + v_shared)
        cli_vals.append([bd.value_local for bd in bundles])
    server = float(np.mean(srv_vals))
    clients = list(np.mean(np.array(cli_vals), axis=0))
    return ElboParts(server, clients, server + float(np.sum(clients)))
