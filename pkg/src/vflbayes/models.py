"""Target densities for vertically partitioned regression models.

A model is a response ``y`` plus one covariate block per client. Client ``j``
owns parameters ``theta_j`` and computes a predictor ``g_j(x_j, theta_j)``;
the server owns the shared parameters (intercept ``b``, Gaussian scale
``sigma``). Three formulations are supported:

``true``
    ``y ~ p(y | b + offset + sum_j g_j)``.
``augmented``
    ``y ~ p(y | b + offset + sum_j z_j)`` with ``z_j ~ N(g_j, rho)``.
``power``
    ``(1/J) sum_j log p(y | b + offset + g_j + sum_{k != j} z_k)`` with the
    same conditional for ``z_j``.

All log-densities come with analytic gradients.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import gammaln

from .mathcore import (
    LOG_2PI,
    DomainError,
    RngStream,
    ShapeError,
    gaussian_logpdf,
    sigmoid,
)
from .neural import MlpParams, MlpSpec, mlp_backward, mlp_forward, mlp_init

FAMILIES = ("linear-gaussian", "logistic", "poisson-multilevel", "splitnn-bernoulli")
FORMULATIONS = ("true", "augmented", "power")

LOG2 = float(np.log(2.0))


class ModelError(ValueError):
    """Inconsistent model specification or data."""


# ---------------------------------------------------------------------------
# Data container
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    """Response plus vertically partitioned covariates.

    ``group`` holds 0-based level labels (``0 .. n_levels - 1``).
    """

    y: np.ndarray
    blocks: list
    offset: Optional[np.ndarray] = None
    group: Optional[np.ndarray] = None
    n_levels: Optional[int] = None
    truths: dict = field(default_factory=dict)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64)
        self.blocks = [np.atleast_2d(np.asarray(b, dtype=np.float64)) for b in self.blocks]
        n = self.y.shape[0]
        for j, b in enumerate(self.blocks):
            if b.shape[0] != n:
                raise ShapeError(f"block {j} has {b.shape[0]} rows, response has {n}")
        if self.offset is not None:
            self.offset = np.asarray(self.offset, dtype=np.float64)
            if self.offset.shape != (n,):
                raise ShapeError("offset must have one entry per observation")
        if self.group is not None:
            self.group = np.asarray(self.group, dtype=np.int64)
            if self.group.shape != (n,):
                raise ShapeError("group must have one entry per observation")
            if self.n_levels is None:
                self.n_levels = int(self.group.max()) + 1
            if self.group.min() < 0 or self.group.max() >= self.n_levels:
                raise ModelError(f"group labels must lie in [0, {self.n_levels})")

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def n_clients(self) -> int:
        return len(self.blocks)

    @property
    def block_sizes(self) -> list:
        return [b.shape[1] for b in self.blocks]

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(
            y=self.y[rows],
            blocks=[b[rows] for b in self.blocks],
            offset=None if self.offset is None else self.offset[rows],
            group=None if self.group is None else self.group[rows],
            n_levels=self.n_levels,
            truths=dict(self.truths),
        )


# ---------------------------------------------------------------------------
# Model specification
# ---------------------------------------------------------------------------


@dataclass
class ModelSpec:
    """Which model to fit.

    ``sigma`` fixes the Gaussian noise scale of the linear family; ``None``
    means it is learned on the server. ``prior_scale`` is the standard
    deviation of the N(0, s) prior on linear coefficients and split-network
    output weights, one value for all clients or one per client.
    """

    family: str
    formulation: str = "augmented"
    rho: Optional[float] = 1.0
    intercept: bool = True
    sigma: Optional[float] = None
    sigma_prior: str = "halfnormal"
    prior_scale: object = 1.0
    feature_widths: Sequence[int] = (8, 8, 2)
    feature_activation: str = "tanh"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ModelError(f"unknown family {self.family!r}")
        if self.formulation not in FORMULATIONS:
            raise ModelError(f"unknown formulation {self.formulation!r}")
        if self.formulation == "true":
            self.rho = None
        elif self.rho is None or not self.rho > 0:
            raise ModelError("rho > 0 is required for the augmented and power formulations")
        if self.family != "linear-gaussian" and self.sigma is not None:
            raise ModelError("sigma only applies to the linear-gaussian family")
        if self.sigma is not None and not self.sigma > 0:
            raise ModelError("sigma must be positive")
        if self.sigma_prior not in ("halfnormal", "flat"):
            raise ModelError(f"unknown sigma prior {self.sigma_prior!r}")
        self.feature_widths = tuple(int(w) for w in self.feature_widths)

    @property
    def likelihood(self) -> str:
        return {
            "linear-gaussian": "gaussian",
            "logistic": "bernoulli",
            "poisson-multilevel": "poisson",
            "splitnn-bernoulli": "bernoulli",
        }[self.family]

    @property
    def learns_sigma(self) -> bool:
        return self.family == "linear-gaussian" and self.sigma is None

    def client_prior_scale(self, j: int) -> float:
        if np.ndim(self.prior_scale) == 0:
            return float(self.prior_scale)
        return float(self.prior_scale[j])

    def validate_data(self, data: Dataset) -> None:
        y = data.y
        if self.likelihood == "bernoulli" and not np.all((y == 0) | (y == 1)):
            raise ModelError("Bernoulli response must be 0/1")
        if self.likelihood == "poisson":
            if np.any(y < 0) or np.any(y != np.round(y)):
                raise ModelError("Poisson response must be non-negative counts")
            if data.offset is None or data.group is None:
                raise ModelError("poisson-multilevel needs an offset and group labels")

    def to_dict(self) -> dict:
        ps = self.prior_scale
        return {
            "family": self.family,
            "formulation": self.formulation,
            "rho": self.rho,
            "intercept": self.intercept,
            "sigma": self.sigma,
            "sigma_prior": self.sigma_prior,
            "prior_scale": ps if np.ndim(ps) == 0 else list(ps),
            "feature_widths": list(self.feature_widths),
            "feature_activation": self.feature_activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


# ---------------------------------------------------------------------------
# Likelihoods on the linear predictor
# ---------------------------------------------------------------------------


def loglik_eta(kind: str, y, eta, sigma: float = 1.0):
    """Log-likelihood of ``y`` given linear predictor ``eta``.

    Returns ``(value, d/d eta, d/d log sigma)``; the last entry is zero for
    non-Gaussian likelihoods.
    """
    if kind == "bernoulli":
        value = np.sum(y * eta - np.logaddexp(0.0, eta))
        return float(value), y - sigmoid(eta), 0.0
    if kind == "poisson":
        rate = np.exp(eta)
        value = np.sum(y * eta - rate - gammaln(y + 1.0))
        return float(value), y - rate, 0.0
    if kind == "gaussian":
        r = y - eta
        s2 = sigma * sigma
        value = np.sum(-0.5 * LOG_2PI - np.log(sigma) - 0.5 * r * r / s2)
        d_logsigma = float(np.sum(r * r) / s2 - y.shape[0])
        return float(value), r / s2, d_logsigma
    raise ModelError(f"unknown likelihood {kind!r}")


def loglik_rows(kind: str, y, eta, sigma: float = 1.0) -> np.ndarray:
    """Per-observation log-likelihood (no reduction)."""
    if kind == "bernoulli":
        return y * eta - np.logaddexp(0.0, eta)
    if kind == "poisson":
        return y * eta - np.exp(eta) - gammaln(y + 1.0)
    if kind == "gaussian":
        r = y - eta
        return -0.5 * LOG_2PI - np.log(sigma) - 0.5 * r * r / (sigma * sigma)
    raise ModelError(f"unknown likelihood {kind!r}")


def _check_response(kind, y):
    if kind == "bernoulli" and not np.all((y == 0) | (y == 1)):
        raise ModelError("Bernoulli response must be 0/1")
    if kind == "poisson" and np.any(y < 0):
        raise ModelError("Poisson counts cannot be negative")


# ---------------------------------------------------------------------------
# Shared (server-held) parameters
# ---------------------------------------------------------------------------


class SharedParams:
    """Unconstrained vector ``u`` holding the intercept and/or ``log sigma``.

    ``log_prior`` is the log-density of ``u`` (Jacobian included), so a
    Gaussian variational factor over ``u`` is a proper approximation.
    """

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.names = []
        if spec.intercept:
            self.names.append("b")
        if spec.learns_sigma:
            self.names.append("log_sigma")

    @property
    def dim(self) -> int:
        return len(self.names)

    def unpack(self, u):
        """Return ``(b, sigma)`` for a value of ``u``."""
        b = 0.0
        sigma = self.spec.sigma if self.spec.sigma is not None else 1.0
        for name, v in zip(self.names, np.atleast_1d(u)):
            if name == "b":
                b = float(v)
            else:
                sigma = float(np.exp(v))
        return b, sigma

    def pack_grad(self, d_b: float, d_logsigma: float) -> np.ndarray:
        out = np.zeros(self.dim)
        for i, name in enumerate(self.names):
            out[i] = d_b if name == "b" else d_logsigma
        return out

    def log_prior(self, u):
        """b ~ N(0, 1); sigma ~ HN(1) or flat, expressed on ``log sigma``."""
        u = np.atleast_1d(np.asarray(u, dtype=np.float64))
        value = 0.0
        grad = np.zeros(self.dim)
        for i, name in enumerate(self.names):
            if name == "b":
                value += -0.5 * LOG_2PI - 0.5 * u[i] ** 2
                grad[i] = -u[i]
            elif self.spec.sigma_prior == "halfnormal":
                s = np.exp(u[i])
                value += LOG2 - 0.5 * LOG_2PI - 0.5 * s * s + u[i]
                grad[i] = 1.0 - s * s
            else:
                value += u[i]
                grad[i] = 1.0
        return float(value), grad

    def param_names(self) -> list:
        return list(self.names)


# ---------------------------------------------------------------------------
# Client parameter blocks
# ---------------------------------------------------------------------------


class ClientBlock:
    """Client ``j``'s covariates and the map ``theta_j -> g_j(x_j, theta_j)``.

    Subclasses provide ``dim``, ``predictor``, ``predictor_vjp`` and
    ``log_prior``. ``local`` is a flat vector of point-estimated parameters
    (only the split network has any).
    """

    dim: int = 0
    local: Optional[np.ndarray] = None

    def predictor(self, theta) -> np.ndarray:
        raise NotImplementedError

    def predictor_vjp(self, theta, upstream):
        """Return ``(d/d theta, d/d local)`` of ``<upstream, g_j(theta)>``."""
        raise NotImplementedError

    def log_prior(self, theta):
        raise NotImplementedError

    def log_prior_grad(self, theta) -> np.ndarray:
        return self.log_prior(theta)[1]

    def param_names(self) -> list:
        return [f"theta[{k}]" for k in range(self.dim)]

    def transform(self, name: str, draws):
        """Map draws of an internal coordinate to the reported scale."""
        return draws


class LinearBlock(ClientBlock):
    """``g_j = x_j beta_j`` with ``beta_j ~ N(0, prior_scale^2 I)``."""

    def __init__(self, x, prior_scale: float = 1.0, index: int = 1):
        self.x = np.asarray(x, dtype=np.float64)
        self.dim = self.x.shape[1]
        self.prior_scale = float(prior_scale)
        self.index = index

    def with_rows(self, x):
        return LinearBlock(x, self.prior_scale, self.index)

    def predictor(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.dim,):
            raise ShapeError(f"theta has shape {theta.shape}, block expects ({self.dim},)")
        return self.x @ theta

    def predictor_vjp(self, theta, upstream):
        return self.x.T @ upstream, None

    def log_prior(self, theta):
        s = self.prior_scale
        theta = np.asarray(theta, dtype=np.float64)
        value = -0.5 * self.dim * LOG_2PI - self.dim * np.log(s) - 0.5 * float(theta @ theta) / (s * s)
        return value, -theta / (s * s)

    def log_prior_grad(self, theta):
        return -np.asarray(theta) / (self.prior_scale * self.prior_scale)

    def param_names(self):
        return [f"beta_{self.index}[{k}]" for k in range(self.dim)]


class MultilevelBlock(ClientBlock):
    """Varying slopes by level: ``g_ij = x_ij . beta_j[r_i]``.

    ``theta`` packs ``beta`` (levels x p), ``mu`` (levels x p) and
    ``log sigma`` (levels x p) in that order, with priors
    ``beta ~ N(mu, sigma)``, ``mu ~ N(0, 1)`` and ``sigma ~ HN(1)``.
    """

    def __init__(self, x, group, n_levels: int, index: int = 1):
        if group is None:
            raise ModelError("multilevel predictor needs group labels")
        self.x = np.asarray(x, dtype=np.float64)
        self.group = np.asarray(group, dtype=np.int64)
        self.n_levels = int(n_levels)
        self.p = self.x.shape[1]
        self.index = index
        self.dim = 3 * self.n_levels * self.p
        self._onehot = np.zeros((self.x.shape[0], self.n_levels))
        self._onehot[np.arange(self.x.shape[0]), self.group] = 1.0

    def with_rows(self, x, group):
        return MultilevelBlock(x, group, self.n_levels, self.index)

    def split(self, theta):
        k = self.n_levels * self.p
        theta = np.asarray(theta, dtype=np.float64)
        return (
            theta[:k].reshape(self.n_levels, self.p),
            theta[k : 2 * k].reshape(self.n_levels, self.p),
            theta[2 * k :].reshape(self.n_levels, self.p),
        )

    def predictor(self, theta):
        beta, _, _ = self.split(theta)
        return np.einsum("ij,ij->i", self.x, beta[self.group])

    def predictor_vjp(self, theta, upstream):
        g_beta = self._onehot.T @ (self.x * upstream[:, None])
        out = np.zeros(self.dim)
        out[: g_beta.size] = g_beta.ravel()
        return out, None

    def log_prior(self, theta):
        beta, mu, logs = self.split(theta)
        s = np.exp(logs)
        d = beta - mu
        value = (
            np.sum(-0.5 * LOG_2PI - logs - 0.5 * d * d / (s * s))
            + np.sum(-0.5 * LOG_2PI - 0.5 * mu * mu)
            + np.sum(LOG2 - 0.5 * LOG_2PI - 0.5 * s * s + logs)
        )
        g_beta = -d / (s * s)
        g_mu = d / (s * s) - mu
        g_logs = d * d / (s * s) - s * s
        return float(value), np.concatenate([g_beta.ravel(), g_mu.ravel(), g_logs.ravel()])

    def param_names(self):
        names = []
        for part in ("beta", "mu", "log_sigma"):
            for r in range(self.n_levels):
                for k in range(self.p):
                    names.append(f"{part}_{self.index}[{r + 1},{k}]")
        return names

    def transform(self, name, draws):
        return np.exp(draws) if name.startswith("log_sigma") else draws


class SplitNNBlock(ClientBlock):
    """Feature map ``h = f_phi(x_j)`` followed by ``g_j = h . w_j``.

    ``w_j ~ N(0, prior_scale^2)`` is the random part ``theta``; the feature
    network weights are point estimates stored in ``local``.
    """

    def __init__(self, x, spec: MlpSpec, local=None, prior_scale: float = 1.0, index: int = 1):
        self.x = np.asarray(x, dtype=np.float64)
        self.spec = spec
        self.net = MlpParams(spec, local if local is not None else None)
        self.local = self.net.flat
        self.dim = spec.n_out
        self.prior_scale = float(prior_scale)
        self.index = index

    def with_rows(self, x):
        return SplitNNBlock(x, self.spec, self.local, self.prior_scale, self.index)

    def init_local(self, stream: RngStream):
        self.local[...] = mlp_init(self.spec, stream).flat

    def features(self, x=None):
        h, _ = mlp_forward(self.net, self.x if x is None else x)
        return h

    def predictor(self, theta):
        h, _ = mlp_forward(self.net, self.x)
        return h @ np.asarray(theta, dtype=np.float64)

    def predictor_vjp(self, theta, upstream):
        h, tape = mlp_forward(self.net, self.x)
        g_theta = h.T @ upstream
        g_local, _ = mlp_backward(self.net, tape, np.outer(upstream, theta))
        return g_theta, g_local

    def log_prior(self, theta):
        s = self.prior_scale
        return gaussian_logpdf(theta, np.zeros(self.dim), s), -np.asarray(theta) / (s * s)

    def param_names(self):
        return [f"w_{self.index}[{k}]" for k in range(self.dim)]


def build_blocks(spec: ModelSpec, data: Dataset, stream_seed: Optional[int] = None) -> list:
    """One :class:`ClientBlock` per covariate block of ``data``."""
    blocks = []
    for j, x in enumerate(data.blocks):
        idx = j + 1
        if spec.family in ("linear-gaussian", "logistic"):
            blocks.append(LinearBlock(x, spec.client_prior_scale(j), idx))
        elif spec.family == "poisson-multilevel":
            blocks.append(MultilevelBlock(x, data.group, data.n_levels, idx))
        else:
            mspec = MlpSpec((x.shape[1],) + tuple(spec.feature_widths), spec.feature_activation)
            blk = SplitNNBlock(x, mspec, prior_scale=spec.client_prior_scale(j), index=idx)
            if stream_seed is not None:
                blk.init_local(RngStream(stream_seed, 1000 + idx))
            blocks.append(blk)
    return blocks


def rebind_rows(block: ClientBlock, data: Dataset, j: int) -> ClientBlock:
    """Same parameters, covariates taken from client ``j`` of ``data``."""
    if isinstance(block, MultilevelBlock):
        return block.with_rows(data.blocks[j], data.group)
    return block.with_rows(data.blocks[j])


def predictor(block: ClientBlock, theta) -> np.ndarray:
    return block.predictor(theta)


# ---------------------------------------------------------------------------
# Log-densities used by the inference algorithms
# ---------------------------------------------------------------------------


def linear_predictor(z_sum, b: float = 0.0, offset=None):
    eta = z_sum + b
    if offset is not None:
        eta = eta + offset
    return eta


def loglik_aux(y, z_blocks, gamma, family: str, offset=None, check: bool = True):
    """``log p(y | b + offset + sum_j z_j, sigma)`` and its gradients.

    ``gamma`` is ``(b, sigma)``. ``family`` is a likelihood kind
    (``bernoulli``, ``poisson`` or ``gaussian``) or a model family name.
    Returns ``(value, [d/dz_j], (d/db, d/dlog sigma))``.
    """
    kind = _kind(family)
    y = np.asarray(y, dtype=np.float64)
    if check:
        _check_response(kind, y)
    b, sigma = gamma
    eta = linear_predictor(np.sum(z_blocks, axis=0), b, offset)
    value, d_eta, d_ls = loglik_eta(kind, y, eta, sigma)
    return value, [d_eta] * len(z_blocks), (float(np.sum(d_eta)), d_ls)


def loglik_power_j(y, g_j, z_blocks, j: int, gamma, family: str, offset=None, check: bool = True):
    """Client ``j``'s weighted contribution ``(1/J) log p(y | b + offset + g_j + sum_{k!=j} z_k)``.

    Returns ``(value, d/dg_j, {k: d/dz_k for k != j}, (d/db, d/dlog sigma))``
    with the ``1/J`` weight already applied.
    """
    kind = _kind(family)
    y = np.asarray(y, dtype=np.float64)
    if check:
        _check_response(kind, y)
    J = len(z_blocks)
    b, sigma = gamma
    others = np.zeros_like(np.asarray(g_j, dtype=np.float64))
    for k in range(J):
        if k != j:
            others = others + z_blocks[k]
    eta = linear_predictor(g_j + others, b, offset)
    value, d_eta, d_ls = loglik_eta(kind, y, eta, sigma)
    w = 1.0 / J
    d_eta = w * d_eta
    cross = {k: d_eta for k in range(J) if k != j}
    return w * value, d_eta, cross, (float(np.sum(d_eta)), w * d_ls)


def log_aux_conditional(z_j, pred, rho: float):
    """``log N(z_j; pred, rho)`` with gradients w.r.t. ``z_j``, ``pred`` and ``rho``."""
    if not rho > 0:
        raise DomainError("rho must be positive")
    d = np.asarray(z_j, dtype=np.float64) - pred
    if d.shape != np.shape(pred):
        raise ShapeError(f"z has shape {d.shape} but the predictor has shape {np.shape(pred)}")
    ss = float(d @ d)
    value = -0.5 * d.size * LOG_2PI - d.size * np.log(rho) - 0.5 * ss / (rho * rho)
    d_pred = d / (rho * rho)
    return value, -d_pred, d_pred, ss / rho**3 - d.size / rho


def log_prior(block: ClientBlock, theta):
    return block.log_prior(theta)


def _kind(family: str) -> str:
    if family in ("bernoulli", "poisson", "gaussian"):
        return family
    if family in ("logistic", "splitnn-bernoulli"):
        return "bernoulli"
    if family == "poisson-multilevel":
        return "poisson"
    if family == "linear-gaussian":
        return "gaussian"
    raise ModelError(f"unknown family {family!r}")


# ---------------------------------------------------------------------------
# Analytic oracle
# ---------------------------------------------------------------------------


@dataclass
class GaussianPosterior:
    mean: np.ndarray
    cov: np.ndarray

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))


def marginalized_posterior_linear(data: Dataset, prior_scale, sigma: float, rho: float) -> GaussianPosterior:
    """Exact posterior of all coefficients with the auxiliary variables integrated out.

    Integrating ``z`` out of the augmented linear model leaves
    ``y | beta ~ N(X beta, sigma^2 + J rho^2)``; the Gaussian prior is then
    conjugate. ``rho = 0`` gives the posterior of the original model.
    Coefficients are ordered client by client.
    """
    if rho < 0 or not sigma > 0:
        raise DomainError("need sigma > 0 and rho >= 0")
    if data.group is not None:
        raise ModelError("conjugate oracle covers the plain linear model only")
    X = np.hstack(data.blocks)
    y = data.y - (data.offset if data.offset is not None else 0.0)
    J = data.n_clients
    if np.ndim(prior_scale) == 0:
        prior_var = np.full(X.shape[1], float(prior_scale) ** 2)
    else:
        scales = np.asarray(prior_scale, dtype=np.float64)
        if scales.shape == (J,):
            prior_var = np.concatenate([np.full(s, scales[j] ** 2) for j, s in enumerate(data.block_sizes)])
        else:
            prior_var = scales**2
    noise_var = sigma * sigma + J * rho * rho
    precision = X.T @ X / noise_var + np.diag(1.0 / prior_var)
    cov = np.linalg.inv(precision)
    cov = 0.5 * (cov + cov.T)
    mean = cov @ (X.T @ y) / noise_var
    return GaussianPosterior(mean, cov)


def log_evidence_linear(data: Dataset, prior_scale: float, sigma: float, rho: float = 0.0) -> float:
    """``log p(y)`` of the (marginalized) conjugate linear model."""
    X = np.hstack(data.blocks)
    y = data.y - (data.offset if data.offset is not None else 0.0)
    noise_var = sigma * sigma + data.n_clients * rho * rho
    C = noise_var * np.eye(data.n) + float(prior_scale) ** 2 * X @ X.T
    sign, logdet = np.linalg.slogdet(C)
    return float(-0.5 * (data.n * LOG_2PI + logdet + y @ np.linalg.solve(C, y)))
