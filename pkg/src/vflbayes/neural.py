"""Small feedforward networks with a hand-written backward pass.

Used for the amortized auxiliary-variable family (per-row mean and scale
heads) and for client feature maps in the split network model.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .mathcore import RngStream, ShapeError

ACTIVATIONS = ("tanh", "relu", "linear")


class TapeError(RuntimeError):
    """A forward tape does not belong to the parameters it is used with."""


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths ``[in, hidden..., out]`` and the hidden activation.

    ``output_activation`` applies to the last layer; it is ``"linear"`` for
    heads and may be set to the hidden activation for feature maps.
    """

    widths: tuple
    activation: str = "tanh"
    output_activation: str = "linear"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        if any(w < 1 for w in self.widths):
            raise ValueError(f"widths must be positive, got {self.widths}")
        for a in (self.activation, self.output_activation):
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]

    @property
    def n_params(self) -> int:
        return sum((a + 1) * b for a, b in zip(self.widths[:-1], self.widths[1:]))

    def to_dict(self) -> dict:
        return {
            "widths": list(self.widths),
            "activation": self.activation,
            "output_activation": self.output_activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(tuple(d["widths"]), d.get("activation", "tanh"), d.get("output_activation", "linear"))


class MlpParams:
    """Weights and biases stored in one flat float64 vector.

    ``weights[l]`` has shape ``(in, out)`` so a batch ``X @ W + b`` maps rows
    to rows. The views share memory with ``flat``.
    """

    def __init__(self, spec: MlpSpec, flat=None):
        self.spec = spec
        if flat is None:
            flat = np.zeros(spec.n_params)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (spec.n_params,):
            raise ShapeError(f"expected {spec.n_params} parameters, got {flat.shape}")
        self.flat = flat
        self.weights = []
        self.biases = []
        off = 0
        for a, b in zip(spec.widths[:-1], spec.widths[1:]):
            self.weights.append(flat[off : off + a * b].reshape(a, b))
            off += a * b
            self.biases.append(flat[off : off + b])
            off += b

    def copy(self) -> "MlpParams":
        return MlpParams(self.spec, self.flat.copy())

    def to_bytes(self) -> bytes:
        """Little-endian float64 payload preceded by a JSON shape header.

        Layout: ``uint32 LE header length | UTF-8 JSON | float64 LE data``.
        """
        header = json.dumps({"kind": "mlp", "spec": self.spec.to_dict(), "n": self.spec.n_params}).encode()
        return struct.pack("<I", len(header)) + header + self.flat.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "MlpParams":
        (hlen,) = struct.unpack_from("<I", blob, 0)
        header = json.loads(blob[4 : 4 + hlen].decode())
        spec = MlpSpec.from_dict(header["spec"])
        data = np.frombuffer(blob, dtype="<f8", offset=4 + hlen, count=header["n"])
        return cls(spec, data.astype(np.float64))


@dataclass
class ForwardTape:
    """Inputs, pre-activations and activations recorded by :func:`mlp_forward`."""

    params_id: int
    inputs: np.ndarray
    pre: list
    post: list


def _act(name, a):
    if name == "tanh":
        return np.tanh(a)
    if name == "relu":
        return np.maximum(a, 0.0)
    return a


def _act_grad(name, pre, post):
    if name == "tanh":
        return 1.0 - post * post
    if name == "relu":
        return (pre > 0).astype(np.float64)
    return np.ones_like(pre)


def mlp_init(spec: MlpSpec, stream: RngStream) -> MlpParams:
    """Weights ~ N(0, 1/fan_in) (std ``1/sqrt(fan_in)``), biases zero."""
    params = MlpParams(spec)
    for W in params.weights:
        fan_in = W.shape[0]
        W[...] = stream.normal(W.size).reshape(W.shape) / np.sqrt(fan_in)
    return params


def mlp_forward(params: MlpParams, inputs):
    X = np.asarray(inputs, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.spec.n_in:
        raise ShapeError(f"input of shape {X.shape} does not match n_in={params.spec.n_in}")
    pre, post = [], []
    h = X
    n_layers = len(params.weights)
    for l, (W, b) in enumerate(zip(params.weights, params.biases)):
        a = h @ W + b
        name = params.spec.output_activation if l == n_layers - 1 else params.spec.activation
        h = _act(name, a)
        pre.append(a)
        post.append(h)
    return h, ForwardTape(id(params.flat), X, pre, post)


def mlp_backward(params: MlpParams, tape: ForwardTape, upstream):
    """Gradients of ``sum(upstream * outputs)`` w.r.t. parameters and inputs.

    Returns ``(flat_param_grad, input_grad)``.
    """
    if tape.params_id != id(params.flat):
        raise TapeError("tape was recorded with a different parameter buffer")
    G = np.asarray(upstream, dtype=np.float64)
    if G.shape != tape.post[-1].shape:
        raise ShapeError(f"upstream shape {G.shape} != output shape {tape.post[-1].shape}")
    grad = MlpParams(params.spec)
    n_layers = len(params.weights)
    for l in range(n_layers - 1, -1, -1):
        name = params.spec.output_activation if l == n_layers - 1 else params.spec.activation
        G = G * _act_grad(name, tape.pre[l], tape.post[l])
        h_in = tape.inputs if l == 0 else tape.post[l - 1]
        grad.weights[l][...] = h_in.T @ G
        grad.biases[l][...] = G.sum(axis=0)
        G = G @ params.weights[l].T
    return grad.flat, G
