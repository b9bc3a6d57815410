"""Feed-forward drift networks and their training primitives.

A drift network maps a state vector together with a sinusoidal time encoding
to a drift vector of the same dimension as the state.  Two instances are
trained per bridge run, one per direction.  Parameters live in a single flat
float64 vector so that gradients, optimizer moments and checkpoints all share
one layout: for each layer, the weight matrix (row-major, shape in x out)
followed by the bias.

Everything here is pure: evaluation depends only on (params, inputs), and the
optimizer returns fresh net/state values instead of mutating.  A net may be
shared read-only across threads; training a given net is single-writer.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace

import numpy as np

from .autodiff import Var

__all__ = [
    "DriftNet",
    "OptimizerState",
    "eval_drift",
    "eval_drift_batch",
    "loss_gradient",
    "optimizer_step",
    "time_encoding",
    "save_checkpoint",
    "load_checkpoint",
]

_ACTIVATIONS = ("tanh", "silu")


def time_encoding(t, n_features: int) -> np.ndarray:
    """Sinusoidal features [sin(2^j t), cos(2^j t)] for j = 0 .. n/2 - 1.

    Scalar t gives an (n_features,) vector; an (N,) array gives per-row
    encodings of shape (N, n_features).
    """
    half = n_features // 2
    freqs = 2.0 ** np.arange(half)
    t = np.asarray(t, dtype=np.float64)
    arg = t[..., None] * freqs
    enc = np.empty(arg.shape[:-1] + (n_features,))
    enc[..., 0::2] = np.sin(arg)
    enc[..., 1::2] = np.cos(arg)
    return enc


def _batch_encoding(t, n_rows: int, n_features: int) -> np.ndarray:
    enc = time_encoding(t, n_features)
    if enc.ndim == 1:
        return np.broadcast_to(enc, (n_rows, n_features))
    if enc.shape[0] != n_rows:
        raise ValueError(f"time vector length {enc.shape[0]} != batch size {n_rows}")
    return enc


def _layer_slices(layer_widths):
    """Yield (w_slice, b_slice, in_w, out_w) into the flat parameter vector."""
    offset = 0
    for in_w, out_w in zip(layer_widths[:-1], layer_widths[1:]):
        w = slice(offset, offset + in_w * out_w)
        offset += in_w * out_w
        b = slice(offset, offset + out_w)
        offset += out_w
        yield w, b, in_w, out_w


def n_params(layer_widths) -> int:
    return sum((i + 1) * o for i, o in zip(layer_widths[:-1], layer_widths[1:]))


@dataclass(frozen=True)
class DriftNet:
    """MLP drift with flat parameters.

    layer_widths[0] must equal state_dim + time_features and layer_widths[-1]
    must equal state_dim.  A zero final layer makes the drift identically
    zero while keeping hidden-layer gradients alive.
    """

    layer_widths: tuple
    params: np.ndarray
    activation: str = "silu"
    time_features: int = 16
    output_scale: float = 1.0

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        expected = n_params(self.layer_widths)
        if self.params.shape != (expected,):
            raise ValueError(
                f"params length {self.params.shape} does not match layer widths "
                f"{self.layer_widths} (expected {expected})"
            )

    @property
    def state_dim(self) -> int:
        return self.layer_widths[-1]

    @classmethod
    def create(cls, state_dim, hidden=(64, 64), activation="silu", time_features=16,
               output_scale=1.0, init="default", seed=0):
        """Build a net; ``init='zero'`` zeroes only the output layer."""
        widths = (state_dim + time_features, *hidden, state_dim)
        rng = np.random.default_rng(seed)
        params = np.empty(n_params(widths))
        last = len(widths) - 2
        for li, (w, b, in_w, out_w) in enumerate(_layer_slices(widths)):
            scale = np.sqrt(2.0 / (in_w + out_w))
            params[w] = rng.normal(0.0, scale, in_w * out_w)
            params[b] = 0.0
            if init == "zero" and li == last:
                params[w] = 0.0
        return cls(widths, params, activation, time_features, float(output_scale))

    def with_params(self, params: np.ndarray) -> "DriftNet":
        return replace(self, params=np.asarray(params, dtype=np.float64))

    def _forward(self, h: np.ndarray, ops) -> np.ndarray:
        p = self.params
        act = ops
        n_layers = len(self.layer_widths) - 1
        for li, (w, b, in_w, out_w) in enumerate(_layer_slices(self.layer_widths)):
            h = h @ p[w].reshape(in_w, out_w) + p[b]
            if li < n_layers - 1:
                # sigmoid via tanh avoids exp overflow for large negatives
                h = np.tanh(h) if self.activation == "tanh" else h * (0.5 + 0.5 * np.tanh(0.5 * h))
        return h * self.output_scale

    def __call__(self, X: np.ndarray, t: float) -> np.ndarray:
        return eval_drift_batch(self, X, t)

    def forward_var(self, p: Var, X: np.ndarray, t) -> Var:
        """Tape-tracked batch evaluation with parameter Var `p`.

        X is a constant (N, d) batch and t a scalar or per-row (N,) array;
        the result is an (N, d) Var whose gradient flows to `p` only.
        """
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        h = Var(np.concatenate([X, _batch_encoding(t, X.shape[0], self.time_features)], axis=1))
        n_layers = len(self.layer_widths) - 1
        for li, (w, b, in_w, out_w) in enumerate(_layer_slices(self.layer_widths)):
            h = h @ p[w].reshape(in_w, out_w) + p[b]
            if li < n_layers - 1:
                h = h.tanh() if self.activation == "tanh" else h.silu()
        return h * self.output_scale


def eval_drift(net: DriftNet, x: np.ndarray, t: float) -> np.ndarray:
    """Drift at a single state; deterministic in (net, x, t)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != net.state_dim:
        raise ValueError(f"state has shape {x.shape}, expected ({net.state_dim},)")
    return eval_drift_batch(net, x[None, :], t)[0]


def eval_drift_batch(net: DriftNet, X: np.ndarray, t) -> np.ndarray:
    """Row-wise drift for an (N, d) batch; t is a scalar or per-row array."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != net.state_dim:
        raise ValueError(f"batch has shape {X.shape}, expected (N, {net.state_dim})")
    enc = _batch_encoding(t, X.shape[0], net.time_features)
    return net._forward(np.concatenate([X, enc], axis=1), None)


def loss_gradient(net: DriftNet, loss_fn) -> np.ndarray:
    """Gradient of a scalar loss closure with respect to net.params.

    `loss_fn` receives the parameter Var and must return a scalar Var; it is
    expected to be pure.  Raises on a non-finite loss value.
    """
    p = Var(net.params)
    loss = loss_fn(p)
    value = float(loss.value)
    if not np.isfinite(value):
        raise FloatingPointError(f"loss is non-finite: {value}")
    loss.backward()
    if p.grad is None:
        return np.zeros_like(net.params)
    return p.grad


@dataclass(frozen=True)
class OptimizerState:
    """Adam moments for one flat parameter vector."""

    step_count: int
    first_moment: np.ndarray
    second_moment: np.ndarray
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_stab: float = 1e-8

    @classmethod
    def create(cls, net: DriftNet, learning_rate=1e-3, beta1=0.9, beta2=0.999, eps_stab=1e-8):
        z = np.zeros_like(net.params)
        return cls(0, z, z.copy(), learning_rate, beta1, beta2, eps_stab)


def optimizer_step(net: DriftNet, grads: np.ndarray, state: OptimizerState):
    """One Adam update; returns (new net, new state)."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != net.params.shape:
        raise ValueError(f"gradient shape {grads.shape} != params shape {net.params.shape}")
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * grads
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    params = net.params - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps_stab)
    return net.with_params(params), replace(state, step_count=t, first_moment=m, second_moment=v)


def save_checkpoint(net: DriftNet, path: str) -> None:
    """Write the net as JSON; float repr round-trips bitwise."""
    doc = {
        "layer_widths": list(net.layer_widths),
        "activation": net.activation,
        "time_features": net.time_features,
        "output_scale": net.output_scale,
        "params": net.params.tolist(),
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> DriftNet:
    with open(path) as fh:
        doc = json.load(fh)
    return DriftNet(
        layer_widths=tuple(doc["layer_widths"]),
        params=np.asarray(doc["params"], dtype=np.float64),
        activation=doc["activation"],
        time_features=int(doc["time_features"]),
        output_scale=float(doc["output_scale"]),
    )
