"""Dense feed-forward networks over a flat parameter vector.

Parameters are stored as a single 1-D float array laid out layer by layer,
each layer as its ``(fan_in, fan_out)`` weight matrix in row-major order
followed by its bias. Every routine here takes the spec and the flat vector
explicitly, so samplers and optimizers can treat a network as a point in
R^m.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

ACTIVATIONS = ("tanh", "relu")
LINKS = ("identity", "softplus")

# Added to every softplus head so variances, shapes and rates stay away from 0.
POSITIVE_FLOOR = 1e-6


@dataclass(frozen=True)
class Head:
    name: str
    dim: int = 1
    link: str = "identity"

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"head {self.name!r}: dim must be positive")
        if self.link not in LINKS:
            raise ValueError(f"head {self.name!r}: unknown link {self.link!r}")


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of an MLP whose output columns are split into named heads."""

    input_dim: int
    hidden_widths: tuple[int, ...] = ()
    output_heads: tuple[Head, ...] = (Head("mean"),)
    hidden_activation: str = "tanh"
    dropout_rate: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        object.__setattr__(self, "output_heads", tuple(
            h if isinstance(h, Head) else Head(**h) for h in self.output_heads))
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if any(w < 1 for w in self.hidden_widths):
            raise ValueError("hidden widths must be positive")
        if not self.output_heads:
            raise ValueError("at least one output head is required")
        names = [h.name for h in self.output_heads]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate head names: {names}")
        if self.hidden_activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.hidden_activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")

    @property
    def output_dim(self) -> int:
        return sum(h.dim for h in self.output_heads)

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_widths, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes)

    def head_slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for h in self.output_heads:
            out[h.name] = slice(start, start + h.dim)
            start += h.dim
        return out

    def head(self, name: str) -> Head:
        for h in self.output_heads:
            if h.name == name:
                return h
        raise KeyError(f"spec has no head {name!r}")

    def has_head(self, name: str) -> bool:
        return any(h.name == name for h in self.output_heads)

    def without_dropout(self) -> "MlpSpec":
        return MlpSpec(self.input_dim, self.hidden_widths, self.output_heads,
                       self.hidden_activation, 0.0)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_widths": list(self.hidden_widths),
            "output_heads": [{"name": h.name, "dim": h.dim, "link": h.link}
                             for h in self.output_heads],
            "hidden_activation": self.hidden_activation,
            "dropout_rate": self.dropout_rate,
        }


def mean_spec(input_dim: int, hidden=(256, 256), output_dim: int = 1,
              activation: str = "tanh", dropout_rate: float = 0.0) -> MlpSpec:
    """Mean-only regression network (ME network / BNN body)."""
    return MlpSpec(input_dim, tuple(hidden), (Head("mean", output_dim),),
                   activation, dropout_rate)


def mve_spec(input_dim: int, hidden=(256, 256), output_dim: int = 1,
             activation: str = "tanh", dropout_rate: float = 0.0) -> MlpSpec:
    """Mean-variance network: identity mean head plus softplus variance head."""
    return MlpSpec(input_dim, tuple(hidden),
                   (Head("mean", output_dim), Head("var", output_dim, "softplus")),
                   activation, dropout_rate)


def gamma_spec(input_dim: int, hidden=(5,), output_dim: int = 1,
               activation: str = "tanh") -> MlpSpec:
    """Variance network emitting Gamma shape and rate for squared residuals."""
    return MlpSpec(input_dim, tuple(hidden),
                   (Head("alpha", output_dim, "softplus"),
                    Head("lambda", output_dim, "softplus")),
                   activation)


def unpack(spec: MlpSpec, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views of ``params`` as ``[(W, b), ...]``; no copies are made."""
    params = np.asarray(params)
    if params.ndim != 1 or params.shape[0] != spec.n_params:
        raise ValueError(f"expected {spec.n_params} parameters, got shape {params.shape}")
    layers, start = [], 0
    for fan_in, fan_out in spec.layer_shapes:
        W = params[start:start + fan_in * fan_out].reshape(fan_in, fan_out)
        start += fan_in * fan_out
        b = params[start:start + fan_out]
        start += fan_out
        layers.append((W, b))
    return layers


def init_params(spec: MlpSpec, seed: int) -> np.ndarray:
    """Fan-in scaled uniform weights, zero biases. Deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    params = np.zeros(spec.n_params)
    for W, _ in unpack(spec, params):
        bound = 1.0 / np.sqrt(W.shape[0])
        W[...] = rng.uniform(-bound, bound, size=W.shape)
    return params


def softplus(z):
    return np.logaddexp(0.0, z)


def _activate(kind: str, a: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(a)
    return np.maximum(a, 0.0)


def _activation_grad(kind: str, a: np.ndarray, h: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        return 1.0 - h * h
    return (a > 0.0).astype(a.dtype)


def dropout_masks(spec: MlpSpec, n_rows: int, rng: np.random.Generator) -> list[np.ndarray]:
    """One inverted-dropout mask per hidden layer: entries are 0 or 1/(1-p)."""
    if spec.dropout_rate <= 0.0:
        raise ValueError("dropout masks requested for a network with dropout_rate = 0")
    keep = 1.0 - spec.dropout_rate
    return [(rng.random((n_rows, w)) < keep) / keep for w in spec.hidden_widths]


@dataclass
class _Cache:
    inputs: list = field(default_factory=list)    # input to each layer (post-mask)
    pre: list = field(default_factory=list)       # hidden pre-activations
    act: list = field(default_factory=list)       # hidden activations (pre-mask)
    masks: list | None = None
    out_pre: np.ndarray | None = None


def _check_inputs(spec: MlpSpec, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ValueError(f"expected inputs with {spec.input_dim} columns, got shape {X.shape}")
    return X


def _forward(spec, params, X, masks):
    X = _check_inputs(spec, X)
    if masks is not None:
        if spec.dropout_rate <= 0.0:
            raise ValueError("dropout mask given for a network with dropout_rate = 0")
        if len(masks) != len(spec.hidden_widths):
            raise ValueError("need one dropout mask per hidden layer")
    layers = unpack(spec, params)
    cache = _Cache(masks=masks)
    h = X
    for i, (W, b) in enumerate(layers[:-1]):
        cache.inputs.append(h)
        a = h @ W + b
        z = _activate(spec.hidden_activation, a)
        cache.pre.append(a)
        cache.act.append(z)
        h = z * masks[i] if masks is not None else z
    W, b = layers[-1]
    cache.inputs.append(h)
    z = h @ W + b
    cache.out_pre = z
    out = z.copy()
    for head, sl in spec.head_slices().items():
        if spec.head(head).link == "softplus":
            out[:, sl] = softplus(z[:, sl]) + POSITIVE_FLOOR
    return out, cache


def forward(spec: MlpSpec, params: np.ndarray, X, masks=None) -> np.ndarray:
    """Network outputs, shape ``(n_rows, spec.output_dim)``, links applied."""
    return _forward(spec, params, X, masks)[0]


def split_heads(spec: MlpSpec, out: np.ndarray) -> dict[str, np.ndarray]:
    return {name: out[..., sl] for name, sl in spec.head_slices().items()}


def predict_heads(spec: MlpSpec, params: np.ndarray, X, masks=None) -> dict[str, np.ndarray]:
    return split_heads(spec, forward(spec, params, X, masks))


def backward(spec: MlpSpec, params: np.ndarray, cache: _Cache,
             d_out: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. linked outputs back to the flat parameters."""
    layers = unpack(spec, params)
    grad = np.zeros_like(params, dtype=float)
    grad_layers = unpack(spec, grad)

    g = np.array(d_out, dtype=float)
    for name, sl in spec.head_slices().items():
        if spec.head(name).link == "softplus":
            g[:, sl] *= expit(cache.out_pre[:, sl])

    n_hidden = len(spec.hidden_widths)
    for i in range(n_hidden, -1, -1):
        W, _ = layers[i]
        dW, db = grad_layers[i]
        h_in = cache.inputs[i]
        dW[...] = h_in.T @ g
        db[...] = g.sum(axis=0)
        if i == 0:
            break
        g = g @ W.T
        if cache.masks is not None:
            g = g * cache.masks[i - 1]
        g = g * _activation_grad(spec.hidden_activation, cache.pre[i - 1], cache.act[i - 1])
    return grad


def grad(spec: MlpSpec, params: np.ndarray, X, y, loss, masks=None) -> tuple[float, np.ndarray]:
    """Scalar loss and its exact gradient w.r.t. every parameter.

    ``loss`` is any callable ``loss(heads, y) -> (value, head_grads)`` where
    ``heads`` maps head names to output blocks and ``head_grads`` holds the
    derivative of the value w.r.t. each block it depends on (see
    :mod:`coopbnn.losses`).
    """
    missing = [h for h in getattr(loss, "heads", ()) if not spec.has_head(h)]
    if missing:
        raise ValueError(f"loss references heads missing from the spec: {missing}")
    out, cache = _forward(spec, params, X, masks)
    value, head_grads = loss(split_heads(spec, out), np.asarray(y, dtype=float))
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite loss value {value}")
    d_out = np.zeros_like(out)
    slices = spec.head_slices()
    for name, g in head_grads.items():
        d_out[:, slices[name]] = g
    return float(value), backward(spec, params, cache, d_out)
