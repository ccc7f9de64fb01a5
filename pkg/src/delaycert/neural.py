"""Small feed-forward ReLU networks with exact backpropagation.

Networks are immutable: training code builds new ``Mlp`` values through
``sgd_step``. Inputs are batched along the leading axis.
"""

import base64
from dataclasses import dataclass

import numpy as np

DEFAULT_HIDDEN = (64, 64, 64)
SPECTRAL_ITERS = 200
SPECTRAL_SAFETY = 1.01


def _frozen(a):
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Mlp:
    """Affine layers with ReLU between them and a linear output layer.

    ``weights[l]`` has shape ``(out, in)``.
    """

    weights: tuple
    biases: tuple

    def __post_init__(self):
        if len(self.weights) == 0 or len(self.weights) != len(self.biases):
            raise ValueError("need one bias per weight matrix")
        ws = tuple(_frozen(w) for w in self.weights)
        bs = tuple(_frozen(b) for b in self.biases)
        for l, (w, b) in enumerate(zip(ws, bs)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {l}: bad shapes {w.shape}, {b.shape}")
            if l > 0 and w.shape[1] != ws[l - 1].shape[0]:
                raise ValueError(f"layer {l}: input {w.shape[1]} does not chain to {ws[l - 1].shape[0]}")
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)

    @property
    def input_dim(self):
        return self.weights[0].shape[1]

    @property
    def output_dim(self):
        return self.weights[-1].shape[0]

    @property
    def hidden(self):
        return tuple(w.shape[0] for w in self.weights[:-1])

    def n_params(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def __call__(self, x):
        return forward(self, x)


@dataclass(frozen=True)
class GradientBuffer:
    """Gradients laid out exactly like the parameters of an ``Mlp``."""

    weights: tuple
    biases: tuple

    @staticmethod
    def zeros_like(net):
        return GradientBuffer(tuple(np.zeros_like(w) for w in net.weights),
                              tuple(np.zeros_like(b) for b in net.biases))

    def __add__(self, other):
        return GradientBuffer(tuple(a + b for a, b in zip(self.weights, other.weights)),
                              tuple(a + b for a, b in zip(self.biases, other.biases)))

    def scaled(self, s):
        return GradientBuffer(tuple(s * a for a in self.weights), tuple(s * a for a in self.biases))

    def is_zero(self):
        return all(not np.any(a) for a in self.weights + self.biases)

    def flat(self):
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases)])


@dataclass(frozen=True)
class LipschitzBound:
    value: float
    method: str = "norm-product"
    box: object = None


def init_mlp(input_dim, output_dim, hidden=DEFAULT_HIDDEN, rng=None):
    """Uniform init in +-sqrt(6/(fan_in+fan_out)) with zero biases."""
    rng = np.random.default_rng(rng)
    dims = [int(input_dim)] + [int(h) for h in hidden] + [int(output_dim)]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-lim, lim, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Mlp(tuple(weights), tuple(biases))


def _as_batch(net, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != net.input_dim:
        raise ValueError(f"input has length {x.shape[-1]}, network expects {net.input_dim}")
    return x


def forward(net, x):
    """Evaluate the network on ``x`` of shape ``(..., input_dim)``."""
    h = _as_batch(net, x)
    last = len(net.weights) - 1
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w.T + b
        if l < last:
            h = np.maximum(h, 0.0)
    return h


def forward_cache(net, x):
    """Forward pass on a 2-D batch keeping the activations for ``backward``."""
    h = _as_batch(net, x)
    if h.ndim == 1:
        h = h[None, :]
    acts = [h]
    last = len(net.weights) - 1
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w.T + b
        if l < last:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return h, acts


def backward(net, cache, upstream):
    """Gradient of ``sum(output * upstream)`` w.r.t. parameters and input.

    ``cache`` comes from ``forward_cache``. ReLU uses subgradient 0 at 0.
    Returns ``(GradientBuffer, d_input)``.
    """
    acts = cache
    g = np.asarray(upstream, dtype=np.float64).reshape(acts[-1].shape)
    gw = [None] * len(net.weights)
    gb = [None] * len(net.weights)
    for l in range(len(net.weights) - 1, -1, -1):
        if l < len(net.weights) - 1:
            g = g * (acts[l + 1] > 0.0)
        gw[l] = g.T @ acts[l]
        gb[l] = g.sum(axis=0)
        g = g @ net.weights[l]
    return GradientBuffer(tuple(gw), tuple(gb)), g


def input_gradient(net, x):
    """Gradient of a scalar-output network w.r.t. its input, per row."""
    out, cache = forward_cache(net, x)
    _, dx = backward(net, cache, np.ones_like(out))
    return dx


def sgd_step(net, grads, lr):
    """Return ``net`` with every parameter moved by ``-lr * grad``."""
    return Mlp(tuple(w - lr * g for w, g in zip(net.weights, grads.weights)),
               tuple(b - lr * g for b, g in zip(net.biases, grads.biases)))


def spectral_norm(w, iters=SPECTRAL_ITERS, rng=0):
    """Largest singular value by power iteration on ``W^T W``."""
    w = np.asarray(w, dtype=np.float64)
    if not np.any(w):
        return 0.0
    v = np.random.default_rng(rng).standard_normal(w.shape[1])
    v /= np.linalg.norm(v)
    for _ in range(iters):
        u = w.T @ (w @ v)
        n = np.linalg.norm(u)
        if n == 0.0:
            break
        v = u / n
    return float(np.linalg.norm(w @ v))


def layer_bound(w):
    """Sound upper bound on the spectral norm of one layer.

    Power iteration approaches the norm from below, so the estimate times the
    safety factor is cross-checked against an SVD and the larger value wins.
    """
    est = spectral_norm(w) * SPECTRAL_SAFETY
    if not np.any(w):
        return 0.0
    exact = float(np.linalg.norm(np.asarray(w, dtype=np.float64), 2))
    return max(est, exact * (1.0 + 1e-12))


LIPSCHITZ_METHODS = ("norm-product", "tight")


def lipschitz_upper(net, box=None, method="norm-product"):
    """Global l2 Lipschitz bound.

    ``norm-product`` multiplies per-layer spectral-norm bounds. ``tight`` also
    bounds the norm of ``|W_L| ... |W_1|`` (every Jacobian ``W_L D ... D W_1``
    with 0/1 diagonals is dominated entrywise by it) and keeps the smaller
    of the two sound values.
    """
    if method not in LIPSCHITZ_METHODS:
        raise ValueError(f"unknown Lipschitz method {method!r}")
    value = 1.0
    for w in net.weights:
        value *= layer_bound(w)
    if method == "norm-product":
        return LipschitzBound(float(value), "norm-product", box)
    m = np.abs(net.weights[0])
    for w in net.weights[1:]:
        m = np.abs(w) @ m
    alt = layer_bound(m)
    if alt < value:
        return LipschitzBound(float(alt), "abs-product", box)
    return LipschitzBound(float(value), "norm-product", box)


def recenter(net, point=None):
    """Shift the output bias so that ``net(point) == 0`` (default origin)."""
    if point is None:
        point = np.zeros(net.input_dim)
    offset = forward(net, np.asarray(point, dtype=np.float64)[None, :])[0]
    biases = list(net.biases)
    biases[-1] = biases[-1] - offset
    return Mlp(net.weights, tuple(biases))


def _encode(a):
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def _decode(text, shape):
    a = np.frombuffer(base64.b64decode(text.encode("ascii")), dtype="<f8").astype(np.float64)
    return a.reshape(shape)


def mlp_to_dict(net):
    """Layer-major dict with little-endian f64 blobs."""
    return {
        "version": 1,
        "layers": [
            {"shape": list(w.shape), "weight": _encode(w), "bias": _encode(b)}
            for w, b in zip(net.weights, net.biases)
        ],
    }


def mlp_from_dict(data):
    if data.get("version") != 1:
        raise ValueError(f"unsupported network version {data.get('version')!r}")
    ws, bs = [], []
    for layer in data["layers"]:
        shape = tuple(int(s) for s in layer["shape"])
        ws.append(_decode(layer["weight"], shape))
        bs.append(_decode(layer["bias"], (shape[0],)))
    return Mlp(tuple(ws), tuple(bs))


def norm_net(dim, scale=1.0):
    """ReLU net computing ``scale * ||x||_1`` exactly (a handy certificate shape)."""
    eye = np.eye(dim)
    w1 = np.vstack([eye, -eye])
    w2 = np.full((1, 2 * dim), float(scale))
    return Mlp((w1, w2), (np.zeros(2 * dim), np.zeros(1)))


def scaled(net, factor):
    """Network whose output is ``factor`` times the original."""
    ws = list(net.weights)
    bs = list(net.biases)
    ws[-1] = ws[-1] * factor
    bs[-1] = bs[-1] * factor
    return Mlp(tuple(ws), tuple(bs))
