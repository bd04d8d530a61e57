"""Minimal dense-network substrate: layers, backprop, losses, Adam, checkpoints.

Everything is plain numpy in double precision. Matrices are 2-D float64 arrays
with samples in rows. Layer weights are stored (n_out, n_in) so a layer computes
``Y = act(X @ W.T + b)``.
"""

import numpy as np

from .validation import GenZ3DError, as_matrix

MAGIC = "genz3d-net v1"

DEFAULT_LEARNING_RATE = 1e-3
DEFAULT_BETA1 = 0.9
DEFAULT_BETA2 = 0.999
DEFAULT_EPS = 1e-8

ACTIVATIONS = ("relu", "tanh", "identity")


def _apply_activation(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "identity":
        return z
    raise ValueError(f"unknown activation {name!r}")


def _activation_grad(name, z, y):
    # Derivative w.r.t. the pre-activation z; relu uses subgradient 0 at z == 0.
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "tanh":
        return 1.0 - y * y
    if name == "identity":
        return np.ones_like(z)
    raise ValueError(f"unknown activation {name!r}")


class DenseLayer:
    """One fully-connected layer: ``y = act(x @ W.T + b)``."""

    def __init__(self, weights, bias, activation="identity"):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.weights = np.asarray(weights, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ValueError("weights must be 2-D (n_out, n_in)")
        if self.bias.shape != (self.weights.shape[0],):
            raise ValueError("bias length must match the weight row count")
        self.activation = activation

    @classmethod
    def create(cls, n_in, n_out, activation, rng):
        """Uniform ±sqrt(6 / (n_in + n_out)) weight init, zero bias."""
        bound = np.sqrt(6.0 / (n_in + n_out))
        weights = rng.uniform(-bound, bound, size=(n_out, n_in))
        return cls(weights, np.zeros(n_out), activation)

    @property
    def n_in(self):
        return self.weights.shape[1]

    @property
    def n_out(self):
        return self.weights.shape[0]

    def forward(self, x):
        """Returns (y, cache); cache feeds backward."""
        z = x @ self.weights.T + self.bias
        y = _apply_activation(self.activation, z)
        return y, (x, z, y)

    def backward(self, cache, d_y):
        """Chain rule through activation and affine map.

        With z = x W^T + b and y = act(z):
          d_z = d_y * act'(z),  d_W = d_z^T x,  d_b = sum_rows d_z,  d_x = d_z W.
        """
        x, z, y = cache
        d_z = d_y * _activation_grad(self.activation, z, y)
        d_w = d_z.T @ x
        d_b = d_z.sum(axis=0)
        d_x = d_z @ self.weights
        return d_x, d_w, d_b


class Mlp:
    """A stack of DenseLayers with chained dimensions."""

    def __init__(self, layers):
        layers = list(layers)
        if not layers:
            raise ValueError("an Mlp needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.n_out != b.n_in:
                raise ValueError(
                    f"layer dims do not chain: {a.n_out} feeds {b.n_in}"
                )
        self.layers = layers

    @classmethod
    def create(cls, widths, activations, rng):
        """Build from widths [d0, d1, ..., dk] and one activation per layer."""
        widths = list(widths)
        activations = list(activations)
        if len(widths) < 2:
            raise ValueError("need at least input and output widths")
        if len(activations) != len(widths) - 1:
            raise ValueError("need exactly one activation per layer")
        layers = [
            DenseLayer.create(n_in, n_out, act, rng)
            for n_in, n_out, act in zip(widths, widths[1:], activations)
        ]
        return cls(layers)

    @property
    def widths(self):
        return [self.layers[0].n_in] + [layer.n_out for layer in self.layers]

    @property
    def activations(self):
        return [layer.activation for layer in self.layers]

    def parameters(self):
        """Flat list of parameter arrays, [W0, b0, W1, b1, ...] (live views)."""
        params = []
        for layer in self.layers:
            params.append(layer.weights)
            params.append(layer.bias)
        return params

    def forward(self, x):
        y, _ = mlp_forward(self, x)
        return y


def mlp_forward(mlp, x):
    """Run the stack; returns (output, caches) with one cache per layer."""
    x = as_matrix(x, "x")
    caches = []
    for layer in mlp.layers:
        x, cache = layer.forward(x)
        caches.append(cache)
    return x, caches


def mlp_backward(mlp, caches, d_out):
    """Backpropagate d_out through the stack.

    Returns (d_x, grads) where grads is the flat list matching
    ``mlp.parameters()`` order.
    """
    if len(caches) != len(mlp.layers):
        raise ValueError("cache count does not match layer count")
    grads = [None] * (2 * len(mlp.layers))
    d_y = d_out
    for i in range(len(mlp.layers) - 1, -1, -1):
        d_y, d_w, d_b = mlp.layers[i].backward(caches[i], d_y)
        grads[2 * i] = d_w
        grads[2 * i + 1] = d_b
    return d_y, grads


def softmax(logits):
    """Row-wise stable softmax."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, targets, class_weights=None):
    """Class-weighted softmax cross-entropy, averaged over samples.

    loss = (1/N) * sum_i w[y_i] * (-log softmax(logits_i)[y_i])
    d_logits_i = (w[y_i] / N) * (softmax(logits_i) - onehot(y_i))

    With unit weights this is exactly the plain mean cross-entropy; a weight of
    50 on one class scales that sample's loss and gradient contribution by 50.
    """
    logits = as_matrix(logits, "logits")
    targets = np.asarray(targets)
    n, c = logits.shape
    if targets.shape != (n,):
        raise ValueError(f"targets must have shape ({n},), got {targets.shape}")
    if targets.min() < 0 or targets.max() >= c:
        raise ValueError("target ids out of range for the logit columns")
    if class_weights is None:
        w = np.ones(c)
    else:
        w = np.asarray(class_weights, dtype=np.float64)
        if w.shape != (c,):
            raise ValueError(f"class_weights must have shape ({c},)")
        if np.any(w < 0):
            raise ValueError("class_weights must be nonnegative")
    probs = softmax(logits)
    sample_w = w[targets]
    rows = np.arange(n)
    log_p = np.log(probs[rows, targets])
    loss = float(np.mean(-sample_w * log_p))
    d_logits = probs.copy()
    d_logits[rows, targets] -= 1.0
    d_logits *= (sample_w / n)[:, None]
    return loss, d_logits


class AdamState:
    """Adam accumulators for a fixed list of parameter arrays."""

    def __init__(self, params, learning_rate=DEFAULT_LEARNING_RATE,
                 beta1=DEFAULT_BETA1, beta2=DEFAULT_BETA2, eps=DEFAULT_EPS):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]


def adam_step(params, grads, state):
    """One Adam update, in place on ``params``."""
    if len(params) != len(state.m) or len(grads) != len(state.m):
        raise ValueError("params/grads do not match the Adam state")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    lr, eps = state.learning_rate, state.eps
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)


def grad_check(fun, params, eps=1e-5, floor=1e-8):
    """Compare analytic gradients with central finite differences.

    ``fun(params) -> (loss, grads)`` must be deterministic. For every
    coordinate the relative error is |a - n| / max(|a|, |n|, floor); the
    maximum over all coordinates is returned.
    """
    _, analytic = fun(params)
    worst = 0.0
    for p, g in zip(params, analytic):
        it = np.nditer(p, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            saved = p[idx]
            p[idx] = saved + eps
            plus, _ = fun(params)
            p[idx] = saved - eps
            minus, _ = fun(params)
            p[idx] = saved
            numeric = (plus - minus) / (2.0 * eps)
            a = float(g[idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
            it.iternext()
    return worst


def _format_floats(values):
    return " ".join(repr(float(v)) for v in values)


def save_checkpoint(path, nets, meta=None):
    """Write named Mlps and metadata to a versioned text container.

    Floats are written with repr() so the round trip is bit-exact.
    """
    lines = [MAGIC]
    for key in sorted(meta or {}):
        value = str((meta or {})[key])
        if "\n" in value:
            raise ValueError("meta values must be single-line")
        lines.append(f"meta {key} {value}")
    for name, mlp in nets.items():
        if " " in name:
            raise ValueError("net names must not contain spaces")
        lines.append(f"net {name}")
        lines.append(f"layers {len(mlp.layers)}")
        for layer in mlp.layers:
            lines.append(f"layer {layer.n_out} {layer.n_in} {layer.activation}")
            lines.append(_format_floats(layer.bias))
            for row in layer.weights:
                lines.append(_format_floats(row))
    lines.append("end")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path):
    """Read a container written by save_checkpoint; returns (nets, meta)."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != MAGIC:
        raise GenZ3DError(f"{path}: not a {MAGIC.split()[0]} checkpoint")
    try:
        return _parse_checkpoint_body(path, lines)
    except (IndexError, ValueError) as exc:
        raise GenZ3DError(f"{path}: truncated or malformed checkpoint ({exc})") from exc


def _parse_checkpoint_body(path, lines):
    meta = {}
    nets = {}
    i = 1
    while i < len(lines) and lines[i].startswith("meta "):
        _, key, value = lines[i].split(" ", 2)
        meta[key] = value
        i += 1
    while i < len(lines) and lines[i] != "end":
        if not lines[i].startswith("net "):
            raise GenZ3DError(f"{path}:{i + 1}: expected a net block")
        name = lines[i].split(" ", 1)[1]
        i += 1
        if i >= len(lines) or not lines[i].startswith("layers "):
            raise GenZ3DError(f"{path}:{i + 1}: expected a layer count")
        n_layers = int(lines[i].split()[1])
        i += 1
        layers = []
        for _ in range(n_layers):
            parts = lines[i].split()
            if len(parts) != 4 or parts[0] != "layer":
                raise GenZ3DError(f"{path}:{i + 1}: malformed layer header")
            n_out, n_in, activation = int(parts[1]), int(parts[2]), parts[3]
            i += 1
            bias = np.array([float(v) for v in lines[i].split()])
            if bias.shape != (n_out,):
                raise GenZ3DError(f"{path}:{i + 1}: bias length mismatch")
            i += 1
            rows = []
            for _ in range(n_out):
                row = [float(v) for v in lines[i].split()]
                if len(row) != n_in:
                    raise GenZ3DError(f"{path}:{i + 1}: weight row length mismatch")
                rows.append(row)
                i += 1
            layers.append(DenseLayer(np.array(rows), bias, activation))
        nets[name] = Mlp(layers)
    if i >= len(lines) or lines[i] != "end":
        raise GenZ3DError(f"{path}: truncated checkpoint (missing end marker)")
    return nets, meta
