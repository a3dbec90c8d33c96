"""Small dense-network toolkit: manual backprop over float64 numpy arrays.

Conventions used throughout the package:
  * batches are (B, dim) arrays, float64
  * losses reduce with a mean over all elements (bce, mse) or over the batch
    (softmax cross entropy)
  * a layer's backward must be called right after the forward it belongs to
    (each layer caches only its latest forward); gradients accumulate until
    zero_grads()
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation, TrainingError


def relu(z):
    return np.maximum(z, 0.0)


def sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


# predicted log-variances get clamped to this range before exponentiation
LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0

# elementwise activation -> (fn(z), d_activation(z, y) with y = fn(z));
# softmax is handled separately in Dense (its Jacobian is not elementwise)
_ACTIVATIONS = {
    "linear": (lambda z: z, lambda z, y: np.ones_like(z)),
    "relu": (relu, lambda z, y: (z > 0).astype(np.float64)),
    "sigmoid": (sigmoid, lambda z, y: y * (1.0 - y)),
}


class Dense:
    """Affine layer with an elementwise activation and accumulated grads."""

    def __init__(self, name, in_dim, out_dim, activation="linear", rng=None, bias=True, w_scale=None):
        if activation not in _ACTIVATIONS and activation != "softmax":
            raise ContractViolation(f"unknown activation {activation!r}")
        if rng is None:
            rng = np.random.default_rng(0)
        if w_scale is None:
            # He scaling for relu, Xavier-ish otherwise
            w_scale = np.sqrt(2.0 / in_dim) if activation == "relu" else np.sqrt(1.0 / in_dim)
        scale = w_scale
        self.name = name
        self.activation = activation
        self.w = (
            np.zeros((in_dim, out_dim)) if scale == 0.0 else rng.normal(0.0, scale, size=(in_dim, out_dim))
        )
        self.b = np.zeros(out_dim) if bias else None
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b) if bias else None
        self._x = None
        self._z = None
        self._y = None

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        z = x @ self.w
        if self.b is not None:
            z = z + self.b
        if self.activation == "softmax":
            y = softmax(z)
        else:
            y = _ACTIVATIONS[self.activation][0](z)
        self._x, self._z, self._y = x, z, y
        return y

    def backward(self, grad_out):
        if self._x is None:
            raise ContractViolation(f"{self.name}: backward before forward")
        if self.activation == "softmax":
            y = self._y
            gz = y * (grad_out - (grad_out * y).sum(axis=-1, keepdims=True))
        else:
            gz = grad_out * _ACTIVATIONS[self.activation][1](self._z, self._y)
        self.dw += self._x.T @ gz
        if self.b is not None:
            self.db += gz.sum(axis=0)
        return gz @ self.w.T

    def named_params(self):
        out = {f"{self.name}/w": self.w}
        if self.b is not None:
            out[f"{self.name}/b"] = self.b
        return out

    def named_grads(self):
        out = {f"{self.name}/w": self.dw}
        if self.b is not None:
            out[f"{self.name}/b"] = self.db
        return out

    def zero_grads(self):
        self.dw[...] = 0.0
        if self.db is not None:
            self.db[...] = 0.0


class Mlp:
    """Stack of Dense layers; dims = [in, h1, ..., out], one activation per layer."""

    def __init__(self, name, dims, activations, rng, bias=True):
        if len(activations) != len(dims) - 1:
            raise ContractViolation("need one activation per layer")
        self.name = name
        self.layers = [
            Dense(f"{name}/l{i}", dims[i], dims[i + 1], activations[i], rng, bias=bias)
            for i in range(len(dims) - 1)
        ]

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad_out):
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out

    def named_params(self):
        out = {}
        for layer in self.layers:
            out.update(layer.named_params())
        return out

    def named_grads(self):
        out = {}
        for layer in self.layers:
            out.update(layer.named_grads())
        return out

    def zero_grads(self):
        for layer in self.layers:
            layer.zero_grads()


def merge_params(*dicts):
    """Merge named-param dicts, refusing silent collisions."""
    out = {}
    for d in dicts:
        for k, v in d.items():
            if k in out:
                raise ContractViolation(f"duplicate parameter name {k!r}")
            out[k] = v
    return out


# ---------------------------------------------------------------------------
# losses: each returns (scalar_loss, grad_wrt_first_arg)

P_EPS = 1e-7  # probability clamp


def bce_loss(p, target):
    """Binary cross entropy on probabilities, mean over all elements.

    Predictions are clamped to [P_EPS, 1 - P_EPS] first, so loss at p == t
    is ~1e-7 rather than exactly zero.
    """
    p = np.clip(p, P_EPS, 1.0 - P_EPS)
    n = p.size
    loss = -(target * np.log(p) + (1.0 - target) * np.log(1.0 - p)).sum() / n
    grad = -(target / p - (1.0 - target) / (1.0 - p)) / n
    return loss, grad


def softmax_ce_loss(logits, labels):
    """Cross entropy -log softmax(logits)[label], mean over batch.

    logits: (K,) or (B, K); labels: int or (B,) int indices. Grad is wrt
    logits, matching their shape.
    """
    logits = np.asarray(logits, dtype=np.float64)
    squeeze = logits.ndim == 1
    z = logits[None, :] if squeeze else logits
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if lab.shape[0] != z.shape[0]:
        raise ContractViolation("labels length does not match batch size")
    if lab.size and (lab.min() < 0 or lab.max() >= z.shape[1]):
        raise ContractViolation("label index out of range")
    b = z.shape[0]
    logp = log_softmax(z)
    loss = -logp[np.arange(b), lab].sum() / b
    grad = np.exp(logp)
    grad[np.arange(b), lab] -= 1.0
    grad /= b
    return loss, (grad[0] if squeeze else grad)


def mse_loss(pred, target):
    """Mean squared error over all elements."""
    diff = pred - target
    n = diff.size
    return (diff * diff).sum() / n, 2.0 * diff / n


# ---------------------------------------------------------------------------
# stochastic nodes (functional: forward returns a cache for the backward)


def reparameterize(mean, logvar, rng):
    """Sample mean + std * eps with std = exp(logvar / 2). Returns (sample, cache)."""
    eps = rng.standard_normal(mean.shape)
    std = np.exp(0.5 * logvar)
    return mean + std * eps, (eps, std)


def reparameterize_backward(cache, grad_sample):
    eps, std = cache
    return grad_sample, 0.5 * grad_sample * eps * std


def st_gumbel_softmax(logits, temperature, rng, hard=True):
    """Straight-through Gumbel-softmax sample. Returns (sample, cache).

    With hard=True the forward value is the one-hot argmax while gradients
    flow as if the soft sample had been returned.
    """
    if temperature <= 0:
        raise ContractViolation("temperature must be positive")
    u = np.clip(rng.random(logits.shape), 1e-12, 1.0 - 1e-12)
    g = -np.log(-np.log(u))
    y = softmax((logits + g) / temperature)
    cache = (y, temperature)
    if not hard:
        return y, cache
    hard_sample = np.zeros_like(y)
    hard_sample[np.arange(y.shape[0]), y.argmax(axis=1)] = 1.0
    return hard_sample, cache


def st_gumbel_backward(cache, grad_sample):
    y, temperature = cache
    inner = grad_sample - (grad_sample * y).sum(axis=1, keepdims=True)
    return y * inner / temperature


# ---------------------------------------------------------------------------


class Adam:
    """Adam over a dict of named parameter arrays (updated in place).

    Moments live in one flat buffer so a step is a handful of vector ops
    instead of a Python loop over parameters; this matters in RL loops
    that take hundreds of thousands of small steps.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, l2=0.0):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.l2 = l2
        self.t = 0
        self._order = sorted(self.params)
        self._slices = {}
        off = 0
        for name in self._order:
            size = self.params[name].size
            self._slices[name] = slice(off, off + size)
            off += size
        self._m = np.zeros(off)
        self._v = np.zeros(off)
        self._g = np.empty(off)
        self._t1 = np.empty(off)
        self._t2 = np.empty(off)

    def step(self, grads):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        g, m, v, t1, t2 = self._g, self._m, self._v, self._t1, self._t2
        for name in self._order:
            g[self._slices[name]] = grads[name].ravel()
        if not np.isfinite(g).all():
            for name in self._order:
                if not np.isfinite(grads[name]).all():
                    raise TrainingError(f"non-finite gradient for {name}")
        if self.l2:
            for name in self._order:
                t1[self._slices[name]] = self.params[name].ravel()
            np.multiply(t1, self.l2, out=t1)
            np.add(g, t1, out=g)
        np.multiply(m, self.beta1, out=m)
        np.multiply(g, 1.0 - self.beta1, out=t1)
        m += t1
        np.multiply(v, self.beta2, out=v)
        np.multiply(g, 1.0 - self.beta2, out=t1)
        np.multiply(t1, g, out=t1)
        v += t1
        np.divide(m, b1c, out=t1)
        np.multiply(t1, self.lr, out=t1)
        np.divide(v, b2c, out=t2)
        np.sqrt(t2, out=t2)
        np.add(t2, self.eps, out=t2)
        np.divide(t1, t2, out=t1)
        for name in self._order:
            p = self.params[name]
            p -= t1[self._slices[name]].reshape(p.shape)


# ---------------------------------------------------------------------------
# finite differences, for verifying hand-written gradients


def numeric_gradient(f, x, eps=1e-5):
    """Central-difference gradient of scalar f at x (array perturbed in place)."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def relative_error(a, b):
    """Max elementwise |a - b| / max(|a| + |b|, 1e-8)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.abs(a) + np.abs(b), 1e-8)
    return float((np.abs(a - b) / denom).max())
