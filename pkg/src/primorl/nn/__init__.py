"""Feed-forward network engine with exact analytic gradients.

Everything model- and policy-related runs on this substrate: swish MLPs
over flat float64 parameter vectors whose layout (layer 0 weights,
layer 0 biases, layer 1 weights, ...) is what update clipping operates on.
Heavy kernels are dispatched to the backend selected in ``_backend``
(compiled extension when built, numpy fallback otherwise).
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ..errors import DomainError, LayoutError
from ._backend import BACKEND, kernels

__all__ = [
    "BACKEND",
    "MlpArch",
    "MlpLayout",
    "ParamVector",
    "GradVector",
    "layout_for",
    "init_params",
    "forward",
    "forward_cached",
    "vjp",
    "gaussian_nll",
    "backward",
    "sgd_step",
    "soft_clamp",
    "soft_clamp_grad",
]

ACTIVATIONS = ("swish",)


@dataclass(frozen=True)
class MlpArch:
    """Architecture of a fully connected network with a linear output layer."""

    input_dim: int
    output_dim: int
    hidden_layers: tuple = ()
    activation: str = "swish"
    weight_decay: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        if self.input_dim <= 0 or self.output_dim <= 0:
            raise LayoutError(f"dimensions must be positive, got {self}")
        if any(h <= 0 for h in self.hidden_layers):
            raise LayoutError(f"hidden widths must be positive, got {self.hidden_layers}")
        if self.activation not in ACTIVATIONS:
            raise LayoutError(f"unsupported activation {self.activation!r}")
        if self.weight_decay < 0:
            raise LayoutError("weight_decay must be non-negative")

    @property
    def layer_count(self):
        """Number of affine layers L (hidden layers plus the output layer)."""
        return len(self.hidden_layers) + 1


class MlpLayout:
    """Offsets of every weight matrix and bias vector in the flat vector.

    Canonical order: layer 0 weights, layer 0 biases, layer 1 weights, ...
    ``layer_slices[l]`` covers the contiguous (weights, biases) block of
    layer l, the segment unit used by per-layer clipping.
    """

    def __init__(self, arch):
        dims = (arch.input_dim, *arch.hidden_layers, arch.output_dim)
        self.arch = arch
        self.w_shapes = []
        self.w_slices = []
        self.b_slices = []
        self.layer_slices = []
        off = 0
        for l in range(arch.layer_count):
            din, dout = dims[l], dims[l + 1]
            self.w_shapes.append((din, dout))
            self.w_slices.append(slice(off, off + din * dout))
            start = off
            off += din * dout
            self.b_slices.append(slice(off, off + dout))
            off += dout
            self.layer_slices.append(slice(start, off))
        self.size = off

    @property
    def layer_count(self):
        return self.arch.layer_count


@lru_cache(maxsize=None)
def layout_for(arch: MlpArch) -> MlpLayout:
    return MlpLayout(arch)


class ParamVector:
    """Flat float64 parameter (or gradient) vector plus its layout."""

    __slots__ = ("values", "layout")

    def __init__(self, values, layout):
        values = np.ascontiguousarray(values, dtype=np.float64)
        if values.ndim != 1 or values.shape[0] != layout.size:
            raise LayoutError(
                f"expected flat vector of length {layout.size}, got shape {values.shape}"
            )
        self.values = values
        self.layout = layout

    @classmethod
    def zeros(cls, arch):
        layout = layout_for(arch)
        return cls(np.zeros(layout.size), layout)

    def copy(self):
        return ParamVector(self.values.copy(), self.layout)

    def weights(self, l):
        """Writable view of layer l's weight matrix."""
        return self.values[self.layout.w_slices[l]].reshape(self.layout.w_shapes[l])

    def biases(self, l):
        return self.values[self.layout.b_slices[l]]

    def layer_segment(self, l):
        return self.values[self.layout.layer_slices[l]]

    def norm(self):
        return float(np.linalg.norm(self.values))

    def layer_norms(self):
        return [float(np.linalg.norm(self.layer_segment(l)))
                for l in range(self.layout.layer_count)]

    def __len__(self):
        return self.layout.size


GradVector = ParamVector

_INIT_SCALE = 1.0  # weights ~ U[-s/sqrt(fan_in), s/sqrt(fan_in)], biases zero


def init_params(arch, rng) -> ParamVector:
    """Fan-in-scaled uniform initialization, deterministic given rng."""
    layout = layout_for(arch)
    p = ParamVector(np.zeros(layout.size), layout)
    for l in range(layout.layer_count):
        fan_in = layout.w_shapes[l][0]
        bound = _INIT_SCALE / np.sqrt(fan_in)
        W = p.weights(l)
        W[...] = rng.uniform(-bound, bound, size=W.shape)
    return p


def _check_params(arch, params):
    if params.layout.arch != arch:
        raise LayoutError("parameter layout does not match the architecture")


def _as_batch(x, dim, what):
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DomainError(f"non-finite {what}")
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise DomainError(f"{what} must have size {dim}, got shape {x.shape}")
    return np.ascontiguousarray(x), single


def _split_params(params):
    L = params.layout.layer_count
    Ws = [params.weights(l) for l in range(L)]
    bs = [params.biases(l) for l in range(L)]
    return Ws, bs


def forward(arch, params, x):
    """Evaluate the network; accepts a single input vector or a batch."""
    _check_params(arch, params)
    X, single = _as_batch(x, arch.input_dim, "input")
    Ws, bs = _split_params(params)
    Y, _ = kernels.mlp_forward(Ws, bs, X, False)
    return Y[0] if single else Y


def forward_cached(arch, params, X):
    """Batched forward keeping the activations needed for ``vjp``."""
    _check_params(arch, params)
    X, _ = _as_batch(X, arch.input_dim, "input")
    Ws, bs = _split_params(params)
    return kernels.mlp_forward(Ws, bs, X, True)


def vjp(arch, params, cache, dY):
    """Backpropagate an output cotangent; returns (GradVector, dX)."""
    Ws, bs = _split_params(params)
    dY = np.ascontiguousarray(dY, dtype=np.float64)
    gWs, gbs, dX = kernels.mlp_vjp(Ws, bs, cache, dY)
    grad = ParamVector.zeros(arch)
    for l in range(grad.layout.layer_count):
        grad.weights(l)[...] = gWs[l]
        grad.biases(l)[...] = gbs[l]
    return grad, dX


def gaussian_nll(mean, log_var, target):
    """Diagonal-Gaussian negative log-likelihood, constant term dropped.

    0.5 * sum_j [ (target_j - mean_j)^2 * exp(-log_var_j) + log_var_j ]
    """
    mean = np.asarray(mean, dtype=np.float64)
    log_var = np.asarray(log_var, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if mean.shape != log_var.shape or mean.shape != target.shape:
        raise DomainError("mean, log_var and target must have equal shapes")
    r = target - mean
    return float(0.5 * np.sum(r * r * np.exp(-log_var) + log_var))


def soft_clamp(x, lo, hi):
    """Smooth clamp to approximately [lo, hi] via two softplus folds."""
    y = hi - _softplus(hi - x)
    return lo + _softplus(y - lo)


def soft_clamp_grad(x, lo, hi):
    y = hi - _softplus(hi - x)
    return _sigmoid(y - lo) * _sigmoid(hi - x)


def _softplus(t):
    return np.log1p(np.exp(-np.abs(t))) + np.maximum(t, 0.0)


def _sigmoid(t):
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    et = np.exp(t[~pos])
    out[~pos] = et / (1.0 + et)
    return out


def backward(arch, params, inputs, targets, log_var_bounds=None):
    """Loss and exact gradient of the Gaussian-NLL training objective.

    The network output splits into mean and log-variance halves over the
    target vector; loss is the batch-mean NLL plus weight_decay * 0.5 *
    ||weights||^2 (biases excluded). ``log_var_bounds`` applies the smooth
    clamp to the log-variance head before the NLL.
    """
    _check_params(arch, params)
    X, _ = _as_batch(inputs, arch.input_dim, "input")
    if X.shape[0] == 0:
        raise DomainError("batch must be non-empty")
    k = arch.output_dim // 2
    if arch.output_dim != 2 * k:
        raise LayoutError("NLL training needs an even output_dim (mean/log-var heads)")
    T = np.asarray(targets, dtype=np.float64)
    if T.ndim == 1:
        T = T[None, :]
    if T.shape != (X.shape[0], k):
        raise DomainError(f"targets must have shape {(X.shape[0], k)}, got {T.shape}")

    B = X.shape[0]
    Y, cache = forward_cached(arch, params, X)
    m = Y[:, :k]
    raw_lv = Y[:, k:]
    if log_var_bounds is not None:
        lo, hi = log_var_bounds
        lv = soft_clamp(raw_lv, lo, hi)
        lv_grad = soft_clamp_grad(raw_lv, lo, hi)
    else:
        lv = raw_lv
        lv_grad = 1.0

    r = T - m
    inv_var = np.exp(-lv)
    loss = float(0.5 * np.sum(r * r * inv_var + lv) / B)

    dY = np.empty_like(Y)
    dY[:, :k] = -r * inv_var / B
    dY[:, k:] = 0.5 * (1.0 - r * r * inv_var) * lv_grad / B
    grad, _ = vjp(arch, params, cache, dY)

    if arch.weight_decay > 0.0:
        wd = arch.weight_decay
        for l in range(grad.layout.layer_count):
            W = params.weights(l)
            loss += float(0.5 * wd * np.sum(W * W))
            grad.weights(l)[...] += wd * W
    return loss, grad


def sgd_step(params, grad, lr):
    """One plain gradient-descent step; returns a new ParamVector."""
    if lr <= 0:
        raise DomainError(f"learning rate must be positive, got {lr}")
    if params.layout is not grad.layout and params.layout.arch != grad.layout.arch:
        raise LayoutError("params and grad layouts differ")
    return ParamVector(params.values - lr * grad.values, params.layout)
