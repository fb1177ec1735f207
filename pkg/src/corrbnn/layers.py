"""Network layers: frequentist and Bayesian dense / 2-D convolution, plus
activations, pooling, dropout, and the classification loss.

A Bayesian layer owns variational parameters for its weights and biases,
draws concrete parameters per forward pass via the tridiagonal factor, and
maps classical gradients back to the variational parameters in its backward
pass.  Weight tensors are correlated along their row-major flattening; see
flatten_order.
"""

from __future__ import annotations

import numpy as np

from . import corrgauss
from .corrgauss import PriorSpec, VariationalParams


class MissingForward(RuntimeError):
    """backward was requested without a stored forward pass."""


# ---------------------------------------------------------------------------
# classical building blocks


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return x @ w.T + b


def dense_backward(x, w, dy):
    return dy @ w, dy.T @ x, dy.sum(axis=0)


def im2col(x: np.ndarray, kh: int, kw: int, stride: int = 1) -> np.ndarray:
    """Lower (batch, C, H, W) into (batch, out_h*out_w, C*kh*kw) patches."""
    n, c, h, w = x.shape
    out_h = (h - kh) // stride + 1
    out_w = (w - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    patches = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, out_h, out_w, kh, kw),
        strides=(s0, s1, s2 * stride, s3 * stride, s2, s3),
        writeable=False,
    )
    cols = patches.transpose(0, 2, 3, 1, 4, 5).reshape(n, out_h * out_w, c * kh * kw)
    return np.ascontiguousarray(cols)


def col2im(cols, x_shape, kh, kw, stride=1):
    """Adjoint of im2col: scatter patch gradients back onto the image."""
    n, c, h, w = x_shape
    out_h = (h - kh) // stride + 1
    out_w = (w - kw) // stride + 1
    dx = np.zeros(x_shape)
    cols = cols.reshape(n, out_h, out_w, c, kh, kw)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i : i + out_h * stride : stride, j : j + out_w * stride : stride] += (
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return dx


def conv_forward(x, kernel, b, stride=1, pad=0):
    """Cross-correlation of (batch, C, H, W) with (out_c, C, kh, kw) kernels."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n = x.shape[0]
    out_c, _, kh, kw = kernel.shape
    out_h = (x.shape[2] - kh) // stride + 1
    out_w = (x.shape[3] - kw) // stride + 1
    cols = im2col(x, kh, kw, stride)
    y = cols @ kernel.reshape(out_c, -1).T + b
    return y.transpose(0, 2, 1).reshape(n, out_c, out_h, out_w), cols


def conv_backward(cols, x_shape, kernel, dy, stride=1, pad=0):
    out_c = kernel.shape[0]
    n = dy.shape[0]
    dy_flat = dy.reshape(n, out_c, -1).transpose(0, 2, 1)
    dk = np.einsum("npo,npk->ok", dy_flat, cols).reshape(kernel.shape)
    db = dy_flat.sum(axis=(0, 1))
    dcols = dy_flat @ kernel.reshape(out_c, -1)
    padded = (x_shape[0], x_shape[1], x_shape[2] + 2 * pad, x_shape[3] + 2 * pad)
    dx = col2im(dcols, padded, kernel.shape[2], kernel.shape[3], stride)
    if pad:
        dx = dx[:, :, pad:-pad, pad:-pad]
    return dx, dk, db


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(x, dy):
    # derivative at exactly zero defined as zero
    return np.where(x > 0, dy, 0.0)


def maxpool_forward(x, size, stride):
    """Max pooling with ties broken by the first (lowest flat index) maximum.

    Returns (output, argmax) where argmax holds flat within-window indices.
    """
    n, c, h, w = x.shape
    out_h = (h - size) // stride + 1
    out_w = (w - size) // stride + 1
    s0, s1, s2, s3 = x.strides
    win = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, out_h, out_w, size, size),
        strides=(s0, s1, s2 * stride, s3 * stride, s2, s3),
        writeable=False,
    ).reshape(n, c, out_h, out_w, size * size)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool_backward(x_shape, arg, dy, size, stride):
    n, c, h, w = x_shape
    out_h, out_w = arg.shape[2], arg.shape[3]
    dx = np.zeros(x_shape)
    ii = arg // size
    jj = arg % size
    oh = np.arange(out_h)[None, None, :, None]
    ow = np.arange(out_w)[None, None, None, :]
    rows = oh * stride + ii
    cols = ow * stride + jj
    nn = np.arange(n)[:, None, None, None]
    cc = np.arange(c)[None, :, None, None]
    np.add.at(dx, (nn, cc, rows, cols), dy)
    return dx


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch and its gradient on the logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    loss = -np.mean(np.log(probs[np.arange(n), labels] + 1e-300))
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def flatten_index(shape: tuple, index: tuple) -> int:
    """Position of a tensor element in the row-major correlation chain."""
    return int(np.ravel_multi_index(index, shape))


def unflatten_index(shape: tuple, flat: int) -> tuple:
    return tuple(int(v) for v in np.unravel_index(flat, shape))


def init_tau_delta(tau: float) -> float:
    """Inverse softplus: delta such that reparam_tau(delta) = tau."""
    return float(np.log(np.expm1(tau)))


# ---------------------------------------------------------------------------
# layer objects


class Layer:
    """Minimal layer protocol: forward/backward plus named parameter access."""

    bayesian = False

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def param_names(self):
        return []

    def get_param(self, name):
        raise KeyError(name)

    def set_param(self, name, value):
        raise KeyError(name)

    def add_to_param(self, name, delta):
        self.set_param(name, self.get_param(name) + delta)

    @property
    def grads(self):
        return getattr(self, "_grads", {})

    def kl(self) -> float:
        return 0.0


class ReLU(Layer):
    def forward(self, x, train=True):
        self._x = x
        return relu_forward(x)

    def backward(self, dy):
        return relu_backward(self._x, dy)


class MaxPool(Layer):
    def __init__(self, size: int, stride: int):
        self.size = size
        self.stride = stride

    def forward(self, x, train=True):
        self._shape = x.shape
        out, self._arg = maxpool_forward(x, self.size, self.stride)
        return out

    def backward(self, dy):
        return maxpool_backward(self._shape, self._arg, dy, self.size, self.stride)


class Flatten(Layer):
    def forward(self, x, train=True):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._shape)


class Dropout(Layer):
    """Inverted dropout; active only while training.  Frequentist nets only."""

    def __init__(self, rate: float):
        self.rate = rate
        self.rng_uniform = None  # set by the net: callable(shape) -> uniforms

    def forward(self, x, train=True):
        if not train or self.rate == 0.0:
            self._mask = None
            return x
        draw = self.rng_uniform(x.shape) if self.rng_uniform else np.random.random(x.shape)
        self._mask = (draw >= self.rate) / (1.0 - self.rate)
        return x * self._mask

    def backward(self, dy):
        return dy if self._mask is None else dy * self._mask


class Dense(Layer):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator):
        s = np.sqrt(6.0 / (fan_in + fan_out))
        self.w = rng.uniform(-s, s, size=(fan_out, fan_in))
        self.b = np.full(fan_out, 0.1)

    def forward(self, x, train=True):
        self._x = x
        return dense_forward(x, self.w, self.b)

    def backward(self, dy):
        dx, dw, db = dense_backward(self._x, self.w, dy)
        self._grads = {"w": dw, "b": db}
        return dx

    def param_names(self):
        return ["w", "b"]

    def get_param(self, name):
        return getattr(self, name)

    def set_param(self, name, value):
        setattr(self, name, value)


class Conv(Layer):
    def __init__(self, in_c, out_c, ksize, rng, stride=1, pad=0):
        fan_in = in_c * ksize * ksize
        fan_out = out_c * ksize * ksize
        s = np.sqrt(6.0 / (fan_in + fan_out))
        self.w = rng.uniform(-s, s, size=(out_c, in_c, ksize, ksize))
        self.b = np.full(out_c, 0.1)
        self.stride = stride
        self.pad = pad

    def forward(self, x, train=True):
        self._x_shape = x.shape
        out, self._cols = conv_forward(x, self.w, self.b, self.stride, self.pad)
        return out

    def backward(self, dy):
        dx, dw, db = conv_backward(
            self._cols, self._x_shape, self.w, dy, self.stride, self.pad
        )
        self._grads = {"w": dw, "b": db}
        return dx

    def param_names(self):
        return ["w", "b"]

    def get_param(self, name):
        return getattr(self, name)

    def set_param(self, name, value):
        setattr(self, name, value)


class _BayesMixin:
    """Variational bookkeeping shared by Bayesian dense and conv layers.

    The weight tensor correlates along its row-major flattening; biases form
    their own chain.  sample() must run before forward(), and forward() before
    backward().
    """

    bayesian = True

    def _init_variational(self, w_shape, n_bias, rng,
                          prior: PriorSpec, bias_prior: PriorSpec,
                          init_tau=0.05):
        if len(w_shape) == 2:
            s = np.sqrt(6.0 / (w_shape[0] + w_shape[1]))
        else:
            k = int(np.prod(w_shape[1:]))
            s = np.sqrt(6.0 / (w_shape[0] * w_shape[2] * w_shape[3] + k))
        m_w = rng.uniform(-s, s, size=int(np.prod(w_shape)))
        m_b = np.full(n_bias, 0.1)
        delta0 = init_tau_delta(init_tau)
        g_w = corrgauss.GAMMA_FLOOR if rng.random() < 0.5 else -corrgauss.GAMMA_FLOOR
        g_b = corrgauss.GAMMA_FLOOR if rng.random() < 0.5 else -corrgauss.GAMMA_FLOOR
        self.w_shape = tuple(w_shape)
        self.weight_params = VariationalParams(m_w, delta0, g_w)
        self.bias_params = VariationalParams(m_b, delta0, g_b)
        self.weight_prior = prior
        self.bias_prior = bias_prior
        self._sampled = None

    def stabilize(self, rng: np.random.Generator):
        self.weight_params = corrgauss.stabilize_params(self.weight_params, rng)
        self.bias_params = corrgauss.stabilize_params(self.bias_params, rng)

    def sample(self, noise_w: np.ndarray, noise_b: np.ndarray):
        """Build factors and draw concrete weights/biases for this pass."""
        pw, pb = self.weight_params, self.bias_params
        tau_w = corrgauss.reparam_tau(pw.delta)
        rho_w = corrgauss.reparam_rho(pw.gamma)
        tau_b = corrgauss.reparam_tau(pb.delta)
        rho_b = corrgauss.reparam_rho(pb.gamma)
        self._factor_w = corrgauss.build_factor(pw.m, tau_w, rho_w)
        self._factor_b = corrgauss.build_factor(pb.m, tau_b, rho_b)
        self._noise_w = np.asarray(noise_w, dtype=np.float64)
        self._noise_b = np.asarray(noise_b, dtype=np.float64)
        w = corrgauss.sample(pw.m, self._factor_w, self._noise_w)
        b = corrgauss.sample(pb.m, self._factor_b, self._noise_b)
        self._sampled = (w.reshape(self.w_shape), b)

    def sample_at_mean(self):
        """Deterministic pass at the variational means (zero noise)."""
        self.sample(np.zeros(self.weight_params.m.size), np.zeros(self.bias_params.m.size))

    def kl(self) -> float:
        if self._sampled is None:
            raise MissingForward("sample() must run before kl()")
        return corrgauss.kl_to_prior(
            self.weight_params.m, self._factor_w.tau, self._factor_w, self.weight_prior
        ) + corrgauss.kl_to_prior(
            self.bias_params.m, self._factor_b.tau, self._factor_b, self.bias_prior
        )

    def _variational_backward(self, dw_flat, db, nu, kappa):
        pw, pb = self.weight_params, self.bias_params
        dm_w, dd_w, dg_w = corrgauss.backward_sweep(
            pw.m, pw.delta, pw.gamma, self._factor_w, self._noise_w, dw_flat,
            self.weight_prior, nu,
        )
        dm_b, dd_b, dg_b = corrgauss.backward_sweep(
            pb.m, pb.delta, pb.gamma, self._factor_b, self._noise_b, db,
            self.bias_prior, nu,
        )
        self._grads = {
            "w_m": dm_w,
            "w_delta": dd_w,
            "w_gamma": kappa * dg_w,
            "b_m": dm_b,
            "b_delta": dd_b,
            "b_gamma": kappa * dg_b,
        }

    _scalar_params = {"w_delta", "w_gamma", "b_delta", "b_gamma"}

    def param_names(self):
        return ["w_m", "w_delta", "w_gamma", "b_m", "b_delta", "b_gamma"]

    def get_param(self, name):
        group = self.weight_params if name.startswith("w_") else self.bias_params
        field = name.split("_", 1)[1]
        return getattr(group, field)

    def set_param(self, name, value):
        group = self.weight_params if name.startswith("w_") else self.bias_params
        field = name.split("_", 1)[1]
        if field == "m":
            group.m = np.asarray(value, dtype=np.float64)
        else:
            setattr(group, field, float(value))


class BayesDense(_BayesMixin, Layer):
    def __init__(self, fan_in, fan_out, rng, prior: PriorSpec, bias_prior: PriorSpec,
                 init_tau=0.05):
        self.fan_in, self.fan_out = fan_in, fan_out
        self._init_variational((fan_out, fan_in), fan_out, rng, prior, bias_prior,
                               init_tau)

    def forward(self, x, train=True):
        if self._sampled is None:
            raise MissingForward("sample() must run before forward()")
        self._x = x
        w, b = self._sampled
        return dense_forward(x, w, b)

    def backward(self, dy, nu=0.0, kappa=1.0):
        if self._sampled is None or not hasattr(self, "_x"):
            raise MissingForward("no stored forward pass")
        w, _ = self._sampled
        dx, dw, db = dense_backward(self._x, w, dy)
        self._variational_backward(dw.ravel(), db, nu, kappa)
        return dx


class BayesConv(_BayesMixin, Layer):
    def __init__(self, in_c, out_c, ksize, rng, prior: PriorSpec,
                 bias_prior: PriorSpec, stride=1, pad=0, init_tau=0.05):
        self.stride, self.pad = stride, pad
        self._init_variational((out_c, in_c, ksize, ksize), out_c, rng,
                               prior, bias_prior, init_tau)

    def forward(self, x, train=True):
        if self._sampled is None:
            raise MissingForward("sample() must run before forward()")
        self._x_shape = x.shape
        w, b = self._sampled
        out, self._cols = conv_forward(x, w, b, self.stride, self.pad)
        return out

    def backward(self, dy, nu=0.0, kappa=1.0):
        if self._sampled is None or not hasattr(self, "_x_shape"):
            raise MissingForward("no stored forward pass")
        w, _ = self._sampled
        dx, dw, db = conv_backward(self._cols, self._x_shape, w, dy,
                                   self.stride, self.pad)
        self._variational_backward(dw.ravel(), db, nu, kappa)
        return dx
