"""Layer set, Adam and finite-difference gradient checks.

Tensors and reverse-mode gradients come from torch; the functions here pin
down the shapes and conventions the models rely on (3x3 same-padding
convolutions, 2x2 stride-2 pooling and upsampling, seeded dropout).
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numba
import numpy as np
import torch
import torch.nn.functional as F


class ShapeError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.name = name


def _expect_ndim(x: torch.Tensor, ndim: int, what: str):
    if x.dim() != ndim:
        raise ShapeError(f"{what} expects a {ndim}-D tensor, got shape {tuple(x.shape)}")


def conv2d(x, weight, bias=None, padding: int = 1):
    """Stride-1 cross-correlation, zero padded. x: (B, Cin, H, W), weight: (Cout, Cin, kh, kw)."""
    _expect_ndim(x, 4, "conv2d input")
    _expect_ndim(weight, 4, "conv2d kernel")
    if weight.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, kernel expects {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv2d: bias shape {tuple(bias.shape)} does not match {weight.shape[0]} output channels")
    return F.conv2d(x, weight, bias, stride=1, padding=padding)


def conv_transpose2d(x, weight, bias=None, stride: int = 2, padding: int = 0):
    """Transposed convolution (gradient of conv2d). weight: (Cin, Cout, kh, kw).

    The default 2x2 kernel with stride 2 doubles H and W exactly.
    """
    _expect_ndim(x, 4, "conv_transpose2d input")
    _expect_ndim(weight, 4, "conv_transpose2d kernel")
    if weight.shape[0] != x.shape[1]:
        raise ShapeError(f"conv_transpose2d: input has {x.shape[1]} channels, kernel expects {weight.shape[0]}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"conv_transpose2d: bias shape {tuple(bias.shape)} does not match {weight.shape[1]} output channels")
    return F.conv_transpose2d(x, weight, bias, stride=stride, padding=padding)


def maxpool2d(x):
    """2x2 max pooling, stride 2.

    The backward pass sends each window's gradient to its first maximal
    element in row-major order.
    """
    _expect_ndim(x, 4, "maxpool2d input")
    if x.shape[-1] % 2 or x.shape[-2] % 2:
        raise ShapeError(f"maxpool2d needs even spatial dims, got {tuple(x.shape[-2:])}")
    return F.max_pool2d(x, 2, 2)


def batchnorm2d(x, gamma, beta, running_mean, running_var, training: bool, momentum: float = 0.1, eps: float = 1e-5):
    """Per-channel batch normalization.

    In training mode the batch statistics normalize ``x`` and the running
    statistics are updated in place; in eval mode the running statistics are
    used.
    """
    _expect_ndim(x, 4, "batchnorm2d input")
    if eps <= 0:
        raise ValueError("eps must be positive")
    return F.batch_norm(x, running_mean, running_var, gamma, beta, training, momentum, eps)


def linear(x, weight, bias=None):
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input width {x.shape[-1]} does not match weight {tuple(weight.shape)}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias shape {tuple(bias.shape)} does not match {weight.shape[0]} outputs")
    return F.linear(x, weight, bias)


def relu(x):
    return torch.clamp_min(x, 0.0)


def sigmoid(x):
    return torch.sigmoid(x)


def softmax(x, axis: int = -1):
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=axis, keepdim=True)


def dropout(x, p: float, training: bool, generator: torch.Generator | None = None):
    """Inverted dropout: zero with probability ``p``, scale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device) >= p
    return x * keep / (1.0 - p)


# -- modules -----------------------------------------------------------------

def he_uniform_(tensor: torch.Tensor, fan_in: float, generator: torch.Generator | None = None):
    bound = math.sqrt(6.0 / fan_in)
    with torch.no_grad():
        return tensor.uniform_(-bound, bound, generator=generator)


def fan_in_uniform_(tensor: torch.Tensor, fan_in: float, generator: torch.Generator | None = None):
    """U(-1/sqrt(fan_in), 1/sqrt(fan_in)); a third of the He variance, for heads trained at tiny lr."""
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        return tensor.uniform_(-bound, bound, generator=generator)


_INITS = {"he": he_uniform_, "fan_in": fan_in_uniform_}


class Conv2d(torch.nn.Module):
    def __init__(self, in_channels, out_channels, kernel_size=3, padding=1, generator=None, dtype=torch.float32):
        super().__init__()
        self.padding = padding
        self.weight = torch.nn.Parameter(torch.empty(out_channels, in_channels, kernel_size, kernel_size, dtype=dtype))
        self.bias = torch.nn.Parameter(torch.zeros(out_channels, dtype=dtype))
        he_uniform_(self.weight, in_channels * kernel_size * kernel_size, generator)

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.padding)


class ConvTranspose2d(torch.nn.Module):
    def __init__(self, in_channels, out_channels, kernel_size=2, stride=2, padding=0, generator=None, dtype=torch.float32):
        super().__init__()
        self.stride, self.padding = stride, padding
        self.weight = torch.nn.Parameter(torch.empty(in_channels, out_channels, kernel_size, kernel_size, dtype=dtype))
        self.bias = torch.nn.Parameter(torch.zeros(out_channels, dtype=dtype))
        # each output pixel sees about k*k/stride**2 taps per input channel
        he_uniform_(self.weight, max(1.0, in_channels * kernel_size * kernel_size / stride**2), generator)

    def forward(self, x):
        return conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(torch.nn.Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=torch.float32):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.weight = torch.nn.Parameter(torch.ones(channels, dtype=dtype))
        self.bias = torch.nn.Parameter(torch.zeros(channels, dtype=dtype))
        self.register_buffer("running_mean", torch.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", torch.ones(channels, dtype=dtype))

    def forward(self, x):
        return batchnorm2d(x, self.weight, self.bias, self.running_mean, self.running_var,
                           self.training, self.momentum, self.eps)


class Linear(torch.nn.Module):
    def __init__(self, in_features, out_features, bias=True, generator=None, dtype=torch.float32, init="he"):
        super().__init__()
        if init not in _INITS:
            raise ValueError(f"unknown init {init!r}; choose from {sorted(_INITS)}")
        self.weight = torch.nn.Parameter(torch.empty(out_features, in_features, dtype=dtype))
        self.bias = torch.nn.Parameter(torch.zeros(out_features, dtype=dtype)) if bias else None
        _INITS[init](self.weight, in_features, generator)

    def forward(self, x):
        return linear(x, self.weight, self.bias)


# -- Adam ----------------------------------------------------------------------

@numba.njit(cache=True, fastmath={"nsz", "arcp", "contract"})
def _adam_kernel(p, g, m, v, step_size, beta1, beta2, c1, c2, eps, bias2):
    for i in range(p.size):
        gi = g[i]
        mi = beta1 * m[i] + c1 * gi
        vi = beta2 * v[i] + c2 * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= step_size * mi / (np.sqrt(vi / bias2) + eps)


class ParamStore:
    """Named parameters with their Adam moment estimates and step counter."""

    def __init__(self, named_params: Iterable[tuple[str, torch.Tensor]]):
        self.params: dict[str, torch.Tensor] = {}
        for name, p in named_params:
            if not p.is_contiguous():
                raise ValueError(f"parameter {name!r} must be contiguous")
            self.params[name] = p
        self.m = {n: torch.zeros_like(p, requires_grad=False) for n, p in self.params.items()}
        self.v = {n: torch.zeros_like(p, requires_grad=False) for n, p in self.params.items()}
        self.step = 0

    @classmethod
    def from_module(cls, module: torch.nn.Module) -> "ParamStore":
        return cls((n, p) for n, p in module.named_parameters() if p.requires_grad)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def _flat_numpy(t: torch.Tensor) -> np.ndarray:
    return t.detach().reshape(-1).numpy()


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ParamStore:
    """One bias-corrected Adam update of every parameter that has a gradient.

    Parameters whose ``.grad`` is None are left alone (their moments are not
    decayed either).
    """
    grads = {}
    for name, p in store.params.items():
        if p.grad is None:
            continue
        # a finite sum implies finite entries; only fall back to the full scan otherwise
        if not torch.isfinite(p.grad.sum()) and not torch.isfinite(p.grad).all():
            raise NonFiniteGradientError(name)
        grads[name] = p.grad.contiguous()
    store.step += 1
    t = store.step
    dtype_cache = {}
    for name, g in grads.items():
        p = store.params[name]
        np_dtype = _flat_numpy(p).dtype.type
        if np_dtype not in dtype_cache:
            dtype_cache[np_dtype] = (
                np_dtype(lr / (1 - beta1**t)), np_dtype(beta1), np_dtype(beta2),
                np_dtype(1 - beta1), np_dtype(1 - beta2), np_dtype(eps), np_dtype(1 - beta2**t),
            )
        _adam_kernel(_flat_numpy(p), _flat_numpy(g), _flat_numpy(store.m[name]), _flat_numpy(store.v[name]),
                     *dtype_cache[np_dtype])
    return store


# -- gradient checking ---------------------------------------------------------

def grad_check(
    fn: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    h: float = 1e-4,
    max_elements: int | None = None,
    floor_frac: float = 1e-3,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central finite differences.

    ``fn(*inputs)`` may return any shape; it is reduced to a scalar with fixed
    random weights. The relative error of an element is
    ``|g_ad - g_fd| / max(|g_ad|, |g_fd|, floor)`` where ``floor`` is
    ``floor_frac`` times the largest autograd magnitude over all inputs, so
    entries whose true gradient is zero (a bias feeding batch norm, say) are
    compared on the overall gradient scale instead of amplifying rounding
    noise. ``max_elements`` limits how many entries per input
    are perturbed (a seeded random subset).
    """
    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    probe = None

    def scalar(*args):
        nonlocal probe
        out = fn(*args)
        if probe is None:
            probe = torch.randn(out.shape, generator=gen, dtype=out.dtype)
        return (out * probe).sum()

    inputs = [x.detach().clone().requires_grad_(True) for x in inputs]
    loss = scalar(*inputs)
    analytic = torch.autograd.grad(loss, inputs, allow_unused=True)

    analytic = [torch.zeros_like(x) if g is None else g for x, g in zip(inputs, analytic)]
    scale = max((float(g.abs().max()) for g in analytic if g.numel()), default=0.0)
    floor = max(floor_frac * scale, 1e-12)
    worst = 0.0
    with torch.no_grad():
        for x, g_ad in zip(inputs, analytic):
            flat = x.view(-1)
            idx = np.arange(flat.numel())
            if max_elements is not None and idx.size > max_elements:
                idx = np.sort(rng.choice(idx, size=max_elements, replace=False))
            g_flat = g_ad.reshape(-1)
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + h
                up = scalar(*inputs).item()
                flat[i] = orig - h
                down = scalar(*inputs).item()
                flat[i] = orig
                fd = (up - down) / (2 * h)
                ad = g_flat[i].item()
                err = abs(ad - fd) / max(abs(ad), abs(fd), floor)
                worst = max(worst, err)
    return worst
