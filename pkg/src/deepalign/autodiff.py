"""Small reverse-mode automatic differentiation engine.

Only the operations needed by a DAN stage are provided: 2-D convolution,
2x2 max pooling, dense layers, ReLU, batch normalization, dropout, bilinear
resizing, channel concatenation and the normalized landmark loss.  Tensors
wrap numpy arrays in NCHW layout; the dtype of the inputs is preserved, so a
graph built from float64 parameters runs entirely in 64-bit.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


# activation patterns of piecewise-linear ops, collected inside kink_trace()
_kinks: list | None = None


@contextmanager
def kink_trace():
    """Record the ReLU masks and pooling arg-maxes of every graph built in the block."""
    global _kinks
    saved, _kinks = _kinks, []
    try:
        yield _kinks
    finally:
        _kinks = saved


class Tensor:
    """A node of the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _op: str = ""):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self.op = _op
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op or 'leaf'!r})"

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def sum(self) -> Tensor:
        out = Tensor(self.data.sum(), _parents=(self,), _op="sum")

        def _backward(g):
            self._accumulate(np.broadcast_to(g, self.shape))

        out._backward = _backward
        return out

    def reshape(self, *shape) -> Tensor:
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __mul__(self, other) -> Tensor:
        return mul(self, other)

    def backward(self) -> None:
        backward(self)


def parameter(data, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> list[Tensor]:
    """Backpropagate from a scalar ``loss``.

    Gradients of every node in the graph are reset first, so repeated calls on
    the same graph give identical results.  Returns the leaf tensors that
    received gradients (the parameters).
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topological_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    return [n for n in order if not n._parents and n.requires_grad]


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data, _parents=(a, b), _op="add")

    def _backward(g):
        a._accumulate(g)
        b._accumulate(g)

    out._backward = _backward
    return out


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product with a tensor of equal shape, or with a constant."""
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        out = Tensor(a.data * c, _parents=(a,), _op="mul")
        out._backward = lambda g: a._accumulate(g * c)
        return out
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data, _parents=(a, b), _op="mul")

    def _backward(g):
        a._accumulate(g * b.data)
        b._accumulate(g * a.data)

    out._backward = _backward
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _kinks is not None:
        _kinks.append(mask)
    out = Tensor(np.maximum(x.data, 0, dtype=x.dtype), _parents=(x,), _op="relu")
    out._backward = lambda g: x._accumulate(g * mask)
    return out


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(x.data.reshape(shape), _parents=(x,), _op="reshape")
    out._backward = lambda g: x._accumulate(g.reshape(x.shape))
    return out


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate NCHW tensors along the channel axis."""
    base = tensors[0].shape
    for t in tensors[1:]:
        if t.shape[0] != base[0] or t.shape[2:] != base[2:]:
            raise ValueError(f"concat_channels: incompatible shapes {base} and {t.shape}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=1), _parents=tuple(tensors), _op="concat")
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])

    def _backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            t._accumulate(g[:, lo:hi])

    out._backward = _backward
    return out


# ---------------------------------------------------------------- layers


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW input with an (O, C, KH, KW) kernel."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    o, kc, kh, kw = kernel.shape
    if kc != c:
        raise ValueError(f"conv2d: input has {c} channels but kernel expects {kc} (input {x.shape}, kernel {kernel.shape})")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be positive and padding non-negative")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    wmat = kernel.data.reshape(o, -1)
    # patch matrices are built a few samples at a time so they stay cache resident
    chunks = _chunks(n, c * kh * kw * oh * ow * xp.itemsize)
    cols = [_im2col(xp[sl], kh, kw, stride, oh, ow) for sl in chunks]
    res = np.empty((n, o, oh, ow), dtype=np.result_type(x.dtype, kernel.dtype))
    for sl, cm in zip(chunks, cols):
        res[sl] = (wmat @ cm).reshape(o, -1, oh, ow).transpose(1, 0, 2, 3)
    out = Tensor(res, _parents=(x, kernel), _op="conv2d")

    def _backward(g):
        if kernel.requires_grad:
            dw = np.zeros_like(wmat)
            for sl, cm in zip(chunks, cols):
                dw += g[sl].transpose(1, 0, 2, 3).reshape(o, -1) @ cm.T
            kernel._accumulate(dw.reshape(kernel.shape))
        if not x.requires_grad:
            return
        if stride == 1 and padding <= min(kh, kw) - 1:
            # input gradient = full correlation of g with the flipped, transposed kernel
            ph, pw = kh - 1 - padding, kw - 1 - padding
            gp = np.pad(g, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
            flipped = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
            dx = np.empty(x.shape, dtype=x.dtype)
            for sl in _chunks(n, o * kh * kw * h * w * g.itemsize):
                dx[sl] = (flipped @ _im2col(gp[sl], kh, kw, 1, h, w)).reshape(c, -1, h, w).transpose(1, 0, 2, 3)
            x._accumulate(dx)
            return
        dxp = np.zeros(xp.shape, dtype=x.dtype)
        for sl in chunks:
            gmat = g[sl].transpose(1, 0, 2, 3).reshape(o, -1)
            dcols = (wmat.T @ gmat).reshape(c, kh, kw, -1, oh, ow)
            for i in range(kh):
                for j in range(kw):
                    dxp[sl, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcols[:, i, j].transpose(1, 0, 2, 3)
        if padding:
            dxp = dxp[:, :, padding:padding + h, padding:padding + w]
        x._accumulate(dxp)

    out._backward = _backward
    return out


_CHUNK_BYTES = 4 << 20


def _chunks(n: int, bytes_per_sample: int) -> list[slice]:
    step = max(1, _CHUNK_BYTES // max(bytes_per_sample, 1))
    return [slice(lo, min(lo + step, n)) for lo in range(0, n, step)]


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Patch matrix with one row per (channel, ky, kx) and one column per output pixel."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * oh * ow)


def max_pool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping max pooling; gradient goes to the first arg-max of each window."""
    if window != stride:
        raise ValueError("max_pool2d supports only non-overlapping windows (window == stride)")
    n, c, h, w = x.shape
    if h % window or w % window:
        raise ValueError(f"max_pool2d: spatial extent {h}x{w} not divisible by {window}")
    k = window
    blocks = x.data.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // k, w // k, k * k)
    arg = blocks.argmax(axis=-1)
    if _kinks is not None:
        _kinks.append(arg)
    pooled = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    out = Tensor(pooled, _parents=(x,), _op="max_pool2d")

    def _backward(g):
        routed = np.zeros(blocks.shape, dtype=x.dtype)
        np.put_along_axis(routed, arg[..., None], g[..., None], axis=-1)
        dx = routed.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        x._accumulate(dx)

    out._backward = _backward
    return out


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weights.T + bias`` with weights of shape (out, in)."""
    if x.data.ndim != 2:
        raise ValueError(f"dense expects a flattened (N, F) input, got {x.shape}")
    if weights.shape[1] != x.shape[1] or bias.shape != (weights.shape[0],):
        raise ValueError(f"dense: input {x.shape}, weights {weights.shape}, bias {bias.shape} do not agree")
    out = Tensor(x.data @ weights.data.T + bias.data, _parents=(x, weights, bias), _op="dense")

    def _backward(g):
        x._accumulate(g @ weights.data)
        weights._accumulate(g.T @ x.data)
        bias._accumulate(g.sum(axis=0))

    out._backward = _backward
    return out


@dataclass
class BatchNormState:
    """Learned scale/shift plus running statistics for one normalized layer."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.9

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("batch norm epsilon must be positive")
        if np.any(self.running_var < 0):
            raise ValueError("running variance must be non-negative")

    @classmethod
    def create(cls, n: int, dtype=np.float32, eps: float = 1e-5, momentum: float = 0.9) -> BatchNormState:
        return cls(parameter(np.ones(n), dtype), parameter(np.zeros(n), dtype),
                   np.zeros(n, dtype=dtype), np.ones(n, dtype=dtype), eps, momentum)


def batch_norm(x: Tensor, state: BatchNormState, train: bool) -> Tensor:
    """Per-channel normalization of (N, C, H, W) or (N, F) input.

    In training mode the batch statistics are used and the running statistics
    are updated in place; in inference mode the running statistics are used and
    nothing is mutated.
    """
    if x.data.ndim == 4:
        axes, bshape = (0, 2, 3), (1, -1, 1, 1)
    elif x.data.ndim == 2:
        axes, bshape = (0,), (1, -1)
    else:
        raise ValueError(f"batch_norm expects 2-D or 4-D input, got {x.shape}")
    gamma, beta = state.gamma, state.beta
    g_b = gamma.data.reshape(bshape)

    if not train:
        inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x.data - state.running_mean.reshape(bshape)) * inv_std.reshape(bshape)
        out = Tensor(xhat * g_b + beta.data.reshape(bshape), _parents=(x, gamma, beta), _op="batch_norm")

        def _backward_infer(g):
            x._accumulate(g * (g_b * inv_std.reshape(bshape)))
            gamma._accumulate((g * xhat).sum(axis=axes))
            beta._accumulate(g.sum(axis=axes))

        out._backward = _backward_infer
        return out

    if x.shape[0] < 2:
        raise ValueError("batch_norm in training mode needs a batch of at least 2")
    m = x.data.size // x.shape[1]
    mean = x.data.mean(axis=axes)
    centered = x.data - mean.reshape(bshape)
    var = (centered * centered).mean(axis=axes)
    inv_std = (1.0 / np.sqrt(var + state.eps)).reshape(bshape)
    xhat = centered * inv_std
    out = Tensor(xhat * g_b + beta.data.reshape(bshape), _parents=(x, gamma, beta), _op="batch_norm")

    mom = state.momentum
    unbiased = var * (m / (m - 1))
    state.running_mean = (mom * state.running_mean + (1 - mom) * mean).astype(state.running_mean.dtype)
    state.running_var = (mom * state.running_var + (1 - mom) * unbiased).astype(state.running_var.dtype)

    def _backward(g):
        gamma._accumulate((g * xhat).sum(axis=axes))
        beta._accumulate(g.sum(axis=axes))
        if x.requires_grad:
            dxhat = g * g_b
            s1 = dxhat.sum(axis=axes).reshape(bshape)
            s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
            x._accumulate(inv_std / m * (m * dxhat - s1 - xhat * s2))

    out._backward = _backward
    return out


def dropout(x: Tensor, rate: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity in inference mode."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1], got {rate}")
    if not train or rate == 0.0:
        return x
    if rate == 1.0:
        mask = np.zeros(x.shape, dtype=x.dtype)
    else:
        if rng is None:
            raise ValueError("dropout in training mode needs a random generator")
        mask = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    out = Tensor(x.data * mask, _parents=(x,), _op="dropout")
    out._backward = lambda g: x._accumulate(g * mask)
    return out


def interpolation_matrix(n_out: int, n_in: int, dtype=np.float64) -> np.ndarray:
    """Linear interpolation weights mapping ``n_in`` samples to ``n_out`` with aligned corners."""
    mat = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1:
        mat[:, 0] = 1.0
        return mat
    pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    mat[rows, lo] = 1.0 - frac
    mat[rows, lo + 1] += frac
    return mat


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Separable bilinear resize of an NCHW tensor (corner pixels aligned)."""
    _, _, h, w = x.shape
    ry = interpolation_matrix(out_h, h, x.dtype)
    rx = interpolation_matrix(out_w, w, x.dtype)
    out = Tensor(np.einsum("ih,nchw,jw->ncij", ry, x.data, rx, optimize=True), _parents=(x,), _op="resize")
    out._backward = lambda g: x._accumulate(np.einsum("ih,ncij,jw->nchw", ry, g, rx, optimize=True))
    return out


def landmark_loss(delta: Tensor, base: np.ndarray, target: np.ndarray, norm: np.ndarray) -> Tensor:
    """Batch mean of the normalized mean point-to-point distance.

    ``delta`` is (N, 2P) flattened (x, y) updates, ``base`` and ``target`` are
    (N, P, 2) point sets and ``norm`` the (N,) per-sample normalizer.  The loss
    is mean_n( mean_i ||base + delta - target||_i / norm_n ).
    """
    n = delta.shape[0]
    base = np.asarray(base, dtype=delta.dtype)
    target = np.asarray(target, dtype=delta.dtype)
    norm = np.asarray(norm, dtype=delta.dtype)
    if base.shape != target.shape or base.shape[0] != n or base[0].size != delta.shape[1]:
        raise ValueError(f"landmark_loss: delta {delta.shape}, base {base.shape}, target {target.shape} disagree")
    if np.any(norm <= 0):
        raise ValueError("landmark_loss: normalizer must be positive")
    p = base.shape[1]
    diff = base + delta.data.reshape(n, p, 2) - target
    dist = np.sqrt((diff * diff).sum(axis=-1))
    per_sample = dist.mean(axis=1) / norm
    out = Tensor(per_sample.mean(), _parents=(delta,), _op="landmark_loss")

    def _backward(g):
        safe = np.where(dist > 0, dist, 1)
        unit = np.where((dist > 0)[..., None], diff / safe[..., None], 0)
        scale = (g / (n * p * norm)).reshape(n, 1, 1)
        delta._accumulate((unit * scale).reshape(n, -1))

    out._backward = _backward
    return out


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    tolerance: float
    probes: list[tuple[int, int, float, float]] = field(default_factory=list)
    skipped: int = 0    # probes redrawn because the difference straddled a kink

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def __str__(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        extra = f", {self.skipped} redrawn at kinks" if self.skipped else ""
        return (f"{verdict}: {len(self.probes)} probes{extra}, "
                f"max rel err {self.max_rel_error:.3e} (tol {self.tolerance:g})")


def _same_pattern(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def finite_difference_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    tolerance: float = 1e-3,
    probes: int = 20,
    step: float = 1e-4,
    rng: np.random.Generator | None = None,
    floor: float = 1e-8,
    skip_kinks: bool = False,
    max_redraws: int = 4,
) -> GradCheckReport:
    """Compare reverse-mode gradients against central differences.

    ``fn`` rebuilds the graph and returns a scalar loss; it must be
    deterministic (seed any dropout inside it).  ``probes`` entries in total
    are drawn, spread evenly over ``params``.  The relative error of a probe is
    |analytic - numeric| / max(|analytic|, |numeric|, floor).

    With ``skip_kinks`` a probe whose two evaluations change any ReLU mask or
    pooling arg-max is not a derivative estimate; it is replaced by another
    entry of the same tensor, up to ``max_redraws`` candidates per probe.
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        if p.dtype != np.float64:
            raise ValueError("finite_difference_check needs float64 parameters")
    with kink_trace() as base_pattern:
        loss = fn()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    # probes are dealt round-robin to the tensors that still have unsampled entries
    counts = [0] * len(params)
    remaining = min(probes, sum(p.data.size for p in params))
    while remaining:
        for k, p in enumerate(params):
            if remaining and counts[k] < p.data.size:
                counts[k] += 1
                remaining -= 1

    def evaluate(flat, idx, value):
        flat[idx] = value
        with kink_trace() as pattern:
            out = float(fn().data)
        return out, pattern

    records = []
    skipped = 0
    max_rel = max_abs = 0.0
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        tries = counts[pi] * (1 + max_redraws) if skip_kinks else counts[pi]
        accepted = 0
        for idx in rng.choice(flat.size, size=min(tries, flat.size), replace=False):
            if accepted == counts[pi]:
                break
            orig = flat[idx]
            up, up_pattern = evaluate(flat, idx, orig + step)
            down, down_pattern = evaluate(flat, idx, orig - step)
            flat[idx] = orig
            if skip_kinks and not (_same_pattern(up_pattern, base_pattern)
                                   and _same_pattern(down_pattern, base_pattern)):
                skipped += 1
                continue
            accepted += 1
            numeric = (up - down) / (2 * step)
            a = float(analytic[pi].reshape(-1)[idx])
            err = abs(a - numeric)
            rel = err / max(abs(a), abs(numeric), floor)
            max_rel = max(max_rel, rel)
            max_abs = max(max_abs, err)
            records.append((pi, int(idx), a, numeric))
    return GradCheckReport(max_rel, max_abs, tolerance, records, skipped)
