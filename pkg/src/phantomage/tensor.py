"""Minimal dense-tensor reverse-mode autodiff engine.

Single-threaded per tape; nodes are recorded in creation order, which is a
valid topological order, so backward is a single reverse sweep. Only the
operations needed by the 3D encoder, the losses, and saliency computation
are provided; there is no broadcasting beyond what those require.

Conventions:
  - volumes flow through the network as (N, C, D, H, W)
  - ReLU subgradient at exactly 0 is 0
  - sqrt0 has subgradient 0 at 0 (keeps pairwise-distance losses finite
    for coincident points)
  - loss reductions should be computed on float64 tensors (see cast)
"""

from __future__ import annotations

import dataclasses
import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class TensorError(Exception):
    pass


class ShapeMismatchError(TensorError):
    pass


class NonFiniteError(TensorError):
    pass


class BackwardBeforeForwardError(TensorError):
    pass


class Tape:
    """Records operations so gradients can be replayed in reverse."""

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Tensor] = []
        self.check_finite = check_finite

    def _register(self, t: "Tensor") -> "Tensor":
        t._index = len(self.nodes)
        self.nodes.append(t)
        if self.check_finite and not np.all(np.isfinite(t.value)):
            raise NonFiniteError(
                f"non-finite values produced by op '{t.op}' with shape {t.shape}"
            )
        return t

    def tensor(self, value, requires_grad: bool = False, name: str | None = None) -> "Tensor":
        """Create a leaf node from an array."""
        arr = np.asarray(value)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        t = Tensor(arr, self, requires_grad=requires_grad, op="leaf", name=name)
        return self._register(t)

    def backward(self, output: "Tensor", seed=None) -> None:
        """Accumulate gradients of `output` w.r.t. every differentiable node."""
        if output.tape is not self:
            raise BackwardBeforeForwardError("output does not belong to this tape")
        if not self.nodes:
            raise BackwardBeforeForwardError("backward called on an empty tape")
        if seed is None:
            seed = np.ones(output.shape, dtype=output.value.dtype)
        else:
            seed = np.asarray(seed, dtype=output.value.dtype)
            if seed.shape != tuple(output.shape):
                raise ShapeMismatchError(
                    f"seed shape {seed.shape} != output shape {tuple(output.shape)}"
                )
        output._accumulate(seed)
        for node in reversed(self.nodes[: output._index + 1]):
            if node.grad is None or node._backward is None:
                continue
            node._backward(node.grad)

    def release(self) -> None:
        """Drop all recorded nodes and break their reference cycles.

        Backward closures capture parent tensors, and tensors point back at
        the tape, so a finished tape is cyclic garbage holding large arrays;
        the cycle collector runs too rarely to keep up during training, so
        callers free tapes explicitly once gradients have been read."""
        for node in self.nodes:
            node._backward = None
            node._parents = ()
            node.grad = None
        self.nodes.clear()


class Tensor:
    """A node on a tape: value, optional gradient, and a backward closure."""

    __slots__ = ("value", "tape", "requires_grad", "grad", "op", "name",
                 "_parents", "_backward", "_index")

    def __init__(self, value: np.ndarray, tape: Tape, requires_grad=False,
                 op="leaf", name=None, parents=(), backward=None):
        self.value = value
        self.tape = tape
        self.requires_grad = requires_grad
        self.grad = None
        self.op = op
        self.name = name
        self._parents = parents
        self._backward = backward
        self._index = -1

    @property
    def shape(self):
        return self.value.shape

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.value.shape:
            raise ShapeMismatchError(
                f"gradient shape {g.shape} != value shape {self.value.shape} at op '{self.op}'"
            )
        if self.grad is None:
            self.grad = g.astype(self.value.dtype, copy=True)
        else:
            self.grad += g

    def item(self) -> float:
        return float(np.asarray(self.value).reshape(()))


def _node(tape, value, op, parents, backward):
    needs = any(p.requires_grad for p in parents)
    t = Tensor(np.ascontiguousarray(value), tape, requires_grad=needs, op=op,
               parents=parents, backward=backward if needs else None)
    return tape._register(t)


def _same_shape(op, a, b):
    if a.value.shape != b.value.shape:
        raise ShapeMismatchError(f"{op}: shapes {a.value.shape} vs {b.value.shape}")


# ---------------------------------------------------------------------------
# elementwise and linear algebra


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _node(a.tape, a.value + b.value, "add", (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return _node(a.tape, a.value - b.value, "sub", (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.value)
        if b.requires_grad:
            b._accumulate(g * a.value)

    return _node(a.tape, a.value * b.value, "mul", (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * c)

    return _node(a.tape, a.value * c, "scale", (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * mask)

    return _node(a.tape, np.where(mask, a.value, 0), "relu", (a,), backward)


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.value)  # 0 at exact ties, matching the L1 convention

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * sign)

    return _node(a.tape, np.abs(a.value), "abs", (a,), backward)


def exp(a: Tensor) -> Tensor:
    out_val = np.exp(a.value)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_val)

    return _node(a.tape, out_val, "exp", (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.value)

    return _node(a.tape, np.log(a.value), "log", (a,), backward)


def sqrt0(a: Tensor) -> Tensor:
    """Square root with subgradient 0 where the input is 0."""
    out_val = np.sqrt(a.value)

    def backward(g):
        if a.requires_grad:
            d = np.where(a.value > 0, 0.5 / np.maximum(out_val, 1e-300), 0.0)
            a._accumulate(g * d)

    return _node(a.tape, out_val, "sqrt0", (a,), backward)


def square(a: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accumulate(g * 2.0 * a.value)

    return _node(a.tape, a.value * a.value, "square", (a,), backward)


def cast(a: Tensor, dtype) -> Tensor:
    dtype = np.dtype(dtype)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.astype(a.value.dtype))

    return _node(a.tape, a.value.astype(dtype), "cast", (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accumulate(np.full(a.value.shape, g.reshape(()).item(), dtype=a.value.dtype))

    return _node(a.tape, np.asarray(a.value.sum()), "sum", (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    n = a.value.size

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.full(a.value.shape, g.reshape(()).item() / n, dtype=a.value.dtype))

    return _node(a.tape, np.asarray(a.value.mean()), "mean", (a,), backward)


def sum_axis(a: Tensor, axis: int) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accumulate(np.repeat(np.expand_dims(g, axis), a.value.shape[axis], axis=axis))

    return _node(a.tape, a.value.sum(axis=axis), "sum_axis", (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ShapeMismatchError(f"matmul: shapes {a.value.shape} vs {b.value.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.value.T)
        if b.requires_grad:
            b._accumulate(a.value.T @ g)

    return _node(a.tape, a.value @ b.value, "matmul", (a, b), backward)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine layer: x (N,K) @ w (K,M) + b (M,)."""
    if x.value.ndim != 2 or w.value.ndim != 2 or x.value.shape[1] != w.value.shape[0] \
            or b.value.shape != (w.value.shape[1],):
        raise ShapeMismatchError(
            f"dense: x {x.value.shape}, w {w.value.shape}, b {b.value.shape}")

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ w.value.T)
        if w.requires_grad:
            w._accumulate(x.value.T @ g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0))

    return _node(x.tape, x.value @ w.value + b.value, "dense", (x, w, b), backward)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Row-wise L2 normalization of a (N, d) matrix."""
    if x.value.ndim != 2:
        raise ShapeMismatchError(f"l2_normalize: expected 2-D, got {x.value.shape}")
    norms = np.sqrt((x.value ** 2).sum(axis=1, keepdims=True))
    norms = np.maximum(norms, eps)
    out_val = x.value / norms

    def backward(g):
        if x.requires_grad:
            dot = (g * out_val).sum(axis=1, keepdims=True)
            x._accumulate((g - out_val * dot) / norms)

    return _node(x.tape, out_val, "l2_normalize", (x,), backward)


# ---------------------------------------------------------------------------
# convolution / pooling / normalization


def conv3d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 1) -> Tensor:
    """3-D convolution: x (N,Cin,D,H,W), w (Cout,Cin,k,k,k), b (Cout,)."""
    if x.value.ndim != 5 or w.value.ndim != 5:
        raise ShapeMismatchError(f"conv3d: x {x.value.shape}, w {w.value.shape}")
    n, cin, d, h, wd = x.value.shape
    cout, cin_w, k, k2, k3 = w.value.shape
    if cin != cin_w or k != k2 or k != k3 or b.value.shape != (cout,):
        raise ShapeMismatchError(
            f"conv3d: x {x.value.shape}, w {w.value.shape}, b {b.value.shape}")
    s, p = int(stride), int(padding)
    do = (d + 2 * p - k) // s + 1
    ho = (h + 2 * p - k) // s + 1
    wo = (wd + 2 * p - k) // s + 1
    if do < 1 or ho < 1 or wo < 1:
        raise ShapeMismatchError(
            f"conv3d: output would be empty for input {x.value.shape}, kernel {k}, "
            f"stride {s}, padding {p}")

    xp = np.pad(x.value, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else x.value
    win = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))[:, :, ::s, ::s, ::s]
    # (N, Cin, Do, Ho, Wo, k, k, k) -> (N*sp, Cin*k^3)
    col = np.ascontiguousarray(win.transpose(0, 2, 3, 4, 1, 5, 6, 7)).reshape(
        n * do * ho * wo, cin * k ** 3)
    wmat = w.value.reshape(cout, cin * k ** 3)
    out = (col @ wmat.T + b.value).reshape(n, do, ho, wo, cout).transpose(0, 4, 1, 2, 3)

    def backward(g):
        gflat = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1)).reshape(
            n * do * ho * wo, cout)
        if w.requires_grad:
            w._accumulate((gflat.T @ col).reshape(w.value.shape))
        if b.requires_grad:
            b._accumulate(gflat.sum(axis=0))
        if x.requires_grad:
            dcol = (gflat @ wmat).reshape(n, do, ho, wo, cin, k, k, k)
            dxp = np.zeros(xp.shape, dtype=x.value.dtype)
            for i, j, l in itertools.product(range(k), repeat=3):
                dxp[:, :, i:i + s * do:s, j:j + s * ho:s, l:l + s * wo:s] += \
                    dcol[:, :, :, :, :, i, j, l].transpose(0, 4, 1, 2, 3)
            dx = dxp[:, :, p:p + d, p:p + h, p:p + wd] if p else dxp
            x._accumulate(dx)

    return _node(x.tape, out, "conv3d", (x, w, b), backward)


def max_pool3d(x: Tensor) -> Tensor:
    """2x2x2 max pooling with stride 2; spatial dims must be even."""
    n, c, d, h, w = x.value.shape
    if d % 2 or h % 2 or w % 2:
        raise ShapeMismatchError(f"max_pool3d: odd spatial dims {x.value.shape}")
    blocks = x.value.reshape(n, c, d // 2, 2, h // 2, 2, w // 2, 2)
    flat = np.ascontiguousarray(blocks.transpose(0, 1, 2, 4, 6, 3, 5, 7)).reshape(
        n, c, d // 2, h // 2, w // 2, 8)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        if not x.requires_grad:
            return
        dflat = np.zeros(flat.shape, dtype=x.value.dtype)
        np.put_along_axis(dflat, idx[..., None], g[..., None], axis=-1)
        dx = dflat.reshape(n, c, d // 2, h // 2, w // 2, 2, 2, 2).transpose(
            0, 1, 2, 5, 3, 6, 4, 7).reshape(x.value.shape)
        x._accumulate(dx)

    return _node(x.tape, out, "max_pool3d", (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N,C,D,H,W) -> (N,C) spatial mean."""
    if x.value.ndim != 5:
        raise ShapeMismatchError(f"global_avg_pool: expected 5-D, got {x.value.shape}")
    n, c, d, h, w = x.value.shape
    sp = d * h * w

    def backward(g):
        if x.requires_grad:
            x._accumulate(np.broadcast_to(
                g[:, :, None, None, None] / sp, x.value.shape).astype(x.value.dtype))

    return _node(x.tape, x.value.mean(axis=(2, 3, 4)), "global_avg_pool", (x,), backward)


def batch_norm3d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                 running_var: np.ndarray, training: bool, momentum: float = 0.9,
                 eps: float = 1e-5) -> Tensor:
    """Per-channel batch norm over (N, D, H, W).

    Training mode uses batch statistics and updates the running buffers in
    place; eval mode uses the running buffers. Training batches of size 1
    are rejected.
    """
    if x.value.ndim != 5:
        raise ShapeMismatchError(f"batch_norm3d: expected 5-D, got {x.value.shape}")
    n, c, d, h, w = x.value.shape
    if gamma.value.shape != (c,) or beta.value.shape != (c,):
        raise ShapeMismatchError(
            f"batch_norm3d: gamma {gamma.value.shape}, beta {beta.value.shape}, C={c}")
    if training and n < 2:
        raise ShapeMismatchError("batch_norm3d: training mode requires batch size >= 2")

    axes = (0, 2, 3, 4)
    if training:
        mean = x.value.mean(axis=axes)
        var = x.value.var(axis=axes)
        running_mean[:] = momentum * running_mean + (1 - momentum) * mean
        running_var[:] = momentum * running_var + (1 - momentum) * var
    else:
        mean = running_mean.astype(x.value.dtype)
        var = running_var.astype(x.value.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.value - mean[None, :, None, None, None]) * inv_std[None, :, None, None, None]
    out = gamma.value[None, :, None, None, None] * xhat + beta.value[None, :, None, None, None]
    m = n * d * h * w  # elements per channel

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if x.requires_grad:
            gg = g * gamma.value[None, :, None, None, None]
            if training:
                sum_gg = gg.sum(axis=axes)
                sum_gg_xhat = (gg * xhat).sum(axis=axes)
                dx = (gg - (sum_gg[None, :, None, None, None]
                            + xhat * sum_gg_xhat[None, :, None, None, None]) / m) \
                    * inv_std[None, :, None, None, None]
            else:
                dx = gg * inv_std[None, :, None, None, None]
            x._accumulate(dx.astype(x.value.dtype))

    return _node(x.tape, out, "batch_norm3d", (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# trilinear resampling


def _linear_resample_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Dense (n_out, n_in) linear interpolation matrix, align-corners-false."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale_ = n_in / n_out
    for o in range(n_out):
        src = (o + 0.5) * scale_ - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[o, lo] += 1.0 - frac
        m[o, hi] += frac
    return m


def resample_trilinear_array(vol: np.ndarray, out_dims) -> np.ndarray:
    """Trilinear resize of a 3-D array, align-corners-false convention."""
    if vol.ndim != 3:
        raise ShapeMismatchError(f"resample: expected 3-D volume, got {vol.shape}")
    out = vol
    for axis, n_out in enumerate(out_dims):
        m = _linear_resample_matrix(out.shape[axis], int(n_out), dtype=np.float64)
        out = np.moveaxis(np.tensordot(m, np.moveaxis(out, axis, 0), axes=(1, 0)), 0, axis)
    return out.astype(vol.dtype)


def resample_trilinear(x: Tensor, out_dims) -> Tensor:
    """Tape op: trilinear resize of (N,C,D,H,W) spatial dims."""
    if x.value.ndim != 5:
        raise ShapeMismatchError(f"resample_trilinear: expected 5-D, got {x.value.shape}")
    mats = [_linear_resample_matrix(x.value.shape[2 + i], int(out_dims[i]),
                                    dtype=np.float64) for i in range(3)]

    def apply(v, ms):
        out = v
        for i, m in enumerate(ms):
            axis = 2 + i
            out = np.moveaxis(np.tensordot(m.astype(v.dtype), np.moveaxis(out, axis, 0),
                                           axes=(1, 0)), 0, axis)
        return out

    out = apply(x.value, mats)

    def backward(g):
        if x.requires_grad:
            x._accumulate(apply(g, [m.T for m in mats]).astype(x.value.dtype))

    return _node(x.tape, out, "resample_trilinear", (x,), backward)


# ---------------------------------------------------------------------------
# contrastive-loss support


def pairwise_masked_logsumexp(logits: Tensor, mask: np.ndarray) -> Tensor:
    """For logits L (M,M) and boolean mask (M,M,M), compute
    out[i,j] = log sum_{k: mask[i,j,k]} exp(L[i,k]) with max-shift stabilization.

    Every (i,j) slice of the mask must select at least one k.
    """
    lv = logits.value
    m = lv.shape[0]
    if lv.shape != (m, m) or mask.shape != (m, m, m):
        raise ShapeMismatchError(
            f"pairwise_masked_logsumexp: logits {lv.shape}, mask {mask.shape}")
    if not mask.any(axis=2).all():
        raise ShapeMismatchError("pairwise_masked_logsumexp: empty mask slice")

    expanded = np.broadcast_to(lv[:, None, :], (m, m, m))
    shifted = np.where(mask, expanded, -np.inf)
    mx = shifted.max(axis=2)
    with np.errstate(invalid="ignore"):
        ex = np.where(mask, np.exp(expanded - mx[:, :, None]), 0.0)
    denom = ex.sum(axis=2)
    out = mx + np.log(denom)
    softmax = ex / denom[:, :, None]

    def backward(g):
        if logits.requires_grad:
            logits._accumulate((g[:, :, None] * softmax).sum(axis=1).astype(lv.dtype))

    return _node(logits.tape, out, "pairwise_masked_logsumexp", (logits,), backward)


def gram(v: Tensor) -> Tensor:
    """Gram matrix v @ v.T of a (M, d) matrix."""
    if v.value.ndim != 2:
        raise ShapeMismatchError(f"gram: expected 2-D, got {v.value.shape}")

    def backward(g):
        if v.requires_grad:
            v._accumulate(((g + g.T) @ v.value).astype(v.value.dtype))

    return _node(v.tape, v.value @ v.value.T, "gram", (v,), backward)


def pairwise_sq_dists(v: Tensor) -> Tensor:
    """All pairwise squared Euclidean distances of rows of v (M,d) -> (M,M)."""
    if v.value.ndim != 2:
        raise ShapeMismatchError(f"pairwise_sq_dists: expected 2-D, got {v.value.shape}")
    sq = (v.value ** 2).sum(axis=1)
    gram = v.value @ v.value.T
    out = np.maximum(sq[:, None] + sq[None, :] - 2 * gram, 0.0)
    np.fill_diagonal(out, 0.0)

    def backward(g):
        if v.requires_grad:
            # d/dv_i of ||v_i - v_j||^2 summed with weights g_ij (+ g_ji)
            w = g + g.T
            v._accumulate((2.0 * (w.sum(axis=1)[:, None] * v.value - w @ v.value)).astype(
                v.value.dtype))

    return _node(v.tape, out, "pairwise_sq_dists", (v,), backward)


# ---------------------------------------------------------------------------
# gradient checking


@dataclasses.dataclass
class GradCheckReport:
    n_coords: int
    max_rel_err: float
    mean_rel_err: float
    tolerance: float
    passed: bool


def grad_check(fn, point: np.ndarray, epsilon: float = 1e-5,
               tolerance: float = 1e-4) -> GradCheckReport:
    """Compare reverse-mode gradients of a scalar function against central
    finite differences, coordinate by coordinate, in float64."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x0 = np.asarray(point, dtype=np.float64)

    tape = Tape()
    x = tape.tensor(x0.copy(), requires_grad=True)
    out = fn(x)
    if out.value.size != 1:
        raise ShapeMismatchError(f"grad_check: function output must be scalar, "
                                 f"got shape {out.value.shape}")
    tape.backward(out)
    analytic = x.grad.reshape(-1).copy() if x.grad is not None else np.zeros(x0.size)

    numeric = np.zeros(x0.size)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        for sgn in (+1, -1):
            pert = flat.copy()
            pert[i] += sgn * epsilon
            t2 = Tape()
            val = fn(t2.tensor(pert.reshape(x0.shape))).value
            numeric[i] += sgn * float(val.reshape(()))
        numeric[i] /= 2 * epsilon

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-4)
    rel = np.abs(analytic - numeric) / denom
    return GradCheckReport(
        n_coords=int(flat.size),
        max_rel_err=float(rel.max()) if rel.size else 0.0,
        mean_rel_err=float(rel.mean()) if rel.size else 0.0,
        tolerance=tolerance,
        passed=bool((rel <= tolerance).all()),
    )
