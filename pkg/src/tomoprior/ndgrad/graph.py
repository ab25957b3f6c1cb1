"""Reverse-mode automatic differentiation on dense numpy tensors.

A ``Graph`` is a tape of topologically ordered op records built eagerly:
every op method computes its forward value immediately and appends a
``Node``. ``backward`` walks the tape in reverse; ``evaluate`` re-runs the
recorded tape with substituted leaf values (pure, no mutation).

Broadcasting is restricted to scalar-tensor; everything else requires
matching shapes or a dedicated op (``linear``, ``conv2d``, ``bias_nc``).
"""

from __future__ import annotations

import numpy as np

from ..errors import NumericFaultError

_ALLOWED_DTYPES = (np.float32, np.float64)


class Tensor:
    """Dense array with a fixed dtype plus a trainability flag.

    Parameter tensors are shared between a training loop and the graphs
    built from them: graphs read ``.data`` at node-creation time, the
    optimizer updates ``.data`` in place.
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=np.float32):
        arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class Node:
    __slots__ = ("idx", "op", "inputs", "attrs", "value", "requires_grad", "name", "cache")

    def __init__(self, idx, op, inputs, attrs, value, requires_grad, name=None):
        self.idx = idx
        self.op = op
        self.inputs = inputs          # tuple of Node
        self.attrs = attrs            # dict or None
        self.value = value            # np.ndarray (forward value)
        self.requires_grad = requires_grad
        self.name = name              # leaf name, None for interior nodes
        self.cache = None             # op-private forward byproducts (rebuilt by evaluate)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = self.name if self.name else self.op
        return f"Node#{self.idx}<{tag}:{self.value.shape}>"


class Graph:
    """Eagerly-built computation tape with fixed execution order.

    Node ids are assigned in creation order and every node's inputs precede
    it, so replaying the node list is a valid topological execution.
    """

    def __init__(self, dtype=np.float32, check_finite=True):
        if dtype not in _ALLOWED_DTYPES:
            raise ValueError(f"dtype must be float32 or float64, got {dtype}")
        self.dtype = dtype
        self.check_finite = check_finite
        self.nodes: list[Node] = []
        self.leaves: dict[str, Node] = {}
        self.outputs: dict[str, Node] = {}

    # ---- leaves ------------------------------------------------------

    def input(self, name, value, requires_grad=False):
        """Register a named leaf. ``value`` may be a Tensor (shared) or array."""
        if name in self.leaves:
            raise ValueError(f"duplicate leaf name {name!r}")
        if isinstance(value, Tensor):
            arr = value.data
            requires_grad = requires_grad or value.requires_grad
            if arr.dtype != self.dtype:
                arr = arr.astype(self.dtype)
        else:
            arr = np.asarray(value, dtype=self.dtype)
        node = Node(len(self.nodes), "leaf", (), None, arr, requires_grad, name=name)
        self.nodes.append(node)
        self.leaves[name] = node
        return node

    def param(self, name, tensor):
        """Register a trainable leaf backed by a persistent Tensor."""
        if not isinstance(tensor, Tensor):
            raise TypeError("param expects a Tensor")
        return self.input(name, tensor, requires_grad=True)

    def mark_output(self, name, node):
        self.outputs[name] = node
        return node

    # ---- op plumbing -------------------------------------------------

    def _record(self, op, inputs, attrs, value, cache=None):
        if value.dtype != self.dtype:
            value = value.astype(self.dtype)
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NumericFaultError(f"non-finite value in op '{op}' (node {len(self.nodes)})")
        rg = any(n.requires_grad for n in inputs)
        node = Node(len(self.nodes), op, tuple(inputs), attrs, value, rg)
        node.cache = cache
        self.nodes.append(node)
        return node

    @staticmethod
    def _same_shape(a, b, op):
        if a.value.shape != b.value.shape:
            raise ValueError(f"{op}: shape mismatch {a.value.shape} vs {b.value.shape}")

    # ---- elementwise -------------------------------------------------

    def add(self, a, b):
        self._same_shape(a, b, "add")
        return self._record("add", (a, b), None, a.value + b.value)

    def sub(self, a, b):
        self._same_shape(a, b, "sub")
        return self._record("sub", (a, b), None, a.value - b.value)

    def mul(self, a, b):
        self._same_shape(a, b, "mul")
        return self._record("mul", (a, b), None, a.value * b.value)

    def add_scalar(self, a, c):
        c = float(c)
        return self._record("add_scalar", (a,), {"c": c}, a.value + self.dtype(c))

    def mul_scalar(self, a, c):
        c = float(c)
        return self._record("mul_scalar", (a,), {"c": c}, a.value * self.dtype(c))

    def relu(self, a):
        return self._record("relu", (a,), None, np.maximum(a.value, 0))

    def silu(self, a):
        s = 1.0 / (1.0 + np.exp(-a.value))
        return self._record("silu", (a,), None, a.value * s, cache=s)

    def sin(self, a):
        return self._record("sin", (a,), None, np.sin(a.value))

    def cos(self, a):
        return self._record("cos", (a,), None, np.cos(a.value))

    def square(self, a):
        return self._record("square", (a,), None, a.value * a.value)

    def abs(self, a):
        return self._record("abs", (a,), None, np.abs(a.value))

    # ---- reductions / reshaping --------------------------------------

    def sum(self, a):
        return self._record("sum", (a,), None, np.asarray(a.value.sum(), dtype=self.dtype))

    def mean(self, a):
        return self._record("mean", (a,), None, np.asarray(a.value.mean(), dtype=self.dtype))

    def reshape(self, a, shape):
        shape = tuple(int(s) for s in shape)
        return self._record("reshape", (a,), {"shape": a.value.shape}, a.value.reshape(shape))

    def concat(self, parts, axis):
        parts = tuple(parts)
        sizes = [p.value.shape[axis] for p in parts]
        value = np.concatenate([p.value for p in parts], axis=axis)
        return self._record("concat", parts, {"axis": axis, "sizes": sizes}, value)

    def segment_sum(self, a, counts):
        """Sum a 1-D tensor over contiguous segments of the given lengths."""
        counts = np.asarray(counts, dtype=np.int64)
        if a.value.ndim != 1:
            raise ValueError("segment_sum expects a 1-D tensor")
        if counts.sum() != a.value.shape[0]:
            raise ValueError("segment counts do not cover the tensor")
        value = _segment_sum_values(a.value, counts, self.dtype)
        return self._record("segment_sum", (a,), {"counts": counts}, value)

    def gather_weighted(self, x, idx, wgt):
        """out[m] = sum_c wgt[c,m] * x[idx[c,m]] for a 1-D tensor x.

        idx/wgt are constant (C, M) arrays; the backward pass scatter-adds.
        """
        idx = np.asarray(idx, dtype=np.int64)
        wgt = np.asarray(wgt, dtype=self.dtype)
        if x.value.ndim != 1 or idx.shape != wgt.shape or idx.ndim != 2:
            raise ValueError("gather_weighted expects 1-D x and matching (C,M) idx/wgt")
        if idx.size and (idx.min() < 0 or idx.max() >= x.value.shape[0]):
            raise ValueError("gather_weighted: index out of range")
        value = (x.value[idx] * wgt).sum(axis=0)
        return self._record("gather_weighted", (x,), {"idx": idx, "wgt": wgt, "n": x.value.shape[0]}, value)

    def slice1d(self, a, start, stop):
        """Contiguous slice of a 1-D tensor."""
        if a.value.ndim != 1:
            raise ValueError("slice1d expects a 1-D tensor")
        start, stop = int(start), int(stop)
        if not (0 <= start <= stop <= a.value.shape[0]):
            raise ValueError(f"slice1d: bad range [{start},{stop}) for length {a.value.shape[0]}")
        return self._record("slice1d", (a,), {"start": start, "stop": stop, "n": a.value.shape[0]},
                            a.value[start:stop].copy())

    # ---- dense / conv layers ------------------------------------------

    def linear(self, x, w, b=None):
        """x:(N,K) @ w:(K,M) + b:(M,)."""
        if x.value.ndim != 2 or w.value.ndim != 2 or x.value.shape[1] != w.value.shape[0]:
            raise ValueError(f"linear: bad shapes {x.value.shape} @ {w.value.shape}")
        out = x.value @ w.value
        inputs = (x, w)
        if b is not None:
            if b.value.shape != (w.value.shape[1],):
                raise ValueError(f"linear: bias shape {b.value.shape} != ({w.value.shape[1]},)")
            out = out + b.value
            inputs = (x, w, b)
        return self._record("linear", inputs, None, out)

    def conv2d(self, x, w, b=None, stride=1, pad=0):
        """x:(N,C,H,W), w:(O,C,kh,kw), b:(O,); zero padding, square stride."""
        if x.value.ndim != 4 or w.value.ndim != 4 or x.value.shape[1] != w.value.shape[1]:
            raise ValueError(f"conv2d: bad shapes {x.value.shape}, {w.value.shape}")
        n, o = x.value.shape[0], w.value.shape[0]
        out, xt_pad = _conv2d_forward(x.value, w.value, stride, pad)
        inputs = (x, w)
        if b is not None:
            if b.value.shape != (o,):
                raise ValueError(f"conv2d: bias shape {b.value.shape} != ({o},)")
            out = out + b.value[None, :, None, None]
            inputs = (x, w, b)
        return self._record("conv2d", inputs, {"stride": stride, "pad": pad}, out, cache=xt_pad)

    def bias_nc(self, x, b):
        """Add a per-sample per-channel bias b:(N,C) to x:(N,C,H,W)."""
        if x.value.ndim != 4 or b.value.shape != x.value.shape[:2]:
            raise ValueError(f"bias_nc: shapes {x.value.shape} vs {b.value.shape}")
        return self._record("bias_nc", (x, b), None, x.value + b.value[:, :, None, None])

    def upsample_nn(self, x, factor=2):
        """Nearest-neighbor upsample of NCHW by an integer factor."""
        if x.value.ndim != 4:
            raise ValueError("upsample_nn expects NCHW")
        value = x.value.repeat(factor, axis=2).repeat(factor, axis=3)
        return self._record("upsample_nn", (x,), {"factor": factor}, value)

    def downsample_nn(self, x, factor=2):
        """Nearest-neighbor (strided) downsample of NCHW by an integer factor."""
        if x.value.ndim != 4:
            raise ValueError("downsample_nn expects NCHW")
        if x.value.shape[2] % factor or x.value.shape[3] % factor:
            raise ValueError("downsample_nn: extent not divisible by factor")
        value = np.ascontiguousarray(x.value[:, :, ::factor, ::factor])
        return self._record("downsample_nn", (x,), {"factor": factor, "shape": x.value.shape}, value)

    # ---- execution ----------------------------------------------------

    def evaluate(self, inputs=None, outputs=None):
        """Pure re-execution of the tape with substituted leaf values.

        ``inputs`` maps leaf names to replacement arrays; ``outputs`` is a
        list of nodes (defaults to the marked outputs, returned by name).
        """
        values = self._forward_values(inputs or {})
        if outputs is not None:
            return [values[n.idx] for n in outputs]
        return {name: values[n.idx] for name, n in self.outputs.items()}

    def _forward_values(self, overrides):
        values = [None] * len(self.nodes)
        caches = [None] * len(self.nodes)
        for node in self.nodes:
            if node.op == "leaf":
                if node.name in overrides:
                    v = np.asarray(overrides[node.name], dtype=self.dtype)
                    if v.shape != node.value.shape:
                        raise ValueError(f"override for {node.name!r}: shape {v.shape} != {node.value.shape}")
                else:
                    v = node.value
                values[node.idx] = v
                continue
            args = [values[i.idx] for i in node.inputs]
            v, cache = _FORWARD[node.op](self, node, args)
            if self.check_finite and not np.all(np.isfinite(v)):
                raise NumericFaultError(f"non-finite value in op '{node.op}' (node {node.idx})")
            values[node.idx] = v.astype(self.dtype) if v.dtype != self.dtype else v
            caches[node.idx] = cache
        self._eval_caches = caches
        return values

    def backward(self, loss, inputs=None):
        """Gradients of a scalar loss node w.r.t. every requires_grad leaf.

        Returns ``{leaf_name: np.ndarray}``; unused trainable leaves get
        zero tensors. With ``inputs`` set, runs a pure forward pass first.
        """
        if loss.value.shape != ():
            raise ValueError(f"backward: loss must be scalar, got shape {loss.value.shape}")
        if inputs:
            values = self._forward_values(inputs)
            caches = self._eval_caches
        else:
            values = [n.value for n in self.nodes]
            caches = [n.cache for n in self.nodes]

        grads = [None] * len(self.nodes)
        grads[loss.idx] = np.asarray(1.0, dtype=self.dtype)
        for node in reversed(self.nodes[: loss.idx + 1]):
            g = grads[node.idx]
            if g is None or node.op == "leaf" or not node.requires_grad:
                continue
            args = [values[i.idx] for i in node.inputs]
            in_grads = _BACKWARD[node.op](self, node, args, g, caches[node.idx])
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if grads[inp.idx] is None:
                    grads[inp.idx] = ig
                else:
                    grads[inp.idx] = grads[inp.idx] + ig
        out = {}
        for name, leaf in self.leaves.items():
            if leaf.requires_grad:
                g = grads[leaf.idx]
                out[name] = np.zeros_like(values[leaf.idx]) if g is None else g
        return out


def _segment_sum_values(values, counts, dtype):
    """Per-segment sums; zero-length segments (including trailing) yield 0."""
    if values.shape[0] == 0:
        return np.zeros(len(counts), dtype=dtype)
    offsets = np.zeros(len(counts), dtype=np.int64)
    np.cumsum(counts[:-1], out=offsets[1:])
    offsets = np.minimum(offsets, values.shape[0] - 1)
    out = np.add.reduceat(values, offsets)
    return np.where(counts > 0, out, 0).astype(dtype)


# ---- conv helpers ------------------------------------------------------
# Convolutions run channels-last internally: a 3x3 kernel becomes nine
# (N*Ho*Wo, C) @ (C, O) GEMMs over shifted views, which keeps every copy
# memcpy-friendly instead of materializing an im2col tensor.


def _conv_out_hw(h, w, kh, kw, stride, pad):
    return (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1


def _pad_nhwc(xt, pad):
    if not pad:
        return xt
    n, h, w, c = xt.shape
    out = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=xt.dtype)
    out[:, pad : pad + h, pad : pad + w, :] = xt
    return out


def _conv2d_forward(x, w, stride, pad):
    """Returns (out NCHW, cached padded channels-last input)."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho, wo = _conv_out_hw(h, wd, kh, kw, stride, pad)
    xt_pad = _pad_nhwc(np.ascontiguousarray(x.transpose(0, 2, 3, 1)), pad)
    wt = np.ascontiguousarray(w.transpose(2, 3, 1, 0))  # (kh,kw,C,O), BLAS-friendly taps
    acc = np.zeros((n * ho * wo, o), dtype=x.dtype)
    for di in range(kh):
        for dj in range(kw):
            sl = xt_pad[:, di : di + ho * stride : stride, dj : dj + wo * stride : stride, :]
            acc += sl.reshape(-1, c) @ wt[di, dj]
    out = np.ascontiguousarray(acc.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))
    return out, xt_pad


def _conv2d_backward(x_shape, w, stride, pad, grad, xt_pad, dtype):
    n, c, h, wd = x_shape
    o, _, kh, kw = w.shape
    ho, wo = grad.shape[2], grad.shape[3]
    gt = np.ascontiguousarray(grad.transpose(0, 2, 3, 1)).reshape(-1, o)
    wk = np.ascontiguousarray(w.transpose(2, 3, 0, 1))  # (kh,kw,O,C)
    gw = np.empty_like(w)
    gx_pad = np.zeros_like(xt_pad)
    for di in range(kh):
        for dj in range(kw):
            sl = xt_pad[:, di : di + ho * stride : stride, dj : dj + wo * stride : stride, :]
            gw[:, :, di, dj] = (sl.reshape(-1, c).T @ gt).T
            gx_pad[:, di : di + ho * stride : stride, dj : dj + wo * stride : stride, :] += (
                gt @ wk[di, dj]
            ).reshape(n, ho, wo, c)
    if pad:
        gx_pad = gx_pad[:, pad : pad + h, pad : pad + wd, :]
    gx = np.ascontiguousarray(gx_pad.transpose(0, 3, 1, 2))
    return gx.astype(dtype, copy=False), gw


# ---- forward re-execution table (op -> (value, cache)) -----------------


def _f_simple(fn):
    return lambda g, node, args: (fn(g, node, args), None)


_FORWARD = {
    "add": _f_simple(lambda g, n, a: a[0] + a[1]),
    "sub": _f_simple(lambda g, n, a: a[0] - a[1]),
    "mul": _f_simple(lambda g, n, a: a[0] * a[1]),
    "add_scalar": _f_simple(lambda g, n, a: a[0] + g.dtype(n.attrs["c"])),
    "mul_scalar": _f_simple(lambda g, n, a: a[0] * g.dtype(n.attrs["c"])),
    "relu": _f_simple(lambda g, n, a: np.maximum(a[0], 0)),
    "sin": _f_simple(lambda g, n, a: np.sin(a[0])),
    "cos": _f_simple(lambda g, n, a: np.cos(a[0])),
    "square": _f_simple(lambda g, n, a: a[0] * a[0]),
    "abs": _f_simple(lambda g, n, a: np.abs(a[0])),
    "sum": _f_simple(lambda g, n, a: np.asarray(a[0].sum(), dtype=g.dtype)),
    "mean": _f_simple(lambda g, n, a: np.asarray(a[0].mean(), dtype=g.dtype)),
    "reshape": _f_simple(lambda g, n, a: a[0].reshape(n.value.shape)),
    "concat": _f_simple(lambda g, n, a: np.concatenate(a, axis=n.attrs["axis"])),
    "bias_nc": _f_simple(lambda g, n, a: a[0] + a[1][:, :, None, None]),
    "upsample_nn": _f_simple(
        lambda g, n, a: a[0].repeat(n.attrs["factor"], axis=2).repeat(n.attrs["factor"], axis=3)
    ),
    "downsample_nn": _f_simple(
        lambda g, n, a: np.ascontiguousarray(a[0][:, :, :: n.attrs["factor"], :: n.attrs["factor"]])
    ),
}


def _f_silu(g, node, args):
    s = 1.0 / (1.0 + np.exp(-args[0]))
    return args[0] * s, s


def _f_segment_sum(g, node, args):
    return _segment_sum_values(args[0], node.attrs["counts"], g.dtype), None


def _f_linear(g, node, args):
    out = args[0] @ args[1]
    if len(args) == 3:
        out = out + args[2]
    return out, None


def _f_conv2d(g, node, args):
    out, xt_pad = _conv2d_forward(args[0], args[1], node.attrs["stride"], node.attrs["pad"])
    if len(args) == 3:
        out = out + args[2][None, :, None, None]
    return out, xt_pad


_FORWARD["silu"] = _f_silu
_FORWARD["segment_sum"] = _f_segment_sum
_FORWARD["linear"] = _f_linear
_FORWARD["conv2d"] = _f_conv2d
_FORWARD["slice1d"] = _f_simple(lambda g, n, a: a[0][n.attrs["start"] : n.attrs["stop"]].copy())
_FORWARD["gather_weighted"] = _f_simple(
    lambda g, n, a: (a[0][n.attrs["idx"]] * n.attrs["wgt"]).sum(axis=0)
)


# ---- backward table (op -> list of input grads) -------------------------


def _b_elemwise(fn):
    return lambda g, node, args, grad, cache: fn(g, node, args, grad, cache)


def _b_concat(g, node, args, grad, cache):
    axis, sizes = node.attrs["axis"], node.attrs["sizes"]
    splits = np.cumsum(sizes[:-1])
    return list(np.split(grad, splits, axis=axis))


def _b_segment_sum(g, node, args, grad, cache):
    return [np.repeat(grad, node.attrs["counts"]).astype(g.dtype)]


def _b_linear(g, node, args, grad, cache):
    x, w = args[0], args[1]
    gx = grad @ w.T
    gw = x.T @ grad
    if len(args) == 3:
        return [gx, gw, grad.sum(axis=0)]
    return [gx, gw]


def _b_conv2d(g, node, args, grad, cache):
    x, w = args[0], args[1]
    stride, pad = node.attrs["stride"], node.attrs["pad"]
    xt_pad = cache
    if xt_pad is None:
        xt_pad = _pad_nhwc(np.ascontiguousarray(x.transpose(0, 2, 3, 1)), pad)
    gx, gw = _conv2d_backward(x.shape, w, stride, pad, grad, xt_pad, g.dtype)
    if len(args) == 3:
        return [gx, gw, grad.sum(axis=(0, 2, 3))]
    return [gx, gw]


def _b_gather_weighted(g, node, args, grad, cache):
    idx, wgt, n = node.attrs["idx"], node.attrs["wgt"], node.attrs["n"]
    gx = np.zeros(n, dtype=np.float64)
    for c in range(idx.shape[0]):
        gx += np.bincount(idx[c], weights=(wgt[c] * grad).astype(np.float64), minlength=n)
    return [gx.astype(g.dtype)]


def _b_slice1d(g, node, args, grad, cache):
    gx = np.zeros(node.attrs["n"], dtype=g.dtype)
    gx[node.attrs["start"] : node.attrs["stop"]] = grad
    return [gx]


def _b_silu(g, node, args, grad, cache):
    s = cache if cache is not None else 1.0 / (1.0 + np.exp(-args[0]))
    return [grad * (s * (1 + args[0] * (1 - s)))]


def _b_downsample(g, node, args, grad, cache):
    f = node.attrs["factor"]
    gx = np.zeros(node.attrs["shape"], dtype=g.dtype)
    gx[:, :, ::f, ::f] = grad
    return [gx]


def _b_upsample(g, node, args, grad, cache):
    f = node.attrs["factor"]
    n, c, h, w = grad.shape
    return [grad.reshape(n, c, h // f, f, w // f, f).sum(axis=(3, 5))]


_BACKWARD = {
    "add": _b_elemwise(lambda g, n, a, gr, c: [gr, gr]),
    "sub": _b_elemwise(lambda g, n, a, gr, c: [gr, -gr]),
    "mul": _b_elemwise(lambda g, n, a, gr, c: [gr * a[1], gr * a[0]]),
    "add_scalar": _b_elemwise(lambda g, n, a, gr, c: [gr]),
    "mul_scalar": _b_elemwise(lambda g, n, a, gr, c: [gr * g.dtype(n.attrs["c"])]),
    "relu": _b_elemwise(lambda g, n, a, gr, c: [gr * (a[0] > 0)]),
    "silu": _b_silu,
    "sin": _b_elemwise(lambda g, n, a, gr, c: [gr * np.cos(a[0])]),
    "cos": _b_elemwise(lambda g, n, a, gr, c: [-gr * np.sin(a[0])]),
    "square": _b_elemwise(lambda g, n, a, gr, c: [2.0 * gr * a[0]]),
    "abs": _b_elemwise(lambda g, n, a, gr, c: [gr * np.sign(a[0])]),
    "sum": _b_elemwise(lambda g, n, a, gr, c: [np.broadcast_to(gr, a[0].shape).astype(g.dtype)]),
    "mean": _b_elemwise(
        lambda g, n, a, gr, c: [np.broadcast_to(gr / g.dtype(a[0].size), a[0].shape).astype(g.dtype)]
    ),
    "reshape": _b_elemwise(lambda g, n, a, gr, c: [gr.reshape(n.attrs["shape"])]),
    "concat": _b_concat,
    "segment_sum": _b_segment_sum,
    "slice1d": _b_slice1d,
    "gather_weighted": _b_gather_weighted,
    "linear": _b_linear,
    "conv2d": _b_conv2d,
    "bias_nc": _b_elemwise(lambda g, n, a, gr, c: [gr, gr.sum(axis=(2, 3))]),
    "upsample_nn": _b_upsample,
    "downsample_nn": _b_downsample,
}
