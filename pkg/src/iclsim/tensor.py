"""Reverse-mode autodiff over dense numpy arrays, sized for small decoder transformers.

Every op stores a backward closure on the output tensor; `backward()` walks the
graph in reverse topological order. Training runs in float32, gradient checking
in float64; ops keep whatever dtype they are given.
"""

from __future__ import annotations

import ctypes

import numpy as np


def _tune_allocator() -> None:
    """Serve large buffers from the main heap instead of per-allocation mmaps.

    Training reallocates the same few hundred MB of activations every step;
    with glibc's default mmap threshold each step pays page faults for them.
    """
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(ctypes.c_int(-3), ctypes.c_int(1 << 28))  # M_MMAP_THRESHOLD
    except (OSError, AttributeError):
        pass


_tune_allocator()

_GRAD_ENABLED = True


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class no_grad:
    """Context manager that suspends taping (evaluation forward passes)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """Dense array plus (optional) gradient and backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable leaf."""
        if self.data.size != 1:
            raise ValueError("backward() expects a scalar loss")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            # intermediate grads and closures are dead once propagated
            if node._parents:
                node._backward = None
                node._parents = ()
                node.grad = None

    # operator sugar; the right operand may be a plain scalar/array constant
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -np.asarray(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if g.dtype == t.data.dtype else g.astype(t.data.dtype)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape` (reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --- elementwise and shape ops ---


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        out = _make(a.data + b.data, (a, b), None)
        if out.requires_grad:
            def backward(g, a=a, b=b):
                ga = _unbroadcast(g, a.data.shape)
                gb = _unbroadcast(g, b.data.shape)
                if gb is ga:
                    gb = gb.copy()  # never hand one buffer to two grad slots
                _accum(a, ga)
                _accum(b, gb)
            out._backward = backward
        return out
    const = np.asarray(b, dtype=a.data.dtype) if not np.isscalar(b) else b
    out = _make(a.data + const, (a,), None)
    if out.requires_grad:
        out._backward = lambda g, a=a: _accum(a, _unbroadcast(g, a.data.shape))
    return out


def residual_add(a: Tensor, b: Tensor) -> Tensor:
    """a + b written into a's buffer (the running residual stream).

    Safe only when no backward closure reads a's raw values (true for the
    residual stream here: consumers renormalize and cache what they need) and
    when b has no consumer other than this add. Shapes must match exactly.
    """
    if a.data.shape != b.data.shape:
        raise ValueError("residual_add requires matching shapes")
    ad = a.data
    ad += b.data
    out = _make(ad, (a, b), None)
    if out.requires_grad:
        def backward(g, a=a, b=b):
            _accum(b, g)
            if a.grad is None and b.grad is g:
                g = g.copy()  # keep the two grad slots from sharing one buffer
            _accum(a, g)
        out._backward = backward
    return out


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        out = _make(a.data * b.data, (a, b), None)
        if out.requires_grad:
            def backward(g, a=a, b=b):
                _accum(a, _unbroadcast(g * b.data, a.data.shape))
                _accum(b, _unbroadcast(g * a.data, b.data.shape))
            out._backward = backward
        return out
    const = np.asarray(b, dtype=a.data.dtype) if not np.isscalar(b) else b
    out = _make(a.data * const, (a,), None)
    if out.requires_grad:
        out._backward = lambda g, a=a, c=const: _accum(a, _unbroadcast(g * c, a.data.shape))
    return out


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = _make(a.data.reshape(shape), (a,), None)
    if out.requires_grad:
        out._backward = lambda g, a=a: _accum(a, g.reshape(a.data.shape))
    return out


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), None)
    if out.requires_grad:
        inv = tuple(np.argsort(axes))
        out._backward = lambda g, a=a, inv=inv: _accum(a, np.ascontiguousarray(g.transpose(inv)))
    return out


def tsum(a: Tensor) -> Tensor:
    out = _make(np.asarray(a.data.sum()), (a,), None)
    if out.requires_grad:
        out._backward = lambda g, a=a: _accum(a, np.broadcast_to(g, a.data.shape).copy())
    return out


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    out = _make(np.asarray(a.data.mean()), (a,), None)
    if out.requires_grad:
        out._backward = lambda g, a=a, n=n: _accum(a, np.broadcast_to(g / n, a.data.shape).copy())
    return out


# --- neural-net ops ---


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x (..., din) @ w (din, dout) + b, as one 2-d GEMM."""
    lead = x.data.shape[:-1]
    x2 = x.data.reshape(-1, x.data.shape[-1])
    y = x2 @ w.data
    if b is not None:
        y += b.data
    parents = (x, w) if b is None else (x, w, b)
    out = _make(y.reshape(lead + (w.data.shape[1],)), parents, None)
    if out.requires_grad:
        def backward(g, x=x, w=w, b=b, x2=x2):
            g2 = g.reshape(-1, g.shape[-1])
            _accum(x, (g2 @ w.data.T).reshape(x.data.shape))
            _accum(w, x2.T @ g2)
            if b is not None:
                _accum(b, g2.sum(axis=0))
        out._backward = backward
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with broadcasting over leading axes."""
    out = _make(np.matmul(a.data, b.data), (a, b), None)
    if out.requires_grad:
        def backward(g, a=a, b=b):
            ga = np.matmul(g, b.data.swapaxes(-1, -2))
            gb = np.matmul(a.data.swapaxes(-1, -2), g)
            _accum(a, _unbroadcast(ga, a.data.shape))
            _accum(b, _unbroadcast(gb, b.data.shape))
        out._backward = backward
    return out


def gather_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """table (V, D) indexed by integer array idx -> idx.shape + (D,). Embedding lookup."""
    idx = np.asarray(idx)
    out = _make(table.data[idx], (table,), None)
    if out.requires_grad:
        def backward(g, table=table, idx=idx):
            gt = np.zeros_like(table.data)
            flat = idx.reshape(-1)
            g2 = g.reshape(-1, g.shape[-1])
            np.add.at(gt, flat, g2)
            _accum(table, gt)
        out._backward = backward
    return out


def gather_positions(x: Tensor, pos: np.ndarray) -> Tensor:
    """x (B, T, D) gathered at pos (B, K) -> (B, K, D)."""
    pos = np.asarray(pos)
    b_idx = np.arange(x.data.shape[0])[:, None]
    out = _make(x.data[b_idx, pos], (x,), None)
    if out.requires_grad:
        def backward(g, x=x, pos=pos, b_idx=b_idx):
            gx = np.zeros_like(x.data)
            np.add.at(gx, (b_idx, pos), g)
            _accum(x, gx)
        out._backward = backward
    return out


_MEAN_W: dict[tuple[int, str], np.ndarray] = {}


def _mean_weights(n: int, dtype) -> np.ndarray:
    """Cached (n,) vector of 1/n; row means become one small matrix product."""
    key = (n, np.dtype(dtype).char)
    w = _MEAN_W.get(key)
    if w is None:
        w = np.full((n,), 1.0 / n, dtype=dtype)
        _MEAN_W[key] = w
    return w


def gather_unique_positions(x: Tensor, rows: np.ndarray) -> Tensor:
    """x (B, T, D) sliced at shared positions rows (K,) -> (B, K, D).

    rows must be strictly increasing; with no duplicates the backward is a
    plain slice assignment instead of a scatter-add.
    """
    rows = np.asarray(rows)
    if rows.ndim != 1 or (rows.size > 1 and np.any(np.diff(rows) <= 0)):
        raise ValueError("rows must be strictly increasing positions")
    out = _make(np.ascontiguousarray(x.data[:, rows]), (x,), None)
    if out.requires_grad:
        def backward(g, x=x, rows=rows):
            gx = np.zeros_like(x.data)
            gx[:, rows] = g
            _accum(x, gx)
        out._backward = backward
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift.

    Row reductions run as matrix products and two-operand dot contractions,
    which are much faster here than short-axis ufunc reductions.
    """
    xd = x.data
    n = xd.shape[-1]
    x2 = xd.reshape(-1, n)
    w = _mean_weights(n, xd.dtype)
    mu = x2 @ w
    xhat = x2 - mu[:, None]
    inv = np.einsum("ij,ij->i", xhat, xhat)
    inv *= 1.0 / n
    inv += eps
    np.sqrt(inv, out=inv)
    np.divide(1.0, inv, out=inv)
    xhat *= inv[:, None]
    y = xhat * gamma.data
    y += beta.data
    out = _make(y.reshape(xd.shape), (x, gamma, beta), None)
    if out.requires_grad:
        def backward(g, x=x, gamma=gamma, beta=beta, xhat=xhat, inv=inv, w=w, n=n):
            g2 = g.reshape(-1, n)
            _accum(beta, g2.sum(axis=0))
            _accum(gamma, np.einsum("ij,ij->j", g2, xhat))
            gh = g2 * gamma.data
            m1 = gh @ w
            m2 = np.einsum("ij,ij->i", gh, xhat)
            m2 *= 1.0 / n
            # backward runs once and nothing else reads xhat, so reuse it
            xhat *= m2[:, None]
            gh -= xhat
            gh -= m1[:, None]
            gh *= inv[:, None]
            _accum(x, gh.reshape(x.data.shape))
        out._backward = backward
    return out


_GELU_C = 0.7978845608028654  # sqrt(2 / pi)


_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh form.

    tanh(u) is evaluated as 1 - 2/(1 + exp(2u)), which vectorizes much faster
    than np.tanh here and saturates gracefully for large arguments.
    """
    xd = x.data
    c = np.asarray(_GELU_C, dtype=xd.dtype)
    a = np.asarray(_GELU_A, dtype=xd.dtype)
    t = xd * xd
    t *= xd
    t *= a
    t += xd
    t *= 2.0 * c
    # deep saturation overflows exp to inf, which lands tanh exactly on +-1
    with np.errstate(over="ignore"):
        np.exp(t, out=t)
    t += 1.0
    np.divide(-2.0, t, out=t)
    t += 1.0  # t = tanh(c * (x + a x^3))
    y = t + 1.0
    y *= xd
    y *= 0.5
    out = _make(y, (x,), None)
    if out.requires_grad:
        def backward(g, x=x, t=t, c=c, a=a):
            xd = x.data
            du = xd * xd
            du *= 3.0 * a
            du += 1.0
            du *= c * 0.5
            du *= 1.0 - t * t
            du *= xd
            du += 0.5 * (1.0 + t)
            du *= g
            _accum(x, du)
        out._backward = backward
    return out


def dropout(x: Tensor, p: float, rng) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p).

    The mask is kept as bytes; float32 uniforms halve the generator work.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout probability must be in [0, 1)")
    if p == 0.0:
        return x
    keep = rng.random(x.data.shape, dtype=np.float32) >= p
    inv = np.asarray(1.0 / (1.0 - p), dtype=x.data.dtype)
    y = x.data * keep
    y *= inv
    out = _make(y, (x,), None)
    if out.requires_grad:
        def backward(g, x=x, keep=keep, inv=inv):
            gx = g * keep
            gx *= inv
            _accum(x, gx)
        out._backward = backward
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Differentiable stable softmax along one axis."""
    p = _softmax_array(x.data, axis)
    out = _make(p, (x,), None)
    if out.requires_grad:
        def backward(g, x=x, p=p, axis=axis):
            dot = np.sum(g * p, axis=axis, keepdims=True)
            _accum(x, p * (g - dot))
        out._backward = backward
    return out


_ATTN_QUERY_BLOCK = 48
_NEG = -1e9
_SCRATCH: dict[tuple, np.ndarray] = {}
_SCRATCH_CAP_BYTES = 512 * 1024 * 1024
_CORNERS: dict[tuple, np.ndarray] = {}


def _scratch(tag: str, shape: tuple, dtype) -> np.ndarray:
    """Reusable uninitialized buffer; avoids repeated large-page allocation."""
    key = (tag, shape, np.dtype(dtype).char)
    buf = _SCRATCH.get(key)
    if buf is None:
        if sum(b.nbytes for b in _SCRATCH.values()) > _SCRATCH_CAP_BYTES:
            _SCRATCH.clear()
        buf = np.empty(shape, dtype=dtype)
        _SCRATCH[key] = buf
    return buf


def _diag_corner(n: int, dtype) -> np.ndarray:
    """Cached (n, n) additive mask hiding j > i inside a diagonal score block."""
    key = ("diag", n, np.dtype(dtype).char)
    c = _CORNERS.get(key)
    if c is None:
        c = np.triu(np.full((n, n), _NEG, dtype=dtype), k=1)
        _CORNERS[key] = c
    return c


def _rows_corner(rows: np.ndarray, T: int, dtype) -> np.ndarray:
    """Cached (K, T) additive causal mask for explicit query positions."""
    key = ("rows", rows.tobytes(), T, np.dtype(dtype).char)
    c = _CORNERS.get(key)
    if c is None:
        if len(_CORNERS) > 64:
            _CORNERS.clear()
        c = np.where(
            np.arange(T)[None, :] > rows[:, None],
            np.asarray(_NEG, dtype=dtype),
            np.asarray(0.0, dtype=dtype),
        )
        _CORNERS[key] = c
    return c


def _normalize_bias(bias, B: int, T: int, dtype) -> np.ndarray:
    bias = np.asarray(bias, dtype=dtype)
    if bias.ndim == 2:
        bias = bias[None, None]
    elif bias.ndim == 3:
        bias = bias[:, None]
    if bias.shape[0] not in (1, B) or bias.shape[-2:] != (T, T):
        raise ValueError("attention bias must broadcast to (B, H, T, T)")
    return bias


def causal_attention(
    qkv: Tensor,
    n_heads: int,
    bias: np.ndarray | None = None,
    query_rows: np.ndarray | None = None,
    value_noise: np.ndarray | None = None,
) -> Tensor:
    """Multi-head causal self-attention over fused projections (B, T, 3D).

    qkv carries queries, keys and values side by side on the last axis; the
    output is (B, T, D), or (B, K, D) when query_rows restricts attention to
    K selected query positions (keys and values still cover the full
    sequence). Causality is built in: position i attends to keys j <= i.

    bias, if given, is an extra additive float mask broadcastable to
    (B, H, T, T) (0 = visible, large negative = hidden) for key-masking
    interventions. value_noise, if given, is a plain (B, T, D) array added to
    the value stream as a constant (it is not differentiated through).

    Softmax work is folded: unnormalized weights and their row sums are kept,
    and only the small per-head output is divided. One shared max per (b, h)
    score matrix stabilizes exp; if an entire row underflows (its keys sit
    vastly below that max), the block falls back to exact row maxima.
    """
    B, T, D3 = qkv.data.shape
    if D3 % 3 != 0:
        raise ValueError("fused qkv must have last dimension 3 * d_model")
    D = D3 // 3
    if D % n_heads != 0:
        raise ValueError("model width must divide evenly into heads")
    H, Dh = n_heads, D // n_heads
    dtype = qkv.data.dtype
    scale = np.asarray(1.0 / np.sqrt(Dh), dtype=dtype)

    x4 = qkv.data.reshape(B, T, 3, H, Dh)

    def heads(part) -> np.ndarray:
        # (B, T, H, Dh) slice -> contiguous (B, H, T, Dh)
        return np.ascontiguousarray(part.transpose(0, 2, 1, 3))

    kh = heads(x4[:, :, 1])
    vh = heads(x4[:, :, 2])
    if value_noise is not None:
        vh += value_noise.reshape(B, T, H, Dh).transpose(0, 2, 1, 3)
    if bias is not None:
        bias = _normalize_bias(bias, B, T, dtype)

    rows = None
    if query_rows is not None:
        rows = np.asarray(query_rows, dtype=np.int64)
        if rows.ndim != 1 or rows.size == 0 or (rows.size > 1 and np.any(np.diff(rows) <= 0)):
            raise ValueError("query_rows must be strictly increasing positions")
        if rows[0] < 0 or rows[-1] >= T:
            raise ValueError("query_rows out of range")
        qh = heads(x4[:, rows, 0])
    else:
        qh = heads(x4[:, :, 0])
    qh *= scale
    Q = qh.shape[2]

    need_grad = _GRAD_ENABLED and qkv.requires_grad

    def run_block(q_blk, kt, corner, corner_cols, bias_blk, s, o_blk):
        """One score block: softmax over keys [0, kt), causal corner at corner_cols."""

        def fill(per_row: bool):
            np.matmul(q_blk, kh[:, :, :kt].swapaxes(-1, -2), out=s)
            s[..., corner_cols] += corner
            if bias_blk is not None:
                np.add(s, bias_blk, out=s)
            if per_row:
                np.subtract(s, s.max(axis=-1, keepdims=True), out=s)
            else:
                # one max per (b, h) score matrix: a cheap contiguous reduction,
                # and each episode's output stays independent of its batchmates
                np.subtract(s, s.max(axis=(-2, -1), keepdims=True), out=s)
            np.exp(s, out=s)
            d = s.sum(axis=-1, keepdims=True)
            return d if d.all() else None

        d = fill(False)
        if d is None:
            d = fill(True)
        np.matmul(s, vh[:, :, :kt], out=o_blk)
        o_blk /= d
        return d

    if rows is not None:
        outh = np.empty((B, H, Q, Dh), dtype=dtype)
        s = np.empty((B, H, Q, T), dtype=dtype) if need_grad else _scratch("attn_s", (B, H, Q, T), dtype)
        corner = _rows_corner(rows, T, dtype)
        bias_blk = None if bias is None else bias[:, :, rows, :]
        d = run_block(qh, T, corner, slice(0, T), bias_blk, s, outh)
        blocks = [(0, T, s, d)]
    else:
        outh = np.empty((B, H, T, Dh), dtype=dtype)
        blocks = []
        for i0 in range(0, T, _ATTN_QUERY_BLOCK):
            i1 = min(i0 + _ATTN_QUERY_BLOCK, T)
            n = i1 - i0
            s = np.empty((B, H, n, i1), dtype=dtype) if need_grad else _scratch("attn_s", (B, H, n, i1), dtype)
            bias_blk = None if bias is None else bias[..., i0:i1, :i1]
            d = run_block(qh[:, :, i0:i1], i1, _diag_corner(n, dtype), slice(i0, i1), bias_blk, s, outh[:, :, i0:i1])
            if need_grad:
                blocks.append((i0, i1, s, d))

    merged = np.ascontiguousarray(outh.transpose(0, 2, 1, 3)).reshape(B, Q, D)
    out = _make(merged, (qkv,), None)
    if out.requires_grad:
        def backward(g, qkv=qkv, qh=qh, kh=kh, vh=vh, blocks=blocks, rows=rows):
            gh = np.ascontiguousarray(g.reshape(B, Q, H, Dh).transpose(0, 2, 1, 3))
            gqh = np.empty_like(qh)
            gkh = np.empty_like(kh)
            gvh = np.empty_like(vh)
            # visit the widest block first so gkh/gvh start with plain writes
            for j, (i0, i1, p, d) in enumerate(reversed(blocks)):
                gblk = gh[:, :, i0:i1] if rows is None else gh
                n = gblk.shape[2]
                gp = _scratch("attn_gp", gblk.shape, dtype)
                np.divide(gblk, d, out=gp)
                if j == 0:
                    np.matmul(p.swapaxes(-1, -2), gp, out=gvh)
                else:
                    gvh[:, :, :i1] += np.matmul(p.swapaxes(-1, -2), gp)
                xb = _scratch("attn_x", (B, H, n, i1), dtype)
                np.matmul(gp, vh[:, :, :i1].swapaxes(-1, -2), out=xb)
                r = np.einsum("bhij,bhij->bhi", p, xb)
                r /= d[..., 0]
                xb -= r[..., None]
                xb *= p
                gq_dst = gqh if rows is not None else gqh[:, :, i0:i1]
                np.matmul(xb, kh[:, :, :i1], out=gq_dst)
                gq_dst *= scale
                q_blk = qh if rows is not None else qh[:, :, i0:i1]
                if j == 0:
                    np.matmul(xb.swapaxes(-1, -2), q_blk, out=gkh)
                else:
                    gkh[:, :, :i1] += np.matmul(xb.swapaxes(-1, -2), q_blk)
            gqkv = np.empty((B, T, 3 * D), dtype=dtype)
            g4 = gqkv.reshape(B, T, 3, H, Dh)
            if rows is not None:
                g4[:, :, 0] = 0.0
                g4[:, rows, 0] = gqh.transpose(0, 2, 1, 3)
            else:
                g4[:, :, 0] = gqh.transpose(0, 2, 1, 3)
            g4[:, :, 1] = gkh.transpose(0, 2, 1, 3)
            g4[:, :, 2] = gvh.transpose(0, 2, 1, 3)
            _accum(qkv, gqkv)
        out._backward = backward
    return out


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-probability of integer targets over the last axis."""
    targets = np.asarray(targets)
    if targets.size == 0:
        raise ValueError("cross_entropy: empty target set")
    ld = logits.data.reshape(-1, logits.data.shape[-1])
    tflat = targets.reshape(-1)
    if tflat.shape[0] != ld.shape[0]:
        raise ValueError("cross_entropy: targets do not match logit rows")
    m = ld.max(axis=-1, keepdims=True)
    z = ld - m
    ez = np.exp(z)
    sez = ez.sum(axis=-1, keepdims=True)
    rows = np.arange(ld.shape[0])
    nll = np.log(sez[:, 0]) - z[rows, tflat]
    out = _make(np.asarray(nll.mean(), dtype=ld.dtype), (logits,), None)
    if out.requires_grad:
        def backward(g, logits=logits, ez=ez, sez=sez, rows=rows, tflat=tflat):
            p = ez / sez
            p[rows, tflat] -= 1.0
            p *= g / len(rows)
            _accum(logits, p.reshape(logits.data.shape))
        out._backward = backward
    return out


def cross_entropy_at_positions(logits: Tensor, targets, positions) -> Tensor:
    """Mean NLL at the selected rows of a (T, d_v) logit matrix only."""
    positions = np.asarray(positions)
    targets = np.asarray(targets)
    if positions.size == 0:
        raise ValueError("cross_entropy_at_positions: empty position set")
    if positions.shape != targets.shape:
        raise ValueError("cross_entropy_at_positions: positions and targets must pair up")
    if positions.min() < 0 or positions.max() >= logits.data.shape[0]:
        raise ValueError("cross_entropy_at_positions: position out of range")
    return cross_entropy(gather_rows(logits, positions), targets)


# --- plain-array helpers ---


def _softmax_array(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_rows(x) -> np.ndarray:
    """Row-stabilized softmax over the last axis of a plain array.

    Rows sum to 1 regardless of input magnitude; non-finite input is rejected
    rather than propagated.
    """
    x = np.asarray(x, dtype=np.float64 if np.asarray(x).dtype != np.float32 else np.float32)
    if x.shape[-1] == 0:
        raise ValueError("softmax_rows: empty rows")
    if not np.isfinite(x).all():
        raise ValueError("softmax_rows: non-finite input")
    return _softmax_array(x, axis=-1)
