"""Small float64 tensor type with tape-based reverse-mode differentiation.

Only the operations the fusion pipeline needs are provided.  Every op
records its parents and a backward closure; ``backward`` walks the
recorded graph in reverse topological order.  The graph is rebuilt on
every forward pass.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """Immutable float64 array node in the recorded op graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name", "_cols")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name
        self._cols: dict[int, np.ndarray] = {}

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g


class Param(Tensor):
    """Learnable leaf tensor with a stable name."""

    __slots__ = ()

    def __init__(self, data, name: str):
        super().__init__(np.array(data, dtype=np.float64, copy=True), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    live = tuple(p for p in parents if p.requires_grad)
    if live:
        out.requires_grad = True
        out._parents = live
        out._backward = backward
    return out


def _shape_error(what: str, a, b) -> DimensionError:
    return DimensionError(f"{what}: shape {tuple(a)} incompatible with shape {tuple(b)}")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise _shape_error("add", a.shape, b.shape)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise _shape_error("sub", a.shape, b.shape)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return _make(a.data - b.data, (a, b), bw)


def eltwise_mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise _shape_error("eltwise_mul", a.shape, b.shape)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _make(a.data * b.data, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    def bw(g):
        a._accumulate(g * c)

    return _make(a.data * c, (a,), bw)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)

    def bw(g):
        x._accumulate(g * out * (1.0 - out))

    return _make(out, (x,), bw)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def bw(g):
        x._accumulate(g * mask)

    return _make(np.where(mask, x.data, 0.0), (x,), bw)


def square(x) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        x._accumulate(2.0 * g * x.data)

    return _make(x.data * x.data, (x,), bw)


def absolute(x) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        x._accumulate(g * np.sign(x.data))

    return _make(np.abs(x.data), (x,), bw)


# ---------------------------------------------------------------- reductions


def sum_all(x) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        x._accumulate(np.broadcast_to(g, x.shape))

    return _make(np.asarray(x.data.sum()), (x,), bw)


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    n = x.data.size

    def bw(g):
        x._accumulate(np.broadcast_to(g / n, x.shape))

    return _make(np.asarray(x.data.sum() / n), (x,), bw)


# ---------------------------------------------------------------- shape ops


def concat_channels(a, b) -> Tensor:
    """Concatenate rank-4 tensors along axis 1, ``a`` first."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise _shape_error("concat_channels expects rank 4", a.shape, b.shape)
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise _shape_error("concat_channels", a.shape, b.shape)
    ca = a.shape[1]

    def bw(g):
        if a.requires_grad:
            a._accumulate(g[:, :ca])
        if b.requires_grad:
            b._accumulate(g[:, ca:])

    return _make(np.concatenate([a.data, b.data], axis=1), (a, b), bw)


def slice_channels(x, start: int, stop: int) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        x._accumulate(full)

    return _make(x.data[:, start:stop].copy(), (x,), bw)


def concat_axis0(tensors: Sequence[Tensor]) -> Tensor:
    """Stack tensors along their leading axis (e.g. several kernels into one conv)."""
    ts = [as_tensor(t) for t in tensors]
    if any(t.shape[1:] != ts[0].shape[1:] for t in ts):
        raise DimensionError(f"concat_axis0: trailing shapes differ: {[t.shape for t in ts]}")
    bounds = np.cumsum([0] + [t.shape[0] for t in ts])

    def bw(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                t._accumulate(g[lo:hi])

    return _make(np.concatenate([t.data for t in ts], axis=0), ts, bw)


def broadcast_channels(x, channels: int) -> Tensor:
    """Repeat a B×1×H×W tensor across ``channels``."""
    x = as_tensor(x)
    if x.data.ndim != 4 or x.shape[1] != 1:
        raise DimensionError(f"broadcast_channels expects B×1×H×W, got {x.shape}")

    def bw(g):
        x._accumulate(g.sum(axis=1, keepdims=True))

    return _make(np.repeat(x.data, channels, axis=1), (x,), bw)


def gather(x, index: np.ndarray) -> Tensor:
    """Flat gather: ``out[i] = x.flat[index[i]]`` (index may have any shape)."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)

    def bw(g):
        full = np.zeros(x.data.size)
        np.add.at(full, index.ravel(), g.ravel())
        x._accumulate(full.reshape(x.shape))

    return _make(x.data.ravel()[index], (x,), bw)


def scatter_add(src, index: np.ndarray, out_shape: Sequence[int], weights: np.ndarray | None = None) -> Tensor:
    """Flat scatter: ``out.flat[index[i, j]] += weights[i] * src[i, j]``.

    ``index`` has the same shape as ``src``; ``weights`` (optional) is per row.
    """
    src = as_tensor(src)
    index = np.asarray(index, dtype=np.int64)
    if index.shape != src.shape:
        raise _shape_error("scatter_add index", index.shape, src.shape)
    size = int(np.prod(out_shape))
    if index.size and (index.min() < 0 or index.max() >= size):
        raise ContractError("scatter_add index outside output")
    w = np.ones(src.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
    vals = src.data * w.reshape((-1,) + (1,) * (src.data.ndim - 1))
    out = np.zeros(size)
    np.add.at(out, index.ravel(), vals.ravel())

    def bw(g):
        gf = g.ravel()[index]
        src._accumulate(gf * w.reshape((-1,) + (1,) * (src.data.ndim - 1)))

    return _make(out.reshape(tuple(out_shape)), (src,), bw)


def avg_pool2x2(x) -> Tensor:
    x = as_tensor(x)
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise DimensionError(f"avg_pool2x2 needs even spatial dims, got {x.shape}")
    out = x.data.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def bw(g):
        up = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4.0
        x._accumulate(up)

    return _make(out, (x,), bw)


# ---------------------------------------------------------------- linear / conv


def linear_forward(x, weight, bias) -> Tensor:
    """``out[n, j] = sum_i x[n, i] * weight[i, j] + bias[j]``."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise _shape_error("linear_forward x/weight", x.shape, weight.shape)
    if bias.shape != (weight.shape[1],):
        raise _shape_error("linear_forward weight/bias", weight.shape, bias.shape)
    out = x.data @ weight.data + bias.data

    def bw(g):
        if x.requires_grad:
            x._accumulate(g @ weight.data.T)
        if weight.requires_grad:
            weight._accumulate(x.data.T @ g)
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=0))

    return _make(out, (x, weight, bias), bw)


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """B×C×H×W → (B·H·W) × (k·k·C) patches, column order (ki, kj, c)."""
    B, C, H, W = x.shape
    p = k // 2
    xl = np.zeros((B, H + 2 * p, W + 2 * p, C))
    xl[:, p:p + H, p:p + W, :] = x.transpose(0, 2, 3, 1)
    cols = np.empty((B, H, W, k, k, C))
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xl[:, i:i + H, j:j + W, :]
    return cols.reshape(B * H * W, k * k * C)


def _col2im(cols: np.ndarray, shape: tuple[int, ...], k: int) -> np.ndarray:
    B, C, H, W = shape
    p = k // 2
    c6 = cols.reshape(B, H, W, k, k, C)
    out = np.zeros((B, H + 2 * p, W + 2 * p, C))
    for i in range(k):
        for j in range(k):
            out[:, i:i + H, j:j + W, :] += c6[:, :, :, i, j, :]
    return out[:, p:p + H, p:p + W, :].transpose(0, 3, 1, 2)


def _check_conv(x: Tensor, kernels: Tensor, bias: Tensor) -> tuple[int, int, int]:
    if kernels.data.ndim != 4:
        raise DimensionError(f"kernels must be Cout×Cin×k×k, got {kernels.shape}")
    cout, cin, k, k2 = kernels.shape
    if k != k2 or k % 2 == 0:
        raise ConfigurationError(f"kernel size must be odd and square, got {k}×{k2}")
    if bias.shape != (cout,):
        raise _shape_error("conv2d kernels/bias", kernels.shape, bias.shape)
    if x.data.ndim not in (3, 4) or x.shape[-3] != cin:
        raise _shape_error("conv2d input/kernels", x.shape, kernels.shape)
    return cout, cin, k


def conv2d_forward(x, kernels, bias) -> Tensor:
    """Stride-1 "same" cross-correlation of a B×Cin×H×W (or Cin×H×W) input.

    Kernels are Cout×Cin×k×k with k odd; zero padding of k//2.
    """
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    cout, cin, k = _check_conv(x, kernels, bias)
    unbatched = x.data.ndim == 3
    xd = x.data[None] if unbatched else x.data
    B, _, H, W = xd.shape
    wmat = kernels.data.transpose(0, 2, 3, 1).reshape(cout, k * k * cin)
    cols = x._cols.get(k)
    if cols is None:
        cols = xd.transpose(0, 2, 3, 1).reshape(B * H * W, cin) if k == 1 else _im2col(xd, k)
        # convs sharing one op output reuse its patches; leaves are never
        # cached since their data may be edited in place between calls
        if x._parents:
            x._cols[k] = cols
    out = (cols @ wmat.T).reshape(B, H, W, cout).transpose(0, 3, 1, 2) + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    if unbatched:
        out = out[0]

    def bw(g):
        gb = g[None] if unbatched else g
        gmat = gb.transpose(0, 2, 3, 1).reshape(B * H * W, cout)
        if kernels.requires_grad:
            kernels._accumulate((gmat.T @ cols).reshape(cout, k, k, cin).transpose(0, 3, 1, 2))
        if bias.requires_grad:
            bias._accumulate(gmat.sum(axis=0))
        if x.requires_grad:
            gcols = gmat @ wmat
            if k == 1:
                gx = gcols.reshape(B, H, W, cin).transpose(0, 3, 1, 2)
            else:
                gx = _col2im(gcols, (B, cin, H, W), k)
            x._accumulate(gx[0] if unbatched else gx)

    return _make(out, (x, kernels, bias), bw)


def _dilate(mask: np.ndarray, k: int) -> np.ndarray:
    B, H, W = mask.shape
    p = k // 2
    padded = np.zeros((B, H + 2 * p, W + 2 * p), dtype=bool)
    padded[:, p:p + H, p:p + W] = mask
    out = np.zeros_like(mask)
    for i in range(k):
        for j in range(k):
            out |= padded[:, i:i + H, j:j + W]
    return out


def conv2d_sparse_input(x, kernels, bias, support: np.ndarray) -> Tensor:
    """``conv2d_forward`` for a B×Cin×H×W input that is zero outside ``support`` (B×H×W bool).

    Only output cells whose window touches the support are computed; the rest
    equal the bias.  The input gradient is exact on the support and zero
    elsewhere, which is all a scatter-produced input can consume.
    """
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    cout, cin, k = _check_conv(x, kernels, bias)
    if x.data.ndim != 4 or support.shape != (x.shape[0],) + x.shape[2:]:
        raise _shape_error("conv2d_sparse_input support", support.shape, x.shape)
    if np.any(x.data.transpose(1, 0, 2, 3)[:, ~support]):
        raise ContractError("conv2d_sparse_input: input is nonzero outside its support")
    B, _, H, W = x.shape
    p = k // 2
    wmat = kernels.data.transpose(0, 2, 3, 1).reshape(cout, k * k * cin)
    bi, hi, wi = np.nonzero(_dilate(support, k))
    xl = np.zeros((B, H + 2 * p, W + 2 * p, cin))
    xl[:, p:p + H, p:p + W, :] = x.data.transpose(0, 2, 3, 1)
    cols = np.empty((bi.size, k, k, cin))
    for i in range(k):
        for j in range(k):
            cols[:, i, j, :] = xl[bi, hi + i, wi + j]
    cols = cols.reshape(bi.size, k * k * cin)
    out_cl = np.broadcast_to(bias.data, (B, H, W, cout)).copy()
    out_cl[bi, hi, wi] += cols @ wmat.T
    out = np.ascontiguousarray(out_cl.transpose(0, 3, 1, 2))

    def bw(g):
        g_cl = g.transpose(0, 2, 3, 1)
        if bias.requires_grad:
            bias._accumulate(g_cl.reshape(-1, cout).sum(axis=0))
        gact = g_cl[bi, hi, wi]
        if kernels.requires_grad:
            kernels._accumulate((gact.T @ cols).reshape(cout, k, k, cin).transpose(0, 3, 1, 2))
        if x.requires_grad:
            gcols = (gact @ wmat).reshape(bi.size, k, k, cin)
            gxl = np.zeros_like(xl)
            for i in range(k):
                for j in range(k):
                    # (bi, hi+i, wi+j) are distinct for fixed (i, j)
                    gxl[bi, hi + i, wi + j] += gcols[:, i, j, :]
            gx = gxl[:, p:p + H, p:p + W, :] * support[..., None]
            x._accumulate(gx.transpose(0, 3, 1, 2))

    return _make(out, (x, kernels, bias), bw)


# ---------------------------------------------------------------- backward


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(loss: Tensor, params: Iterable[Param] = ()) -> dict[str, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into every reachable ``requires_grad`` leaf.

    Returns a name → gradient map for ``params``.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topo(loss)
    for node in order:
        if not isinstance(node, Param):
            node.grad = None
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    return {p.name: p.grad for p in params}


def zero_grad(params: Iterable[Param]) -> None:
    for p in params:
        p.zero_grad()


def grad_check(loss_fn: Callable[[], Tensor], params: Sequence[Param], eps: float = 1e-5) -> float:
    """Max over all param entries of |analytic - central difference| / max(1, |central difference|)."""
    if not 1e-6 <= eps <= 1e-4:
        raise ConfigurationError(f"eps must lie in [1e-6, 1e-4], got {eps}")
    zero_grad(params)
    backward(loss_fn(), params)
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gaf = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(loss_fn().data)
            flat[i] = orig - eps
            fm = float(loss_fn().data)
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            worst = max(worst, abs(gaf[i] - num) / max(1.0, abs(num)))
    zero_grad(params)
    return worst


# ---------------------------------------------------------------- init + optim


def xavier_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=tuple(shape))


def conv_params(rng: np.random.Generator, name: str, cin: int, cout: int, k: int) -> tuple[Param, Param]:
    w = xavier_uniform(rng, (cout, cin, k, k), cin * k * k, cout * k * k)
    return Param(w, f"{name}.weight"), Param(np.zeros(cout), f"{name}.bias")


class OptimState:
    """SGD with optional momentum, or Adam.  Buffers are allocated lazily."""

    def __init__(self, lr: float, momentum: float = 0.0, kind: str = "sgd",
                 betas: tuple[float, float] = (0.9, 0.999), adam_eps: float = 1e-8):
        if lr < 0:
            raise ConfigurationError("learning rate must be non-negative")
        if kind not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown optimizer {kind!r}")
        self.lr = lr
        self.momentum = momentum
        self.kind = kind
        self.betas = betas
        self.adam_eps = adam_eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def optim_step(params: Sequence[Param], state: OptimState, grads: dict[str, np.ndarray] | None = None) -> None:
    """Update params in place from their ``.grad`` (or an explicit name → grad map)."""
    gs = [p.grad if grads is None else grads[p.name] for p in params]
    for p, g in zip(params, gs):
        if g.shape != p.shape:
            raise _shape_error(f"grad for {p.name}", g.shape, p.shape)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in {p.name}")
    state.step_count += 1
    t = state.step_count
    for p, g in zip(params, gs):
        if state.kind == "adam":
            b1, b2 = state.betas
            m = state.m.setdefault(p.name, np.zeros_like(p.data))
            v = state.v.setdefault(p.name, np.zeros_like(p.data))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** t)
            vhat = v / (1 - b2 ** t)
            p.data -= state.lr * mhat / (np.sqrt(vhat) + state.adam_eps)
        elif state.momentum:
            buf = state.m.setdefault(p.name, np.zeros_like(p.data))
            buf *= state.momentum
            buf += g
            p.data -= state.lr * buf
        else:
            p.data -= state.lr * g
