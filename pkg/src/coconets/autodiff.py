"""A small reverse-mode autodiff engine over dense float64 arrays.

Operations record themselves on the active :class:`Tape` (if any) and only when
at least one input requires a gradient. Outside a tape every op is a plain
numpy computation, which keeps inference cheap.

    with Tape() as tape:
        y = linear(x, w, b)
        loss = sum_all(y)
    backward(tape, loss)
"""

from __future__ import annotations

import io
import math
import struct
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

DTYPE = np.float64
NORM_FLOOR = 1e-12


class ShapeMismatch(ValueError):
    pass


class NonScalarLoss(ValueError):
    pass


class MissingGradient(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered list of recorded operations; inputs always precede their outputs."""

    _active: list["Tape"] = []

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        Tape._active.append(self)
        return self

    def __exit__(self, *exc):
        Tape._active.pop()
        return False

    def __len__(self) -> int:
        return len(self.records)

    @classmethod
    def current(cls) -> "Tape | None":
        return cls._active[-1] if cls._active else None


class no_grad:
    """Suspend recording inside an active tape."""

    def __enter__(self):
        Tape._active.append(None)  # type: ignore[arg-type]

    def __exit__(self, *exc):
        Tape._active.pop()
        return False


def _record(out_data: np.ndarray, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    out = Tensor(out_data)
    tape = Tape.current()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.records.append(_Record(out, inputs, bwd))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf tensor."""
    if loss.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    produced = {id(r.out) for r in tape.records}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        in_grads = rec.backward(g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaves[key] = t
    if id(loss) not in produced and loss.requires_grad:
        leaves[id(loss)] = loss
    for key, t in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        g = g.reshape(t.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# elementwise and reductions


def _check_same(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b)
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b)
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b)
    return _record(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, s: float) -> Tensor:
    return _record(a.data * s, (a,), lambda g: (g * s,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a (c,) bias along the last axis of ``x``."""
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeMismatch(f"bias {b.shape} for input {x.shape}")
    axes = tuple(range(x.data.ndim - 1))
    return _record(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=axes)))


def sum_all(a: Tensor) -> Tensor:
    return _record(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = max(a.size, 1)
    return _record(np.array(a.data.sum() / n), (a,), lambda g: (np.full(a.shape, float(g) / n),))


def sum_last(a: Tensor) -> Tensor:
    """Sum over the last axis, keeping it as size 1."""
    return _record(a.data.sum(axis=-1, keepdims=True), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [d.shape[ax] for d in datas])

    def bwd(g):
        return [np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(datas))]

    return _record(out, tuple(tensors), bwd)


# when a list, every ReLU-type activation appends its on/off pattern (see gradcheck)
_kink_log: list | None = None


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _kink_log is not None:
        _kink_log.append(np.packbits(mask))
    return _record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    # gradient at exactly 0 is `slope`
    mask = x.data > 0
    if _kink_log is not None:
        _kink_log.append(np.packbits(mask))
    factor = np.where(mask, 1.0, slope)
    return _record(x.data * factor, (x,), lambda g: (g * factor,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _record(s, (x,), lambda g: (g * s * (1.0 - s),))


class _NormStats:
    """Counts slices that were too small to normalize."""

    degenerate = 0


norm_stats = _NormStats()


def l2_normalize(x: Tensor) -> Tensor:
    """Scale each last-axis slice to unit length; near-zero slices pass through."""
    norm = np.sqrt(np.sum(x.data * x.data, axis=-1, keepdims=True))
    small = norm < NORM_FLOOR
    n_small = int(small.sum())
    if n_small:
        norm_stats.degenerate += n_small
    denom = np.where(small, 1.0, norm)
    y = x.data / denom

    def bwd(g):
        proj = np.sum(y * g, axis=-1, keepdims=True)
        gx = (g - y * proj) / denom
        return (np.where(small, g, gx),)

    return _record(y, (x,), bwd)


def logsumexp_last(x: Tensor) -> Tensor:
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=-1, keepdims=True)
    out = m + np.log(s)
    soft = e / s
    return _record(out, (x,), lambda g: (g * soft,))


def bce_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross entropy of ``sigmoid(logits)`` against 0/1 labels."""
    z = logits.data
    y = np.asarray(labels, dtype=DTYPE).reshape(z.shape)
    n = max(z.size, 1)
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    s = _sigmoid(z)
    return _record(np.array(per.sum() / n), (logits,), lambda g: (float(g) * (s - y) / n,))


def mse(pred: Tensor, target: np.ndarray) -> Tensor:
    t = np.asarray(target, dtype=DTYPE).reshape(pred.shape)
    n = max(pred.size, 1)
    diff = pred.data - t
    return _record(np.array(np.sum(diff * diff) / n), (pred,), lambda g: (float(g) * 2.0 * diff / n,))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    return _record(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` for ``x`` of shape (n, i), ``w`` (i, o), ``b`` (o,)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeMismatch(f"linear {x.shape} @ {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeMismatch(f"bias {b.shape} for output width {w.shape[1]}")
    y = x.data @ w.data
    if b is None:
        return _record(y, (x, w), lambda g: (g @ w.data.T, x.data.T @ g))
    y = y + b.data
    return _record(y, (x, w, b), lambda g: (g @ w.data.T, x.data.T @ g, g.sum(axis=0)))


def spmm(a: sp.spmatrix, x: Tensor) -> Tensor:
    """Constant sparse matrix times a dense (n, c) tensor."""
    if a.shape[1] != x.shape[0]:
        raise ShapeMismatch(f"spmm {a.shape} @ {x.shape}")
    a = sp.csr_matrix(a)
    at = [None]

    def bwd(g):
        if at[0] is None:
            at[0] = a.T.tocsr()
        return (np.asarray(at[0] @ g),)

    return _record(np.asarray(a @ x.data), (x,), bwd)


# ---------------------------------------------------------------------------
# 3D convolution (channels-last, single volume, SAME zero padding)


def _same_pad(size_out: int, size_in: int, k: int, s: int) -> tuple[int, int]:
    total = max((size_out - 1) * s + k - size_in, 0)
    return total // 2, total - total // 2


def _im2col(xp: np.ndarray, k: int, s: int, out: tuple[int, int, int]) -> np.ndarray:
    """Patches of a padded volume as an (n_out, k^3 * c) matrix."""
    c = xp.shape[-1]
    n = out[0] * out[1] * out[2]
    cols = np.empty((n, k * k * k, c), dtype=DTYPE)
    o = 0
    for a in range(k):
        for b in range(k):
            for d in range(k):
                sl = xp[a : a + s * (out[0] - 1) + 1 : s, b : b + s * (out[1] - 1) + 1 : s, d : d + s * (out[2] - 1) + 1 : s]
                cols[:, o, :] = sl.reshape(n, c)
                o += 1
    return cols.reshape(n, k * k * k * c)


def _col2im(cols: np.ndarray, padded: tuple[int, ...], k: int, s: int, out: tuple[int, int, int]) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patch columns into a padded volume."""
    c = padded[-1]
    cols = cols.reshape(-1, k * k * k, c)
    vol = np.zeros(padded, dtype=DTYPE)
    o = 0
    for a in range(k):
        for b in range(k):
            for d in range(k):
                vol[a : a + s * (out[0] - 1) + 1 : s, b : b + s * (out[1] - 1) + 1 : s, d : d + s * (out[2] - 1) + 1 : s] += cols[:, o, :].reshape(*out, c)
                o += 1
    return vol


def _conv_geometry(big: tuple[int, int, int], k: int, s: int):
    """Padding and output size for a strided SAME conv from ``big`` spatial dims."""
    for n in big:
        if n % s:
            raise ShapeMismatch(f"spatial size {n} not divisible by stride {s}")
    small = tuple(n // s for n in big)
    pads = [_same_pad(small[i], big[i], k, s) for i in range(3)]
    return small, pads


def conv3d(x: Tensor, kernel: Tensor, stride: int = 1, transposed: bool = False) -> Tensor:
    """3D convolution of a (W, H, D, cin) volume with a (k, k, k, cin, cout) kernel.

    ``transposed=True`` gives the exact adjoint of the strided convolution whose
    kernel has the channel axes swapped, so spatial dims grow by ``stride``.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 5:
        raise ShapeMismatch(f"conv3d expects 4D input and 5D kernel, got {x.shape}, {kernel.shape}")
    k = kernel.shape[0]
    if kernel.shape[:3] != (k, k, k):
        raise ShapeMismatch(f"kernel must be cubic, got {kernel.shape}")
    cin, cout = kernel.shape[3], kernel.shape[4]
    if x.shape[3] != cin:
        raise ShapeMismatch(f"input has {x.shape[3]} channels, kernel expects {cin}")
    s = int(stride)
    spatial = x.shape[:3]

    if not transposed:
        out, pads = _conv_geometry(spatial, k, s)
        xp = np.pad(x.data, pads + [(0, 0)])
        cols = _im2col(xp, k, s, out)
        w2 = kernel.data.reshape(k * k * k * cin, cout)
        y = (cols @ w2).reshape(*out, cout)

        def bwd(g):
            g2 = g.reshape(-1, cout)
            gw = (cols.T @ g2).reshape(kernel.shape)
            gcols = g2 @ w2.T
            gxp = _col2im(gcols, xp.shape, k, s, out)
            gx = gxp[pads[0][0] : pads[0][0] + spatial[0], pads[1][0] : pads[1][0] + spatial[1], pads[2][0] : pads[2][0] + spatial[2]]
            return gx, gw

        return _record(y, (x, kernel), bwd)

    big = tuple(n * s for n in spatial)
    _, pads = _conv_geometry(big, k, s)
    padded = tuple(big[i] + pads[i][0] + pads[i][1] for i in range(3)) + (cout,)
    # (cin, k^3 * cout) so that x @ wt yields patch columns over the output volume
    wt = kernel.data.transpose(3, 0, 1, 2, 4).reshape(cin, k * k * k * cout)
    x2 = x.data.reshape(-1, cin)
    cols = x2 @ wt
    yp = _col2im(cols, padded, k, s, spatial)
    y = np.ascontiguousarray(yp[pads[0][0] : pads[0][0] + big[0], pads[1][0] : pads[1][0] + big[1], pads[2][0] : pads[2][0] + big[2]])

    def bwd_t(g):
        gp = np.pad(g, pads + [(0, 0)])
        gcols = _im2col(gp, k, s, spatial)
        gx = (gcols @ wt.T).reshape(x.shape)
        gwt = x2.T @ gcols
        gw = gwt.reshape(cin, k, k, k, cout).transpose(1, 2, 3, 0, 4)
        return gx, np.ascontiguousarray(gw)

    return _record(y, (x, kernel), bwd_t)


# ---------------------------------------------------------------------------
# parameters and optimizer


def glorot_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=tuple(shape))


@dataclass
class ParameterStore:
    params: dict[str, Tensor] = field(default_factory=dict)
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(np.array(value, dtype=DTYPE), requires_grad=True, name=name)
        self.params[name] = t
        self.adam_m[name] = np.zeros_like(t.data)
        self.adam_v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self) -> int:
        return len(self.params)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.params if n.startswith(prefix)]

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def num_values(self) -> int:
        return sum(t.size for t in self.params.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.params.items()}


def adam_step(
    store: ParameterStore,
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParameterStore:
    """In-place bias-corrected Adam update.

    Parameters without a gradient this step are left untouched (moments included).
    """
    with_grad = [n for n, t in store.params.items() if t.grad is not None]
    if not with_grad:
        raise MissingGradient("no parameter has a gradient")
    store.step_count += 1
    t = store.step_count
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name in with_grad:
        p = store.params[name]
        g = p.grad
        m = store.adam_m[name]
        v = store.adam_v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return store


# ---------------------------------------------------------------------------
# finite-difference gradient checking


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    a = np.asarray(analytic, dtype=DTYPE)
    n = np.asarray(numeric, dtype=DTYPE)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_gradient(
    f: Callable[[], float],
    t: Tensor,
    h: float = 1e-5,
    indices: Iterable[int] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of scalar ``f`` w.r.t. selected flat entries of ``t``.

    Returns ``(flat_indices, gradient_values)``.
    """
    idx, out, _ = _differences(f, t, h, indices, watch_kinks=False)
    return idx, out


def _activation_pattern(f: Callable[[], float]) -> tuple[float, bytes]:
    global _kink_log
    _kink_log = []
    try:
        value = f()
        pattern = b"".join(m.tobytes() for m in _kink_log)
    finally:
        _kink_log = None
    return value, pattern


def _differences(f, t: Tensor, h: float, indices, watch_kinks: bool):
    flat = t.data.reshape(-1)
    idx = np.arange(flat.size) if indices is None else np.asarray(list(indices), dtype=np.int64)
    out = np.empty(idx.size)
    crossed = np.zeros(idx.size, dtype=bool)
    for j, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        fp, pp = _activation_pattern(f) if watch_kinks else (f(), b"")
        flat[i] = old - h
        fm, pm = _activation_pattern(f) if watch_kinks else (f(), b"")
        flat[i] = old
        out[j] = (fp - fm) / (2.0 * h)
        crossed[j] = pp != pm
    return idx, out, crossed


def gradcheck(
    build: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    h: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
    skip_kinks: bool = False,
    stats: dict | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``build`` must recompute the scalar output from the current tensor values.
    With ``max_entries`` only a random subset of each tensor's entries is probed.
    With ``skip_kinks`` a probe whose +h and -h evaluations switch any ReLU-type
    unit (so the difference straddles a kink) is discarded and replaced by another
    random entry of the same tensor. ``stats`` receives probe and skip counts.
    """
    for t in tensors:
        t.grad = None
        t.requires_grad = True
    with Tape() as tape:
        out = build()
    backward(tape, out)
    rng = rng or np.random.default_rng(0)

    def f() -> float:
        return float(build().data)

    worst = 0.0
    probed = skipped = 0
    for t in tensors:
        n = t.size
        want = n if max_entries is None else min(n, max_entries)
        order = rng.permutation(n) if want < n else np.arange(n)
        ana = np.zeros(n) if t.grad is None else t.grad.reshape(-1)
        pos = 0
        got = 0
        while got < want and pos < n:
            take = order[pos:pos + want - got]
            pos += take.size
            idx, num, crossed = _differences(f, t, h, take, skip_kinks)
            keep = ~crossed if skip_kinks else np.ones(idx.size, dtype=bool)
            skipped += int((~keep).sum())
            got += int(keep.sum())
            err = relative_error(ana[idx[keep]], num[keep], floor)
            worst = max(worst, float(err.max(initial=0.0)))
        probed += got
    if stats is not None:
        stats.update(probed=probed, skipped=skipped)
    return worst


# ---------------------------------------------------------------------------
# checkpoint file: "CCN1", params, step count + Adam moments, extra state

_MAGIC = b"CCN1"


def _write_records(buf: io.BufferedIOBase, records: Sequence[tuple[str, np.ndarray]]) -> None:
    buf.write(struct.pack("<Q", len(records)))
    for name, arr in records:
        raw = name.encode("utf-8")
        a = np.asarray(arr, dtype="<f8")  # keeps 0-d arrays 0-d
        buf.write(struct.pack("<Q", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<Q", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        buf.write(a.tobytes(order="C"))


def _read_exact(buf, n: int) -> bytes:
    b = buf.read(n)
    if len(b) != n:
        raise CheckpointError("truncated checkpoint")
    return b


def _read_records(buf) -> list[tuple[str, np.ndarray]]:
    (count,) = struct.unpack("<Q", _read_exact(buf, 8))
    out = []
    for _ in range(count):
        (ln,) = struct.unpack("<Q", _read_exact(buf, 8))
        name = _read_exact(buf, ln).decode("utf-8")
        (rank,) = struct.unpack("<Q", _read_exact(buf, 8))
        dims = struct.unpack(f"<{rank}Q", _read_exact(buf, 8 * rank)) if rank else ()
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(_read_exact(buf, 8 * n), dtype="<f8").astype(DTYPE).reshape(dims)
        out.append((name, data))
    return out


def save_checkpoint(path, store: ParameterStore, extra: dict[str, np.ndarray] | None = None) -> None:
    names = list(store.params)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        _write_records(fh, [(n, store.params[n].data) for n in names])
        fh.write(struct.pack("<Q", store.step_count))
        _write_records(fh, [(n, store.adam_m[n]) for n in names])
        _write_records(fh, [(n, store.adam_v[n]) for n in names])
        _write_records(fh, sorted((extra or {}).items()))


def load_checkpoint(path, store: ParameterStore | None = None) -> tuple[ParameterStore, dict[str, np.ndarray]]:
    """Read a checkpoint; if ``store`` is given its values are overwritten in place."""
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise CheckpointError("bad checkpoint magic")
        params = _read_records(fh)
        (step,) = struct.unpack("<Q", _read_exact(fh, 8))
        m = dict(_read_records(fh))
        v = dict(_read_records(fh))
        extra = dict(_read_records(fh))
    if store is None:
        store = ParameterStore()
        for name, data in params:
            store.add(name, data)
    else:
        missing = set(store.params) ^ {n for n, _ in params}
        if missing:
            raise CheckpointError(f"parameter set mismatch: {sorted(missing)[:5]}")
        for name, data in params:
            if store.params[name].shape != data.shape:
                raise CheckpointError(f"shape mismatch for {name}")
            store.params[name].data = data.copy()
    for name, _ in params:
        store.adam_m[name] = m[name].copy()
        store.adam_v[name] = v[name].copy()
    store.step_count = int(step)
    return store, extra
