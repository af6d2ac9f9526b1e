"""Reverse-mode differentiable kernels over float64 numpy arrays.

The kernel set is deliberately small: matrix product, row softmax, layer
normalization, a smooth pointwise nonlinearity, embedding/row lookup, row
L2-normalization, scalar add/scale, log, reductions, and the slicing and
concatenation plumbing the encoders need. Kernels are pure functions and
safe to call from multiple threads; taping a call onto a
``ComputationRecord`` is what makes it differentiable, and a record must
not be shared across concurrent loss evaluations.

All math runs in double precision so gradient checks can be tight and
repeated runs are bit-identical.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ContractViolation, CorruptionError, FormatError, NumericInputError

Array = np.ndarray

BLOB_MAGIC = b"NAMT"
BLOB_VERSION = 1
_MAX_BLOB_RANK = 32


class Tensor:
    """Float64 array plus an optional same-shape gradient accumulator.

    ``zero_rows`` marks rows that were passed through L2 normalization
    unchanged because their norm was exactly zero; downstream consumers
    may treat such rows as carrying no signal.
    """

    __slots__ = ("data", "grad", "zero_rows")

    def __init__(self, data, zero_rows: Sequence[int] = (), _validate: bool = True):
        arr = np.asarray(data, dtype=np.float64)
        if _validate and not np.all(np.isfinite(arr)):
            raise NumericInputError("non-finite values in tensor")
        self.data = arr
        self.grad: Array | None = None
        self.zero_rows = tuple(int(i) for i in zero_rows)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"


@dataclass
class TapeNode:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[Array], Sequence[Array]]


class ComputationRecord:
    """Ordered, acyclic tape of kernel applications.

    Single-writer: one record per loss evaluation. Fan-out of a tensor into
    several kernels is fine; ``backward`` accumulates gradients additively.
    """

    def __init__(self) -> None:
        self.nodes: list[TapeNode] = []

    def __len__(self) -> int:
        return len(self.nodes)


def _require_2d(kind: str, *arrays: Array) -> None:
    for a in arrays:
        if a.ndim != 2:
            raise ContractViolation(f"{kind}: expected rank-2 input, got shape {a.shape}")


def _require_n_inputs(kind: str, datas: list[Array], n: int) -> None:
    if len(datas) != n:
        raise ContractViolation(f"{kind}: expected {n} inputs, got {len(datas)}")


def _k_identity(datas, attrs):
    _require_n_inputs("identity", datas, 1)
    (a,) = datas
    out = a.copy()

    def vjp(g):
        return (g,)

    return out, vjp


def _k_matmul(datas, attrs):
    _require_n_inputs("matmul", datas, 2)
    a, b = datas
    _require_2d("matmul", a, b)
    if a.shape[1] != b.shape[0]:
        raise ContractViolation(f"matmul: inner dims differ, {a.shape} x {b.shape}")
    out = a @ b

    def vjp(g):
        return (g @ b.T, a.T @ g)

    return out, vjp


def _k_transpose(datas, attrs):
    _require_n_inputs("transpose", datas, 1)
    (a,) = datas
    _require_2d("transpose", a)
    # Safe as a view: forward data is never mutated in place.
    out = a.T

    def vjp(g):
        return (g.T,)

    return out, vjp


def _broadcast_shapes_ok(a: Array, b: Array) -> bool:
    return b.shape == a.shape or (b.ndim == 2 and b.shape == (1, a.shape[1]))


def _k_add(datas, attrs):
    _require_n_inputs("add", datas, 2)
    a, b = datas
    _require_2d("add", a, b)
    if not _broadcast_shapes_ok(a, b):
        raise ContractViolation(f"add: shapes {a.shape} and {b.shape} do not conform")
    out = a + b
    row_broadcast = b.shape != a.shape

    def vjp(g):
        gb = g.sum(axis=0, keepdims=True) if row_broadcast else g
        return (g, gb)

    return out, vjp


def _k_mul(datas, attrs):
    _require_n_inputs("mul", datas, 2)
    a, b = datas
    _require_2d("mul", a, b)
    if not _broadcast_shapes_ok(a, b):
        raise ContractViolation(f"mul: shapes {a.shape} and {b.shape} do not conform")
    out = a * b
    row_broadcast = b.shape != a.shape

    def vjp(g):
        ga = g * b
        gb = g * a
        if row_broadcast:
            gb = gb.sum(axis=0, keepdims=True)
        return (ga, gb)

    return out, vjp


def _scalar_attr(kind: str, attrs, name: str) -> float:
    if name not in attrs:
        raise ContractViolation(f"{kind}: missing attr {name!r}")
    v = float(attrs[name])
    if not np.isfinite(v):
        raise NumericInputError(f"{kind}: non-finite attr {name!r}")
    return v


def _k_scalar_add(datas, attrs):
    _require_n_inputs("scalar_add", datas, 1)
    (a,) = datas
    v = _scalar_attr("scalar_add", attrs, "value")
    out = a + v

    def vjp(g):
        return (g,)

    return out, vjp


def _k_scale(datas, attrs):
    _require_n_inputs("scale", datas, 1)
    (a,) = datas
    v = _scalar_attr("scale", attrs, "value")
    out = a * v

    def vjp(g):
        return (g * v,)

    return out, vjp


def _k_log(datas, attrs):
    _require_n_inputs("log", datas, 1)
    (a,) = datas
    if not np.all(a > 0.0):
        raise NumericInputError("log: non-positive input")
    out = np.log(a)

    def vjp(g):
        return (g / a,)

    return out, vjp


def _k_row_softmax(datas, attrs):
    _require_n_inputs("row_softmax", datas, 1)
    (a,) = datas
    _require_2d("row_softmax", a)
    t = float(attrs.get("temperature", 1.0))
    if not (np.isfinite(t) and t > 0.0):
        raise ContractViolation("row_softmax: temperature must be positive")
    x = a / t
    x = x - x.max(axis=1, keepdims=True)
    e = np.exp(x)
    p = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        inner = (g * p).sum(axis=1, keepdims=True)
        return ((p * (g - inner)) / t,)

    return p, vjp


def _k_layer_norm(datas, attrs):
    _require_n_inputs("layer_norm", datas, 1)
    (a,) = datas
    _require_2d("layer_norm", a)
    eps = float(attrs.get("eps", 1e-5))
    if not (np.isfinite(eps) and eps > 0.0):
        raise ContractViolation("layer_norm: eps must be positive")
    m = a.mean(axis=1, keepdims=True)
    centered = a - m
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = centered * inv

    def vjp(g):
        gm = g.mean(axis=1, keepdims=True)
        gy = (g * y).mean(axis=1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return y, vjp


_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def _k_gelu(datas, attrs):
    _require_n_inputs("gelu", datas, 1)
    (a,) = datas
    a2 = a * a
    u = _GELU_C * (a + _GELU_A * a2 * a)
    th = np.tanh(u)
    out = 0.5 * a * (1.0 + th)

    def vjp(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * a2)
        d = 0.5 * (1.0 + th) + 0.5 * a * (1.0 - th * th) * du
        return (g * d,)

    return out, vjp


def _k_l2_normalize(datas, attrs):
    _require_n_inputs("l2_normalize", datas, 1)
    (a,) = datas
    _require_2d("l2_normalize", a)
    norms = np.sqrt((a * a).sum(axis=1, keepdims=True))
    zero = norms[:, 0] == 0.0
    safe = np.where(norms == 0.0, 1.0, norms)
    y = a / safe

    def vjp(g):
        # Zero rows pass through as identity: y there is 0 and safe is 1,
        # so the general formula already reduces to g.
        inner = (g * y).sum(axis=1, keepdims=True)
        return ((g - y * inner) / safe,)

    return y, vjp, tuple(np.flatnonzero(zero))


def _ids_attr(kind: str, attrs, n_rows: int) -> tuple[int, ...]:
    if "ids" not in attrs:
        raise ContractViolation(f"{kind}: missing attr 'ids'")
    ids = tuple(int(i) for i in attrs["ids"])
    for i in ids:
        if not 0 <= i < n_rows:
            raise ContractViolation(f"{kind}: index {i} out of range for {n_rows} rows")
    return ids


def _k_embedding(datas, attrs):
    _require_n_inputs("embedding", datas, 1)
    (table,) = datas
    _require_2d("embedding", table)
    ids = _ids_attr("embedding", attrs, table.shape[0])
    idx = np.asarray(ids, dtype=np.intp)
    out = table[idx]  # fancy indexing already copies

    def vjp(g):
        gt = np.zeros_like(table)
        np.add.at(gt, idx, g)
        return (gt,)

    return out, vjp


def _k_take_rows(datas, attrs):
    # Same math as embedding; named separately because it selects rows of an
    # activation rather than a lookup table.
    out, vjp = _k_embedding(datas, attrs)
    return out, vjp


def _k_slice_cols(datas, attrs):
    _require_n_inputs("slice_cols", datas, 1)
    (a,) = datas
    _require_2d("slice_cols", a)
    start = int(attrs.get("start", 0))
    stop = int(attrs.get("stop", a.shape[1]))
    if not 0 <= start < stop <= a.shape[1]:
        raise ContractViolation(f"slice_cols: bad range [{start}, {stop}) for {a.shape}")
    out = a[:, start:stop]

    def vjp(g):
        ga = np.zeros_like(a)
        ga[:, start:stop] = g
        return (ga,)

    return out, vjp


def _k_slice_rows(datas, attrs):
    _require_n_inputs("slice_rows", datas, 1)
    (a,) = datas
    _require_2d("slice_rows", a)
    start = int(attrs.get("start", 0))
    stop = int(attrs.get("stop", a.shape[0]))
    if not 0 <= start < stop <= a.shape[0]:
        raise ContractViolation(f"slice_rows: bad range [{start}, {stop}) for {a.shape}")
    out = a[start:stop]

    def vjp(g):
        ga = np.zeros_like(a)
        ga[start:stop] = g
        return (ga,)

    return out, vjp


def _ranges_attr(kind: str, attrs, n_rows: int):
    if "ranges" not in attrs:
        raise ContractViolation(f"{kind}: missing attr 'ranges'")
    ranges = tuple((int(s), int(e)) for s, e in attrs["ranges"])
    at = 0
    for s, e in ranges:
        if s != at or e <= s:
            raise ContractViolation(f"{kind}: ranges must tile the rows contiguously")
        at = e
    if at != n_rows:
        raise ContractViolation(f"{kind}: ranges cover {at} of {n_rows} rows")
    return ranges


def _k_grouped_attention(datas, attrs):
    """Softmax attention run independently inside each row range (one range
    per example), multi-head over column blocks. One taped call replaces the
    per-example, per-head kernel chain without changing the math."""
    _require_n_inputs("grouped_attention", datas, 3)
    q, k, v = datas
    _require_2d("grouped_attention", q, k, v)
    if not (q.shape == k.shape == v.shape):
        raise ContractViolation("grouped_attention: q, k, v shapes must match")
    heads = int(attrs.get("heads", 1))
    width = q.shape[1]
    if heads < 1 or width % heads:
        raise ContractViolation("grouped_attention: width must divide by heads")
    ranges = _ranges_attr("grouped_attention", attrs, q.shape[0])
    hd = width // heads
    scale = 1.0 / np.sqrt(hd)
    out = np.empty_like(q)
    weights: list[list[Array]] = []
    for s, e in ranges:
        w_heads = []
        for h in range(heads):
            lo, hi = h * hd, (h + 1) * hd
            scores = (q[s:e, lo:hi] @ k[s:e, lo:hi].T) * scale
            scores = scores - scores.max(axis=1, keepdims=True)
            ex = np.exp(scores)
            w = ex / ex.sum(axis=1, keepdims=True)
            out[s:e, lo:hi] = w @ v[s:e, lo:hi]
            w_heads.append(w)
        weights.append(w_heads)

    def vjp(g):
        gq = np.zeros_like(q)
        gk = np.zeros_like(k)
        gv = np.zeros_like(v)
        for (s, e), w_heads in zip(ranges, weights):
            for h in range(heads):
                lo, hi = h * hd, (h + 1) * hd
                go = g[s:e, lo:hi]
                w = w_heads[h]
                gw = go @ v[s:e, lo:hi].T
                gv[s:e, lo:hi] = w.T @ go
                gs = w * (gw - (gw * w).sum(axis=1, keepdims=True))
                gs = gs * scale
                gq[s:e, lo:hi] = gs @ k[s:e, lo:hi]
                gk[s:e, lo:hi] = gs.T @ q[s:e, lo:hi]
        return (gq, gk, gv)

    return out, vjp


def _k_concat_rows(datas, attrs):
    if not datas:
        raise ContractViolation("concat_rows: no inputs")
    _require_2d("concat_rows", *datas)
    cols = datas[0].shape[1]
    for d in datas:
        if d.shape[1] != cols:
            raise ContractViolation("concat_rows: column counts differ")
    out = np.vstack(datas)
    sizes = [d.shape[0] for d in datas]

    def vjp(g):
        grads = []
        at = 0
        for s in sizes:
            grads.append(g[at : at + s])
            at += s
        return tuple(grads)

    return out, vjp


def _k_concat_cols(datas, attrs):
    if not datas:
        raise ContractViolation("concat_cols: no inputs")
    _require_2d("concat_cols", *datas)
    rows = datas[0].shape[0]
    for d in datas:
        if d.shape[0] != rows:
            raise ContractViolation("concat_cols: row counts differ")
    out = np.hstack(datas)
    sizes = [d.shape[1] for d in datas]

    def vjp(g):
        grads = []
        at = 0
        for s in sizes:
            grads.append(g[:, at : at + s])
            at += s
        return tuple(grads)

    return out, vjp


def _axis_attr(kind: str, attrs):
    axis = attrs.get("axis", None)
    if axis not in (None, 0, 1):
        raise ContractViolation(f"{kind}: axis must be None, 0 or 1")
    return axis


def _k_sum(datas, attrs):
    _require_n_inputs("sum", datas, 1)
    (a,) = datas
    _require_2d("sum", a)
    axis = _axis_attr("sum", attrs)
    if axis is None:
        out = np.array([[a.sum()]])
    else:
        out = a.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (np.broadcast_to(g, a.shape).copy() if axis is not None else np.full_like(a, g[0, 0]),)

    return out, vjp


def _k_mean(datas, attrs):
    _require_n_inputs("mean", datas, 1)
    (a,) = datas
    _require_2d("mean", a)
    axis = _axis_attr("mean", attrs)
    if axis is None:
        out = np.array([[a.mean()]])
        scale = 1.0 / a.size
    else:
        out = a.mean(axis=axis, keepdims=True)
        scale = 1.0 / a.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.full_like(a, g[0, 0] * scale),)
        return (np.broadcast_to(g, a.shape).copy() * scale,)

    return out, vjp


def _k_max(datas, attrs):
    _require_n_inputs("max", datas, 1)
    (a,) = datas
    _require_2d("max", a)
    axis = _axis_attr("max", attrs)
    # Gradient routes to the first maximal index on exact ties.
    if axis is None:
        flat = int(np.argmax(a))
        out = np.array([[a.reshape(-1)[flat]]])

        def vjp(g):
            ga = np.zeros_like(a)
            ga.reshape(-1)[flat] = g[0, 0]
            return (ga,)

    elif axis == 1:
        idx = np.argmax(a, axis=1)
        out = a[np.arange(a.shape[0]), idx][:, None].copy()

        def vjp(g):
            ga = np.zeros_like(a)
            ga[np.arange(a.shape[0]), idx] = g[:, 0]
            return (ga,)

    else:
        idx = np.argmax(a, axis=0)
        out = a[idx, np.arange(a.shape[1])][None, :].copy()

        def vjp(g):
            ga = np.zeros_like(a)
            ga[idx, np.arange(a.shape[1])] = g[0, :]
            return (ga,)

    return out, vjp


_KERNELS: dict[str, Callable] = {
    "identity": _k_identity,
    "matmul": _k_matmul,
    "transpose": _k_transpose,
    "add": _k_add,
    "mul": _k_mul,
    "scalar_add": _k_scalar_add,
    "scale": _k_scale,
    "log": _k_log,
    "row_softmax": _k_row_softmax,
    "layer_norm": _k_layer_norm,
    "gelu": _k_gelu,
    "l2_normalize": _k_l2_normalize,
    "embedding": _k_embedding,
    "take_rows": _k_take_rows,
    "slice_cols": _k_slice_cols,
    "slice_rows": _k_slice_rows,
    "grouped_attention": _k_grouped_attention,
    "concat_rows": _k_concat_rows,
    "concat_cols": _k_concat_cols,
    "sum": _k_sum,
    "mean": _k_mean,
    "max": _k_max,
}


def kernel_kinds() -> tuple[str, ...]:
    return tuple(_KERNELS)


def run_kernel(
    kind: str,
    inputs: Sequence[Tensor],
    attrs: dict | None = None,
    record: ComputationRecord | None = None,
) -> Tensor:
    """Apply one kernel; tape it onto ``record`` when gradient tracking is on."""
    builder = _KERNELS.get(kind)
    if builder is None:
        raise ContractViolation(f"unknown kernel {kind!r}")
    datas = [t.data for t in inputs]
    result = builder(datas, attrs or {})
    out, vjp = result[0], result[1]
    zero_rows = result[2] if len(result) > 2 else ()
    # Cheap screen first (non-finite values poison the sum); the precise pass
    # only runs on suspicion, which also absolves a finite sum that overflowed.
    if not np.isfinite(out.sum()) and not np.all(np.isfinite(out)):
        raise NumericInputError(f"kernel {kind!r} produced non-finite values")
    out_t = Tensor(out, zero_rows=zero_rows, _validate=False)
    if record is not None:
        record.nodes.append(TapeNode(kind, tuple(inputs), out_t, vjp))
    return out_t


def backward(record: ComputationRecord, loss: Tensor) -> None:
    """Accumulate d(loss)/d(input) into ``.grad`` of every taped tensor.

    Deterministic: nodes are replayed in reverse creation order, so the same
    record always produces bit-identical gradients.
    """
    if loss.data.size != 1:
        raise ContractViolation(f"backward: loss must be scalar, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(record.nodes):
        g = node.output.grad
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if inp.grad is None:
                inp.grad = gi.copy()
            else:
                inp.grad = inp.grad + gi


# --- convenience wrappers -------------------------------------------------


def identity(a, record=None):
    return run_kernel("identity", [a], record=record)


def matmul(a, b, record=None):
    return run_kernel("matmul", [a, b], record=record)


def transpose(a, record=None):
    return run_kernel("transpose", [a], record=record)


def add(a, b, record=None):
    return run_kernel("add", [a, b], record=record)


def mul(a, b, record=None):
    return run_kernel("mul", [a, b], record=record)


def scalar_add(a, value, record=None):
    return run_kernel("scalar_add", [a], {"value": value}, record)


def scale(a, value, record=None):
    return run_kernel("scale", [a], {"value": value}, record)


def log(a, record=None):
    return run_kernel("log", [a], record=record)


def row_softmax(a, temperature=1.0, record=None):
    return run_kernel("row_softmax", [a], {"temperature": temperature}, record)


def layer_norm(a, eps=1e-5, record=None):
    return run_kernel("layer_norm", [a], {"eps": eps}, record)


def gelu(a, record=None):
    return run_kernel("gelu", [a], record=record)


def l2_normalize(a, record=None):
    return run_kernel("l2_normalize", [a], record=record)


def embedding(table, ids, record=None):
    return run_kernel("embedding", [table], {"ids": tuple(ids)}, record)


def take_rows(a, ids, record=None):
    return run_kernel("take_rows", [a], {"ids": tuple(ids)}, record)


def slice_cols(a, start, stop, record=None):
    return run_kernel("slice_cols", [a], {"start": start, "stop": stop}, record)


def slice_rows(a, start, stop, record=None):
    return run_kernel("slice_rows", [a], {"start": start, "stop": stop}, record)


def grouped_attention(q, k, v, ranges, heads, record=None):
    return run_kernel("grouped_attention", [q, k, v], {"ranges": tuple(ranges), "heads": heads}, record)


def concat_rows(parts, record=None):
    return run_kernel("concat_rows", list(parts), record=record)


def concat_cols(parts, record=None):
    return run_kernel("concat_cols", list(parts), record=record)


def reduce_sum(a, axis=None, record=None):
    return run_kernel("sum", [a], {"axis": axis}, record)


def reduce_mean(a, axis=None, record=None):
    return run_kernel("mean", [a], {"axis": axis}, record)


def reduce_max(a, axis=None, record=None):
    return run_kernel("max", [a], {"axis": axis}, record)


# --- finite-difference checking --------------------------------------------


@dataclass(frozen=True)
class GradCheckResult:
    """Worst relative error over all checked input entries.

    Entries sitting on a max-reduction tie are skipped (counted, not failed):
    a central difference straddling the kink is meaningless there.
    """

    max_rel_error: float
    checked: int
    skipped: int


def _max_tie_skip_mask(a: Array, axis, step: float) -> Array:
    near = np.zeros(a.shape, dtype=bool)
    margin = 4.0 * step
    if axis is None:
        top = a.max()
        near = a >= top - margin
        if near.sum() <= 1:
            near[:] = False
    elif axis == 1:
        top = a.max(axis=1, keepdims=True)
        near = a >= top - margin
        near[near.sum(axis=1) <= 1, :] = False
    else:
        top = a.max(axis=0, keepdims=True)
        near = a >= top - margin
        near[:, near.sum(axis=0) <= 1] = False
    return near


def grad_check(
    kind: str,
    point: Sequence,
    attrs: dict | None = None,
    step: float = 1e-4,
    seed: int = 0,
) -> GradCheckResult:
    """Compare a kernel's analytic gradient against central differences.

    The scalar probe is ``sum(output * W)`` for a fixed random ``W``; its
    analytic input gradients come from the kernel's own vjp, the numeric ones
    from central differences with the given step.
    """
    attrs = attrs or {}
    builder = _KERNELS.get(kind)
    if builder is None:
        raise ContractViolation(f"unknown kernel {kind!r}")
    arrays = [np.array(p, dtype=np.float64) for p in point]
    result = builder([a.copy() for a in arrays], attrs)
    out, vjp = result[0], result[1]
    w = np.random.default_rng(seed).standard_normal(out.shape)
    analytic = vjp(w)

    skip_masks = [np.zeros(a.shape, dtype=bool) for a in arrays]
    if kind == "max":
        skip_masks[0] = _max_tie_skip_mask(arrays[0], attrs.get("axis", None), step)

    def probe(mod_arrays):
        res = builder([m.copy() for m in mod_arrays], attrs)
        return float((res[0] * w).sum())

    worst = 0.0
    checked = 0
    skipped = 0
    for ti, a in enumerate(arrays):
        flat = a.reshape(-1)
        skip_flat = skip_masks[ti].reshape(-1)
        ana_flat = np.asarray(analytic[ti]).reshape(-1)
        for i in range(flat.size):
            if skip_flat[i]:
                skipped += 1
                continue
            orig = flat[i]
            flat[i] = orig + step
            up = probe(arrays)
            flat[i] = orig - step
            down = probe(arrays)
            flat[i] = orig
            fd = (up - down) / (2.0 * step)
            rel = abs(ana_flat[i] - fd) / max(abs(ana_flat[i]), 1e-8)
            worst = max(worst, rel)
            checked += 1
    return GradCheckResult(max_rel_error=worst, checked=checked, skipped=skipped)


# --- tensor blob files ------------------------------------------------------


def write_blob(path, array) -> None:
    """Write a float64 tensor blob: 16-byte header, u64 dims, little-endian data."""
    arr = np.ascontiguousarray(np.asarray(array, dtype=np.float64))
    header = BLOB_MAGIC + struct.pack("<II", BLOB_VERSION, arr.ndim) + b"\x00\x00\x00\x00"
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    Path(path).write_bytes(header + dims + arr.astype("<f8").tobytes())


def read_blob(path) -> Array:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise CorruptionError(f"{path}: truncated header")
    if raw[:4] != BLOB_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    version, rank = struct.unpack("<II", raw[4:12])
    if version != BLOB_VERSION:
        raise FormatError(f"{path}: unsupported blob version {version}")
    if rank > _MAX_BLOB_RANK:
        raise FormatError(f"{path}: implausible rank {rank}")
    dims_end = 16 + 8 * rank
    if len(raw) < dims_end:
        raise CorruptionError(f"{path}: truncated dims")
    shape = struct.unpack(f"<{rank}Q", raw[16:dims_end]) if rank else ()
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    expected = dims_end + 8 * count
    if len(raw) != expected:
        raise CorruptionError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw[dims_end:], dtype="<f8").astype(np.float64)
    return data.reshape(shape)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()
