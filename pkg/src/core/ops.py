"""
Differentiable wrappers around the tensor primitives.

各演算はnumpy配列またはVarを受け取る。
- 入力にVarが1つでもあれば、結果をそのテープに記録してVarを返す
- すべてnumpy配列なら記録せずnumpy配列を返す

同じコードで通常の順伝播と勾配計算の両方を書けるようにするための層。
"""

from __future__ import annotations

import logging
from typing import Any, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.core import tensor as T
from src.core.autograd import Node, Tape, Var, register_vjp
from src.core.exceptions import GradientError, TensorShapeError

logger = logging.getLogger(__name__)

Operand = Union[np.ndarray, Var, float]


def value_of(x: Operand) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x)


def _tape_of(*items: Any) -> Optional[Tape]:
    for item in items:
        if isinstance(item, Var):
            return item.tape
    return None


def _emit(op: str, inputs: Sequence[Any], value: np.ndarray, **saved: Any):
    tape = _tape_of(*inputs)
    if tape is None:
        return value
    return tape.record(op, inputs, value, saved)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """ブロードキャストで広がった軸を足し戻す。"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _needs(node: Node, index: int) -> bool:
    return node.inputs[index] is not None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: Operand, b: Operand):
    va, vb = value_of(a), value_of(b)
    return _emit("add", (a, b), va + vb, shapes=(va.shape, vb.shape))


@register_vjp("add")
def _add_vjp(g: np.ndarray, node: Node):
    sa, sb = node.saved["shapes"]
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


def sub(a: Operand, b: Operand):
    va, vb = value_of(a), value_of(b)
    return _emit("sub", (a, b), va - vb, shapes=(va.shape, vb.shape))


@register_vjp("sub")
def _sub_vjp(g: np.ndarray, node: Node):
    sa, sb = node.saved["shapes"]
    return _unbroadcast(g, sa), _unbroadcast(-g, sb)


def mul(a: Operand, b: Operand):
    va, vb = value_of(a), value_of(b)
    return _emit("mul", (a, b), va * vb, a=va, b=vb)


@register_vjp("mul")
def _mul_vjp(g: np.ndarray, node: Node):
    va, vb = node.saved["a"], node.saved["b"]
    ga = _unbroadcast(g * vb, va.shape) if _needs(node, 0) else None
    gb = _unbroadcast(g * va, vb.shape) if _needs(node, 1) else None
    return ga, gb


def scale(x: Operand, factor: float):
    vx = value_of(x)
    return _emit("scale", (x,), vx * vx.dtype.type(factor), factor=factor)


@register_vjp("scale")
def _scale_vjp(g: np.ndarray, node: Node):
    return (g * g.dtype.type(node.saved["factor"]),)


def gelu(x: Operand):
    vx = value_of(x)
    return _emit("gelu", (x,), T.gelu(vx), x=vx)


@register_vjp("gelu")
def _gelu_vjp(g: np.ndarray, node: Node):
    return (g * T.gelu_derivative(node.saved["x"]),)


def spow(x: Operand, exponent: float):
    vx = value_of(x)
    return _emit("spow", (x,), T.spow(vx, exponent), x=vx, exponent=exponent)


@register_vjp("spow")
def _spow_vjp(g: np.ndarray, node: Node):
    return (g * T.spow_derivative(node.saved["x"], node.saved["exponent"]),)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(x: Operand, shape: Sequence[int]):
    vx = value_of(x)
    return _emit("reshape", (x,), vx.reshape(tuple(shape)), in_shape=vx.shape)


@register_vjp("reshape")
def _reshape_vjp(g: np.ndarray, node: Node):
    return (g.reshape(node.saved["in_shape"]),)


def transpose(x: Operand, axes: Sequence[int]):
    vx = value_of(x)
    axes = tuple(axes)
    return _emit("transpose", (x,), np.ascontiguousarray(vx.transpose(axes)), axes=axes)


@register_vjp("transpose")
def _transpose_vjp(g: np.ndarray, node: Node):
    return (np.ascontiguousarray(g.transpose(np.argsort(node.saved["axes"]))),)


def take(x: Operand, indices: np.ndarray, axis: int):
    """1次元インデックスによる軸方向の取り出し（重複可）。"""
    vx = value_of(x)
    indices = np.asarray(indices, dtype=np.intp)
    if indices.ndim != 1:
        raise TensorShapeError(f"takeのインデックスは1次元である必要があります: {indices.shape}")
    axis = axis % vx.ndim
    return _emit("take", (x,), np.take(vx, indices, axis=axis), in_shape=vx.shape, indices=indices, axis=axis)


@register_vjp("take")
def _take_vjp(g: np.ndarray, node: Node):
    grad = np.zeros(node.saved["in_shape"], dtype=g.dtype)
    axis = node.saved["axis"]
    np.add.at(grad, (slice(None),) * axis + (node.saved["indices"],), g)
    return (grad,)


def stack(items: Sequence[Operand], axis: int = 0):
    values = [value_of(item) for item in items]
    out = np.stack(values, axis=axis)
    return _emit("stack", tuple(items), out, axis=axis % out.ndim, count=len(values))


@register_vjp("stack")
def _stack_vjp(g: np.ndarray, node: Node):
    axis = node.saved["axis"]
    return tuple(np.take(g, i, axis=axis) for i in range(node.saved["count"]))


# ---------------------------------------------------------------------------
# contractions
# ---------------------------------------------------------------------------

def _parse_subscripts(subscripts: str, count: int) -> Tuple[List[str], str]:
    if "->" not in subscripts or "." in subscripts:
        raise GradientError(f"einsumは明示的な出力指定（'->'）が必要で、省略記号は使えません: {subscripts}")
    lhs, out_spec = subscripts.replace(" ", "").split("->")
    in_specs = lhs.split(",")
    if len(in_specs) != count:
        raise TensorShapeError(f"einsumのオペランド数が一致しません: {subscripts}")
    for spec in in_specs + [out_spec]:
        if len(set(spec)) != len(spec):
            raise GradientError(f"einsumの同一オペランド内の添字重複は未対応です: {subscripts}")
    return in_specs, out_spec


def einsum(subscripts: str, *operands: Operand):
    values = [value_of(op) for op in operands]
    in_specs, out_spec = _parse_subscripts(subscripts, len(values))
    out = np.einsum(subscripts, *values, optimize=True)
    return _emit("einsum", operands, np.asarray(out), in_specs=in_specs, out_spec=out_spec, values=values)


@register_vjp("einsum")
def _einsum_vjp(g: np.ndarray, node: Node):
    in_specs: List[str] = node.saved["in_specs"]
    out_spec: str = node.saved["out_spec"]
    values: List[np.ndarray] = node.saved["values"]
    grads: List[Optional[np.ndarray]] = []
    for k, target in enumerate(in_specs):
        if not _needs(node, k):
            grads.append(None)
            continue
        other_specs = [out_spec] + [spec for j, spec in enumerate(in_specs) if j != k]
        other_values = [g] + [value for j, value in enumerate(values) if j != k]
        available = set("".join(other_specs))
        present = "".join(c for c in target if c in available)
        grad = np.einsum(f"{','.join(other_specs)}->{present}", *other_values, optimize=True)
        if present != target:
            extents = dict(zip(target, values[k].shape))
            grad = grad.reshape([extents[c] if c in present else 1 for c in target])
            grad = np.broadcast_to(grad, values[k].shape).copy()
        grads.append(grad)
    return tuple(grads)


def contract_channel(x: Operand, table: Operand):
    """(B, C, H, W) × (C, G, T) → (B, G, T, H, W)。テープにはeinsumとして記録する。"""
    vx, vt = value_of(x), value_of(table)
    out = T.contract_channel(vx, vt)
    return _emit("einsum", (x, table), out, in_specs=["bchw", "cgt"], out_spec="bgthw", values=[vx, vt])


def unfold(x: Operand, kernel_size: int):
    vx = value_of(x)
    return _emit("unfold", (x,), T.unfold(vx, kernel_size), kernel_size=kernel_size, hw=vx.shape[2:])


@register_vjp("unfold")
def _unfold_vjp(g: np.ndarray, node: Node):
    height, width = node.saved["hw"]
    return (T.fold(g, node.saved["kernel_size"], height, width),)


def conv2d(x: Operand, weight: Operand, groups: int = 1):
    vx, vw = value_of(x), value_of(weight)
    return _emit("conv2d", (x, weight), T.conv2d(vx, vw, groups), x=vx, weight=vw, groups=groups)


@register_vjp("conv2d")
def _conv2d_vjp(g: np.ndarray, node: Node):
    vx: np.ndarray = node.saved["x"]
    vw: np.ndarray = node.saved["weight"]
    groups: int = node.saved["groups"]
    B, c_in, H, W = vx.shape
    c_out, cin_g, K, _ = vw.shape
    cout_g = c_out // groups
    r = K // 2
    gg = g.reshape(B, groups, cout_g, H, W)
    w = vw.reshape(groups, cout_g, cin_g, K, K)
    need_x, need_w = _needs(node, 0), _needs(node, 1)

    grad_x_pad = np.zeros((B, groups, cin_g, H + 2 * r, W + 2 * r), dtype=g.dtype) if need_x else None
    padded = None
    grad_w = np.zeros_like(w) if need_w else None
    if need_w:
        padded = np.pad(vx, ((0, 0), (0, 0), (r, r), (r, r))).reshape(B, groups, cin_g, H + 2 * r, W + 2 * r)
    for ky in range(K):
        for kx in range(K):
            if need_x:
                tap = w[:, :, :, ky, kx]
                if tap.any():
                    grad_x_pad[:, :, :, ky:ky + H, kx:kx + W] += np.einsum("bgohw,goi->bgihw", gg, tap, optimize=True)
            if need_w:
                window = padded[:, :, :, ky:ky + H, kx:kx + W]
                grad_w[:, :, :, ky, kx] = np.einsum("bgohw,bgihw->goi", gg, window, optimize=True)
    grad_x = None
    if need_x:
        grad_x = grad_x_pad[:, :, :, r:r + H, r:r + W].reshape(B, c_in, H, W).copy()
    return grad_x, (grad_w.reshape(vw.shape) if need_w else None)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def softmax(x: Operand, axis: int):
    vx = value_of(x)
    out = T.softmax_over(vx, axis)
    return _emit("softmax", (x,), out, y=out, axis=axis)


@register_vjp("softmax")
def _softmax_vjp(g: np.ndarray, node: Node):
    y, axis = node.saved["y"], node.saved["axis"]
    return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)


def filter_normalize(x: Operand, axis: int = 2, eps: float = T.DEFAULT_FILTER_NORM_EPS):
    vx = value_of(x)
    out = T.filter_normalize(vx, axis=axis, eps=eps)
    return _emit("filter_normalize", (x,), out, x=vx, axis=axis, eps=eps)


@register_vjp("filter_normalize")
def _filter_normalize_vjp(g: np.ndarray, node: Node):
    vx, axis, eps = node.saved["x"], node.saved["axis"], node.saved["eps"]
    n = vx.shape[axis]
    if n < 2:
        return (np.zeros_like(vx),)
    centered = vx - np.mean(vx, axis=axis, keepdims=True)
    std = np.sqrt(np.mean(centered * centered, axis=axis, keepdims=True))
    denom = std + eps
    safe_denom = np.where(denom > 0, denom, 1.0)
    safe_std = np.where(std > 0, std, 1.0)
    direct = (g - np.mean(g, axis=axis, keepdims=True)) / safe_denom
    through_std = centered * np.sum(g * centered, axis=axis, keepdims=True) / (safe_denom ** 2 * n * safe_std)
    grad = np.where(std > 0, direct - through_std, np.where(denom > 0, direct, 0.0))
    return (grad.astype(vx.dtype, copy=False),)


def layer_norm(x: Operand, weight: Operand, bias: Operand, axis: int = 1, eps: float = 1e-5):
    vx, vw, vb = value_of(x), value_of(weight), value_of(bias)
    mean = np.mean(vx, axis=axis, keepdims=True)
    inv_std = 1.0 / np.sqrt(np.mean((vx - mean) ** 2, axis=axis, keepdims=True) + eps)
    normed = (vx - mean) * inv_std
    shape = [1] * vx.ndim
    shape[axis] = vx.shape[axis]
    out = normed * vw.reshape(shape) + vb.reshape(shape)
    return _emit("layer_norm", (x, weight, bias), out, normed=normed, inv_std=inv_std, weight=vw, axis=axis % vx.ndim)


@register_vjp("layer_norm")
def _layer_norm_vjp(g: np.ndarray, node: Node):
    normed, inv_std, vw, axis = (node.saved[key] for key in ("normed", "inv_std", "weight", "axis"))
    reduce_axes = tuple(i for i in range(g.ndim) if i != axis)
    shape = [1] * g.ndim
    shape[axis] = g.shape[axis]
    grad_w = np.sum(g * normed, axis=reduce_axes)
    grad_b = np.sum(g, axis=reduce_axes)
    g_normed = g * vw.reshape(shape)
    grad_x = inv_std * (
        g_normed
        - np.mean(g_normed, axis=axis, keepdims=True)
        - normed * np.mean(g_normed * normed, axis=axis, keepdims=True)
    )
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# reductions and losses
# ---------------------------------------------------------------------------

def _reduction_axes(ndim: int, axis) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Operand, axis=None, keepdims: bool = False):  # noqa: A001
    vx = value_of(x)
    axes = _reduction_axes(vx.ndim, axis)
    out = np.sum(vx, axis=axes, keepdims=keepdims)
    return _emit("sum", (x,), np.asarray(out), in_shape=vx.shape, axes=axes, keepdims=keepdims)


@register_vjp("sum")
def _sum_vjp(g: np.ndarray, node: Node):
    in_shape, axes = node.saved["in_shape"], node.saved["axes"]
    if not node.saved["keepdims"]:
        g = np.expand_dims(g, axes)
    return (np.broadcast_to(g, in_shape).copy(),)


def mean(x: Operand, axis=None, keepdims: bool = False):
    vx = value_of(x)
    axes = _reduction_axes(vx.ndim, axis)
    out = np.mean(vx, axis=axes, keepdims=keepdims)
    count = int(np.prod([vx.shape[a] for a in axes]))
    return _emit("mean", (x,), np.asarray(out), in_shape=vx.shape, axes=axes, keepdims=keepdims, count=count)


@register_vjp("mean")
def _mean_vjp(g: np.ndarray, node: Node):
    in_shape, axes = node.saved["in_shape"], node.saved["axes"]
    if not node.saved["keepdims"]:
        g = np.expand_dims(g, axes)
    return (np.broadcast_to(g / node.saved["count"], in_shape).copy(),)


def cross_entropy(logits: Operand, labels: np.ndarray):
    """クラス軸1のロジット (B, N) と整数ラベル (B,) に対するバッチ平均交差エントロピー。"""
    vl = value_of(logits)
    labels = np.asarray(labels, dtype=np.intp)
    if vl.ndim != 2 or labels.shape != (vl.shape[0],):
        raise TensorShapeError(f"cross_entropyの形状が不正です: logits {vl.shape}, labels {labels.shape}")
    log_probs = T.log_softmax(vl, axis=1)
    loss = -np.mean(log_probs[np.arange(vl.shape[0]), labels])
    return _emit("cross_entropy", (logits,), np.asarray(loss, dtype=vl.dtype), probs=np.exp(log_probs), labels=labels)


@register_vjp("cross_entropy")
def _cross_entropy_vjp(g: np.ndarray, node: Node):
    probs, labels = node.saved["probs"], node.saved["labels"]
    grad = probs.copy()
    grad[np.arange(probs.shape[0]), labels] -= 1.0
    return (grad * (g / probs.shape[0]),)
