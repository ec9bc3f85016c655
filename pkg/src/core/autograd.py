"""
Reverse-mode differentiation engine.

This module provides:
- Var: テープに記録された値への参照
- Tape: 実行した微分可能演算の記録（トポロジカル順）
- vjp登録デコレータと backward()

演算本体（add, einsum, softmax など）は src.core.ops に定義され、
import時にそれぞれのvjpをここへ登録する。
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from src.core.exceptions import GradientError, MissingVJPError, SeedShapeError, TapeCycleError

logger = logging.getLogger(__name__)

VJPFunction = Callable[[np.ndarray, "Node"], Sequence[Optional[np.ndarray]]]

_VJP_REGISTRY: Dict[str, VJPFunction] = {}


def register_vjp(op: str) -> Callable[[VJPFunction], VJPFunction]:
    """演算名にvjpを登録するデコレータ。"""

    def decorator(fn: VJPFunction) -> VJPFunction:
        if op in _VJP_REGISTRY:
            raise GradientError(f"vjpが二重登録されています: {op}")
        _VJP_REGISTRY[op] = fn
        return fn

    return decorator


def registered_ops() -> Tuple[str, ...]:
    return tuple(sorted(_VJP_REGISTRY))


class Var:
    """テープ上の値。numpy配列を保持し、演算子オーバーロードでopsを呼ぶ。"""

    __slots__ = ("value", "tape", "id", "name")

    def __init__(self, value: np.ndarray, tape: "Tape", node_id: int, name: Optional[str] = None) -> None:
        self.value = value
        self.tape = tape
        self.id = node_id
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self) -> np.dtype:
        return self.value.dtype

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Var(id={self.id}{label}, shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        from src.core import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from src.core import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from src.core import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from src.core import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from src.core import ops
        if np.isscalar(other):
            return ops.scale(self, float(other))
        return ops.mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        from src.core import ops
        return ops.scale(self, -1.0)


@dataclass
class Node:
    """テープ上の1演算。inputsは入力Varのid（定数入力はNone）。"""

    op: str
    inputs: Tuple[Optional[int], ...]
    output: int
    out_shape: Tuple[int, ...]
    saved: Dict[str, Any] = field(default_factory=dict)


class Tape:
    """実行した演算を記録順に保持する。"""

    def __init__(self) -> None:
        self.nodes: List[Node] = []
        self.leaves: Dict[str, Var] = {}
        self._next_id = 0

    def _allocate(self) -> int:
        node_id = self._next_id
        self._next_id += 1
        return node_id

    def leaf(self, name: str, value: np.ndarray) -> Var:
        """パラメータ（勾配を求める葉）を登録する。"""
        if name in self.leaves:
            raise GradientError(f"葉の名前が重複しています: {name}")
        var = Var(np.asarray(value), self, self._allocate(), name=name)
        self.leaves[name] = var
        return var

    def leaves_from(self, params: Mapping[str, np.ndarray]) -> Dict[str, Var]:
        return {name: self.leaf(name, value) for name, value in params.items()}

    def record(self, op: str, inputs: Sequence[Any], value: np.ndarray, saved: Optional[Dict[str, Any]] = None) -> Var:
        """演算を記録し、出力Varを返す。Var以外の入力は定数として扱う。"""
        ids: List[Optional[int]] = []
        for item in inputs:
            if isinstance(item, Var):
                if item.tape is not self:
                    raise GradientError(f"{op}: 別のテープのVarが混在しています")
                ids.append(item.id)
            else:
                ids.append(None)
        out = Var(value, self, self._allocate())
        self.nodes.append(Node(op=op, inputs=tuple(ids), output=out.id, out_shape=out.shape, saved=saved or {}))
        return out

    def __len__(self) -> int:
        return len(self.nodes)


def backward(tape: Tape, seed: np.ndarray, output: Optional[Var] = None) -> Dict[str, np.ndarray]:
    """
    テープを逆順にたどり、すべての葉に対する勾配を求める。

    Args:
        tape: 記録済みのテープ
        seed: 出力に対する上流勾配（出力と同じ形状）
        output: 微分対象の出力（省略時は最後に記録された演算の出力）

    Returns:
        葉の名前 → 勾配。グラフで使われない葉はゼロテンソル

    Raises:
        SeedShapeError: seedの形状が出力と一致しない場合
        TapeCycleError: 入力が消費側より後に記録されている場合
        MissingVJPError: vjp未登録の演算がある場合
    """
    if output is None:
        if not tape.nodes:
            raise GradientError("テープに演算が記録されていません")
        output_id = tape.nodes[-1].output
        output_shape = None
    else:
        if output.tape is not tape:
            raise GradientError("出力が指定したテープに属していません")
        output_id = output.id
        output_shape = output.shape

    seed = np.asarray(seed)
    if output_shape is None:
        output_shape = _output_shape(tape, output_id)
    if seed.shape != tuple(output_shape):
        raise SeedShapeError(f"seedの形状 {seed.shape} が出力 {tuple(output_shape)} と一致しません")

    grads: Dict[int, np.ndarray] = {output_id: seed}
    for node in reversed(tape.nodes):
        if node.output > output_id:
            continue
        for input_id in node.inputs:
            if input_id is not None and input_id >= node.output:
                raise TapeCycleError(f"{node.op}: 入力 {input_id} が出力 {node.output} より後に記録されています")
        upstream = grads.pop(node.output, None)
        if upstream is None:
            continue
        vjp = _VJP_REGISTRY.get(node.op)
        if vjp is None:
            raise MissingVJPError(f"vjpが登録されていない演算です: {node.op}")
        input_grads = vjp(upstream, node)
        for input_id, grad in zip(node.inputs, input_grads):
            if input_id is None or grad is None:
                continue
            if input_id in grads:
                grads[input_id] = grads[input_id] + grad
            else:
                grads[input_id] = grad

    result: Dict[str, np.ndarray] = {}
    for name, leaf in tape.leaves.items():
        grad = grads.get(leaf.id)
        if grad is None:
            result[name] = np.zeros_like(leaf.value)
        else:
            result[name] = np.asarray(grad, dtype=leaf.value.dtype).reshape(leaf.shape)
    return result


def _output_shape(tape: Tape, output_id: int) -> Tuple[int, ...]:
    for node in reversed(tape.nodes):
        if node.output == output_id:
            return node.out_shape
    raise GradientError(f"出力 {output_id} がテープに見つかりません")


def value_and_grad(
    fn: Callable[[Dict[str, Var]], Var],
    params: Mapping[str, np.ndarray],
) -> Tuple[float, Dict[str, np.ndarray]]:
    """スカラー関数fnの値と、paramsの各要素に対する勾配を返す。"""
    tape = Tape()
    leaves = tape.leaves_from(params)
    out = fn(leaves)
    if not isinstance(out, Var):
        raise GradientError("fnはテープ上のVarを返す必要があります")
    if out.value.size != 1:
        raise SeedShapeError(f"value_and_gradはスカラー出力のみ対応しています: {out.shape}")
    grads = backward(tape, np.ones_like(out.value), output=out)
    return float(out.value.reshape(())), grads
