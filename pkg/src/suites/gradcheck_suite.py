"""
Default gradient-check suite.

各ケースはスカラー関数とパラメータの組で、fd_check に渡して解析勾配と中心差分を比較する。
出力テンソルは固定の乱数重みとの内積でスカラーにする（単純な和だと softmax の勾配が0になる）。
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from src.core import elsa, ops, paradigm
from src.core.autograd import registered_ops
from src.core.gradcheck import GradReport, fd_check, near_zero_mask
from src.utils.config import RunConfig
from src.utils.rng import normal, stream

logger = logging.getLogger(__name__)

F64_TOLERANCE = 1e-6
F32_TOLERANCE = 1e-4


@dataclass
class GradCase:
    name: str
    fn: Callable[[Dict[str, object]], object]
    params: Dict[str, np.ndarray]
    tolerance: float = F64_TOLERANCE
    analytic_dtype: type = np.float64
    skip: Dict[str, np.ndarray] = field(default_factory=dict)
    covers: Tuple[str, ...] = ()


@dataclass
class GradSuiteResult:
    reports: List[Tuple[GradCase, GradReport]] = field(default_factory=list)

    @property
    def failures(self) -> List[str]:
        return [case.name for case, report in self.reports if not report.passed(case.tolerance)]

    @property
    def passed(self) -> bool:
        return not self.failures

    def rows(self) -> List[Dict[str, object]]:
        rows = []
        for case, report in self.reports:
            for entry in report.entries:
                rows.append({
                    "case": case.name,
                    "parameter": entry.parameter,
                    "max_rel_err": entry.max_rel_err,
                    "max_abs_err": entry.max_abs_err,
                    "skipped": entry.skipped,
                    "tolerance": case.tolerance,
                    "status": "pass" if entry.max_rel_err <= case.tolerance else "fail",
                })
        return rows


def _weighted(out, weights: np.ndarray):
    return ops.sum(ops.mul(out, weights.astype(ops.value_of(out).dtype)))


# ---------------------------------------------------------------------------
# primitive cases
# ---------------------------------------------------------------------------

def primitive_cases(rng: np.random.Generator) -> List[GradCase]:
    x4 = normal(rng, (1, 2, 4, 4))
    w_out = normal(rng, (1, 2, 4, 4))

    def case(name: str, fn, params: Dict[str, np.ndarray], covers: Tuple[str, ...]) -> GradCase:
        return GradCase(name=f"op.{name}", fn=fn, params=params, covers=covers)

    a, b = normal(rng, (3, 4)), normal(rng, (4,))
    w34 = normal(rng, (3, 4))
    w234 = normal(rng, (2, 3, 4))
    w_cols = normal(rng, (1, 2, 9, 16))
    cases = [
        case("add_sub", lambda p: _weighted(ops.sub(ops.add(p["a"], p["b"]), ops.scale(p["b"], 0.5)), w34),
             {"a": a, "b": b}, ("add", "sub", "scale")),
        case("mul", lambda p: _weighted(ops.mul(p["a"], p["b"]), w34), {"a": a.copy(), "b": b.copy()}, ("mul",)),
        case("gelu", lambda p: _weighted(ops.gelu(p["x"]), w34), {"x": normal(rng, (3, 4))}, ("gelu",)),
        case("spow", lambda p: _weighted(ops.spow(p["x"], 1.5), w34),
             {"x": normal(rng, (3, 4)) + 2.0}, ("spow",)),
        case("reshape_transpose", lambda p: _weighted(ops.transpose(ops.reshape(p["x"], (4, 3)), (1, 0)), w34),
             {"x": normal(rng, (2, 6))}, ("reshape", "transpose")),
        case("take_stack",
             lambda p: _weighted(ops.stack([ops.take(p["x"], np.array([0, 2, 2, 1]), axis=1), p["y"]], axis=0), w234),
             {"x": normal(rng, (3, 3)), "y": normal(rng, (3, 4))}, ("take", "stack")),
        case("einsum", lambda p: _weighted(ops.einsum("ij,jk->ik", p["a"], p["b"]), w34),
             {"a": normal(rng, (3, 5)), "b": normal(rng, (5, 4))}, ("einsum",)),
        case("unfold", lambda p: _weighted(ops.unfold(p["x"], 3), w_cols),
             {"x": x4.copy()}, ("unfold",)),
        case("conv2d", lambda p: _weighted(ops.conv2d(p["x"], p["w"], groups=2), w_out),
             {"x": x4.copy(), "w": normal(rng, (2, 1, 3, 3))}, ("conv2d",)),
        case("softmax", lambda p: _weighted(ops.softmax(p["x"], axis=1), w34), {"x": normal(rng, (3, 4))}, ("softmax",)),
        case("filter_normalize", lambda p: _weighted(ops.filter_normalize(p["x"], axis=1), w34),
             {"x": normal(rng, (3, 4))}, ("filter_normalize",)),
        case("layer_norm", lambda p: _weighted(ops.layer_norm(p["x"], p["w"], p["b"], axis=1), w_out),
             {"x": x4.copy(), "w": normal(rng, (2,)), "b": normal(rng, (2,))}, ("layer_norm",)),
        case("mean_sum", lambda p: ops.sum(ops.mean(ops.mul(p["x"], p["x"]), axis=1)),
             {"x": normal(rng, (3, 4))}, ("mean", "sum")),
        case("cross_entropy", lambda p: ops.cross_entropy(p["logits"], np.array([0, 3, 1])),
             {"logits": normal(rng, (3, 4))}, ("cross_entropy",)),
    ]
    return cases


# ---------------------------------------------------------------------------
# paradigm / elsa cases
# ---------------------------------------------------------------------------

def _preset_size(name: str, height: int, kernel_size: int) -> int:
    if paradigm.PRESETS[name].mode is paradigm.ApplicationMode.WINDOW:
        return 2 if height % 2 == 0 else 1
    return kernel_size


def preset_cases(rng: np.random.Generator, shape: Tuple[int, int, int, int], kernel_size: int, heads: int) -> List[GradCase]:
    B, C, H, W = shape
    cases = []
    weights = normal(rng, shape)
    for name in paradigm.preset_names():
        cfg = paradigm.preset(name, channels=C, heads=heads, size=_preset_size(name, H, kernel_size))
        tables = paradigm.init_tables(cfg, rng)
        params = {"q": normal(rng, shape), "k": normal(rng, shape), "v": normal(rng, shape)}
        params.update({name_: normal(rng, value.shape) for name_, value in tables.as_params().items()})

        def fn(p, cfg=cfg):
            tables_ = paradigm.RelPosTables(r_k=p.get("r_k"), r_q=p.get("r_q"), r_b=p.get("r_b"))
            return _weighted(paradigm.unified_forward(p["q"], p["k"], p["v"], tables_, cfg), weights)

        cases.append(GradCase(name=f"paradigm.{name}", fn=fn, params=params))

    Wd = 2 if H % 2 == 0 and W % 2 == 0 else 1
    lsa_params = {
        "q": normal(rng, shape), "k": normal(rng, shape), "v": normal(rng, shape),
        "bias": normal(rng, (heads, (2 * Wd - 1) ** 2)),
    }
    cases.append(GradCase(
        name="paradigm.lsa_forward",
        fn=lambda p: _weighted(paradigm.lsa_forward(p["q"], p["k"], p["v"], p["bias"], Wd, (C // heads) ** -0.5), weights),
        params=lsa_params,
    ))
    cases.append(GradCase(
        name="paradigm.dwconv_forward",
        fn=lambda p: _weighted(paradigm.dwconv_forward(p["x"], p["w"]), weights),
        params={"x": normal(rng, shape), "w": normal(rng, (C, kernel_size, kernel_size))},
    ))
    return cases


def _elsa_params(rng: np.random.Generator, C: int, G: int, K: int, grouped: bool = False, **kwargs) -> elsa.ElsaParams:
    params = elsa.init_elsa_params(C, G, K, rng, grouped=grouped, **kwargs)
    return params.with_params({
        "proj_q": normal(rng, (C, C), std=0.5),
        "proj_k": normal(rng, (C, C), std=0.5),
        "r_k_h": normal(rng, params.r_k_h.shape),
        "r_q_h": normal(rng, params.r_q_h.shape),
        "r_b_h": normal(rng, params.r_b_h.shape),
    })


def elsa_cases(rng: np.random.Generator, shape: Tuple[int, int, int, int], kernel_size: int, heads: int) -> List[GradCase]:
    B, C, H, W = shape
    K, G = kernel_size, heads
    taps = K * K
    cases = []
    attn_weights = normal(rng, (B, G, taps, H, W))
    for variant in elsa.Variant:
        for grouped in (False, True):
            base = _elsa_params(rng, C, G, K, grouped=grouped, ghost=False)
            params = {"q": normal(rng, shape), "k": normal(rng, shape),
                      "r_k_h": base.r_k_h, "r_q_h": base.r_q_h, "r_b_h": base.r_b_h}

            def fn(p, base=base, variant=variant):
                block = base.with_params({name: p[name] for name in ("r_k_h", "r_q_h", "r_b_h")})
                return _weighted(elsa.hadamard_attention(p["q"], p["k"], block, variant).values, attn_weights)

            layout = "grouped" if grouped else "full"
            cases.append(GradCase(name=f"elsa.hadamard.{variant.value}.{layout}", fn=fn, params=params))

    ghost_weights = normal(rng, (B, C, taps, H, W))
    h = np.abs(normal(rng, (B, G, taps, H, W)))
    for lam in (2.0, 0.5):
        raw = normal(rng, (C, K, K))
        O = np.sign(raw) * (0.5 + np.abs(raw))
        skip = {}
        if lam < 1:
            # 微分不能点 0 とその近傍を含め、スキップされることを確認する
            O.reshape(-1)[:2] = (0.0, 5e-4)
            skip = {"O": near_zero_mask(O)}
        params = {"h": h.copy(), "O": O, "S": normal(rng, (C, K, K))}

        def fn(p, lam=lam):
            return _weighted(elsa.ghost_head(p["h"], elsa.GhostHeadParams(O=p["O"], S=p["S"]), lam=lam, gamma=0.7), ghost_weights)

        cases.append(GradCase(name=f"elsa.ghost_head.lambda={lam}", fn=fn, params=params, skip=skip))

    block = _elsa_params(rng, C, G, K)
    block_params = dict(block.as_params())
    block_params["x"] = normal(rng, shape)
    out_weights = normal(rng, shape)

    def block_fn(p, variant=elsa.Variant.MERGED_CONV):
        params = block.with_params({name: value for name, value in p.items() if name != "x"})
        return _weighted(elsa.elsa_forward(p["x"], params, variant), out_weights)

    cases.append(GradCase(name="elsa.block", fn=block_fn, params=block_params))
    cases.append(GradCase(
        name="elsa.block.f32",
        fn=block_fn,
        params={name: value.copy() for name, value in block_params.items()},
        tolerance=F32_TOLERANCE,
        analytic_dtype=np.float32,
    ))

    N, D, G2 = 4, 4, 2
    tokens = {"q": normal(rng, (1, N, D)), "k": normal(rng, (1, N, D)), "v": normal(rng, (1, N, D)),
              "O": normal(rng, (2 * G2, N)) + 3.0, "S": normal(rng, (2 * G2, N))}
    token_weights = normal(rng, (1, N, D))
    cases.append(GradCase(
        name="elsa.global_ghost_attention",
        fn=lambda p: _weighted(elsa.global_ghost_attention(p["q"], p["k"], p["v"], G2, p["O"], p["S"]), token_weights),
        params=tokens,
    ))
    return cases


def default_cases(cfg: RunConfig) -> List[GradCase]:
    shape = cfg.shape_tuples[0] if cfg.shapes else (1, 4, 4, 4)
    kernel_size = cfg.kernel_sizes[0] if cfg.kernel_sizes else 3
    heads = cfg.heads[0] if cfg.heads else 2
    rng = stream(cfg.seed, "gradcheck.cases")
    cases = primitive_cases(rng) + preset_cases(rng, shape, kernel_size, heads) + elsa_cases(rng, shape, kernel_size, heads)
    if cfg.tolerance is not None:
        for case in cases:
            case.tolerance = cfg.tolerance
    return cases


def uncovered_ops(cases: List[GradCase]) -> List[str]:
    """プリミティブケースで直接検証されていない登録済み演算。"""
    covered = {op for case in cases for op in case.covers}
    return [op for op in registered_ops() if op not in covered]


def run_gradcheck(cfg: RunConfig, cases: Optional[List[GradCase]] = None) -> GradSuiteResult:
    """
    gradcheckコマンドの本体。

    Args:
        cfg: RunConfig（shapes, kernel_sizes, heads, seed, tolerance）
        cases: 省略時は default_cases(cfg)
    """
    cases = cases if cases is not None else default_cases(cfg)
    missing = uncovered_ops(cases)
    if missing and cases and any(case.covers for case in cases):
        logger.warning(f"プリミティブケースが無い演算: {', '.join(missing)}")
    result = GradSuiteResult()
    for case in cases:
        logger.debug(f"勾配チェック: {case.name}")
        report = fd_check(case.fn, case.params, analytic_dtype=case.analytic_dtype, skip=case.skip, label=case.name)
        if report.skipped:
            logger.warning(f"{case.name}: 微分不能点の近傍 {report.skipped} 要素を比較から除外しました")
        result.reports.append((case, report))
    for name in result.failures:
        logger.warning(f"勾配チェック失敗: {name}")
    return result
