"""Integer-domain GEMM between ternary weights and 8-bit activations.

The weight is stored transposed (out_features x in_features) so that row
scales fold into a per-output-column pass.  For activation codes c with
value c*s + x_min (min-max) or c*s (symmetric) and weight signs b with
value alpha*b, the product column j decomposes as

    out[:, j] = s * alpha_j * (C @ B^T)[:, j] + x_min * alpha_j * colsum_j

where the matmul runs entirely in 32-bit integers and colsum_j is the
precomputed sign sum of weight row j.  A plan guards the accumulator:
k * 255 must fit in int32.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import actquant
from .actquant import QuantizedActivation
from .packed import PackedTernaryBlob, unpack
from .ternarize import TernaryTensor, dequantize

INT32_MAX = 2**31 - 1


class PlanError(ValueError):
    """The requested GEMM cannot be accumulated safely in 32 bits."""


@dataclass
class GemmPlan:
    m: int
    n: int
    k: int
    act_scheme: str = "minmax8"
    w_granularity: str = "layer"
    acc_bits: int = 32

    def __post_init__(self):
        if self.acc_bits != 32:
            raise PlanError("only 32-bit accumulation is supported")
        peak = 255 if self.act_scheme == "minmax8" else 127
        if self.k * peak > INT32_MAX:
            raise PlanError(f"k={self.k} overflows int32 accumulation")
        if min(self.m, self.n, self.k) < 0:
            raise PlanError("negative dimension")


def _weight_parts(w) -> tuple[np.ndarray, np.ndarray, str]:
    if isinstance(w, PackedTernaryBlob):
        w = unpack(w)
    if not isinstance(w, TernaryTensor) or w.max_level != 1:
        raise ValueError("ternary_gemm needs a ternary weight")
    return w.codes, w.scales, w.granularity


def ternary_gemm(act: QuantizedActivation, w, plan: GemmPlan | None = None) -> np.ndarray:
    """act (m x k) codes times stored-transposed ternary weight (n x k)."""
    signs, scales, gran = _weight_parts(w)
    m, k = act.codes.shape
    n, k2 = signs.shape
    if k != k2:
        raise ValueError(f"inner dimensions differ: act k={k}, weight k={k2}")
    if plan is None:
        plan = GemmPlan(m=m, n=n, k=k, act_scheme=act.params.scheme,
                        w_granularity=gran)

    c = act.codes.astype(np.int32)
    b_t = signs.astype(np.int32).T                      # (k, n)
    acc = c @ b_t                                       # int32 accumulation
    alpha = (np.full(n, scales[0], dtype=np.float64) if gran == "layer"
             else scales.astype(np.float64))
    s = act.params.scale
    out64 = acc.astype(np.float64) * (s * alpha)
    if act.params.scheme == "minmax8":
        colsum = signs.astype(np.int32).sum(axis=1)     # per output column
        out64 = out64 + act.params.x_min * alpha * colsum.astype(np.float64)
    return out64.astype(np.float32)


def float_reference(act: QuantizedActivation, w) -> np.ndarray:
    """Dequantize both operands and multiply in floating point."""
    signs, scales, gran = _weight_parts(w)
    t = TernaryTensor(codes=signs, scales=scales, granularity=gran)
    a = actquant.dequantize(act).astype(np.float64)
    wd = dequantize(t).astype(np.float64)
    return (a @ wd.T).astype(np.float32)


@dataclass
class BenchRecord:
    m: int
    n: int
    k: int
    repetitions: int
    ternary_ns_per_op: float
    float_ns_per_op: float
    bytes_touched: int

    def to_dict(self) -> dict:
        return {"kind": "gemm_bench", "m": self.m, "n": self.n, "k": self.k,
                "repetitions": self.repetitions,
                "ternary_ns_per_op": self.ternary_ns_per_op,
                "float_ns_per_op": self.float_ns_per_op,
                "bytes_touched": self.bytes_touched}


def traffic_bytes(plan: GemmPlan) -> int:
    """Analytic memory-traffic estimate: codes + activations + output."""
    weight_bytes = (plan.n * plan.k + 3) // 4      # 2-bit packed
    act_bytes = plan.m * plan.k                    # one byte per code
    out_bytes = plan.m * plan.n * 4
    return weight_bytes + act_bytes + out_bytes


def bench_gemm(plan: GemmPlan, repetitions: int,
               rng: np.random.Generator | None = None) -> BenchRecord:
    """Time the integer path against the float path; informational only."""
    if repetitions <= 0:
        return BenchRecord(plan.m, plan.n, plan.k, 0, 0.0, 0.0, 0)
    rng = rng or np.random.default_rng(0)
    x = rng.standard_normal((plan.m, plan.k)).astype(np.float32)
    act = actquant.quantize(x, plan.act_scheme)
    from .ternarize import twn_approx
    w = twn_approx(rng.standard_normal((plan.n, plan.k)).astype(np.float32),
                   plan.w_granularity)

    t0 = time.perf_counter_ns()
    for _ in range(repetitions):
        ternary_gemm(act, w, plan)
    t1 = time.perf_counter_ns()
    xd = actquant.dequantize(act)
    wd = dequantize(w)
    t2 = time.perf_counter_ns()
    for _ in range(repetitions):
        np.matmul(xd, wd.T)
    t3 = time.perf_counter_ns()
    return BenchRecord(plan.m, plan.n, plan.k, repetitions,
                       (t1 - t0) / repetitions, (t3 - t2) / repetitions,
                       traffic_bytes(plan))
