"""Desk-scale BERT-style encoder with pluggable quantization.

The forward pass follows the standard pre-LN-free encoder:

    A_h   = (H W_h^Q)(H W_h^K)^T           (raw scores, traced per head)
    head  = Softmax(A_h / sqrt(d)) H W_h^V
    X     = LN(H + Concat(heads) W^O)
    H'    = LN(X + GeLU(X W^1 + b^1) W^2 + b^2)

with the score normalization 1/sqrt(d) by default (a config switch selects
the conventional 1/sqrt(d_head)).  Under a quantization plan, the six
transformer weight matrices and the word embedding are replaced by
dequantized low-bit codes, and the inputs of every linear layer plus both
operands of the two attention matmuls pass through 8-bit fake
quantization.  Softmax, layer norm, biases, segment/position embeddings
and the task head stay in full precision.

Weight matrices are stored transposed, (out_features, in_features), so
row granularity means one scale per output feature, and the word
embedding keeps one scale per vocabulary row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import actquant, ternarize
from . import tensor as T
from .packed import SavedTensor
from .tensor import ShapeError, Tensor

WEIGHT_BITS = (2, 3, 8, 32)
ACT_BITS = (8, 32)
TERNARY_METHODS = ("twn_approx", "twn_exact", "lat_exact", "lat_approx")


@dataclass(frozen=True)
class ModelConfig:
    layers: int
    hidden: int
    heads: int
    ffn: int
    vocab: int
    segments: int = 2
    max_positions: int = 64
    classes: int = 2
    dropout: float = 0.1
    attn_scale: str = "sqrt_d"      # paper form; "sqrt_dh" for the usual variant

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ValueError("hidden size must be divisible by head count")
        for f in ("layers", "hidden", "heads", "ffn", "vocab", "segments",
                  "max_positions", "classes"):
            if getattr(self, f) < 0 or (f not in ("layers",) and getattr(self, f) == 0):
                raise ValueError(f"{f} must be positive")
        if self.attn_scale not in ("sqrt_d", "sqrt_dh"):
            raise ValueError("attn_scale must be sqrt_d or sqrt_dh")

    @property
    def d_head(self) -> int:
        return self.hidden // self.heads

    def to_dict(self) -> dict:
        return {"layers": self.layers, "hidden": self.hidden, "heads": self.heads,
                "ffn": self.ffn, "vocab": self.vocab, "segments": self.segments,
                "max_positions": self.max_positions, "classes": self.classes,
                "dropout": self.dropout, "attn_scale": self.attn_scale}

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


def bert_base_config(classes: int = 2) -> ModelConfig:
    return ModelConfig(layers=12, hidden=768, heads=12, ffn=3072, vocab=30522,
                       segments=2, max_positions=512, classes=classes)


def _method_for_bits(bits: int, requested: str) -> str:
    if bits == 32:
        return "none"
    if bits == 8:
        return "int8_sym"
    if bits == 3:
        return "laq3"
    if requested not in TERNARY_METHODS:
        raise ValueError(f"2-bit weights need a ternary method, got {requested!r}")
    return requested


@dataclass
class QuantPlan:
    """A W-E-A bit plan plus method/granularity choices."""

    w_bits: int = 2
    e_bits: int = 2
    a_bits: int = 8
    w_method: str = "twn_approx"
    e_method: str = "twn_approx"
    w_gran: str = "layer"
    e_gran: str = "row"
    act_scheme: str = "minmax8"
    lat_iters: int = 3
    v_floor: float = 1e-12

    def __post_init__(self):
        if self.w_bits not in WEIGHT_BITS or self.e_bits not in WEIGHT_BITS:
            raise ValueError(f"weight/embedding bits must be in {WEIGHT_BITS}")
        if self.a_bits not in ACT_BITS:
            raise ValueError(f"activation bits must be in {ACT_BITS}")
        if self.act_scheme not in actquant.SCHEMES:
            raise ValueError(f"unknown activation scheme {self.act_scheme!r}")
        self.w_method = _method_for_bits(self.w_bits, self.w_method)
        self.e_method = _method_for_bits(self.e_bits, self.e_method)
        for bits, gran, what in ((self.w_bits, self.w_gran, "weights"),
                                 (self.e_bits, self.e_gran, "embedding")):
            if gran not in ternarize.GRANULARITIES:
                raise ValueError(f"unknown granularity {gran!r}")
            if bits == 8 and gran != "layer":
                raise ValueError(f"8-bit {what} use layer-wise scaling only")

    @property
    def notation(self) -> str:
        return f"{self.w_bits}-{self.e_bits}-{self.a_bits}"

    @property
    def quantizes_weights(self) -> bool:
        return self.w_bits < 32

    @property
    def quantizes_embedding(self) -> bool:
        return self.e_bits < 32

    @property
    def quantizes_activations(self) -> bool:
        return self.a_bits < 32

    @property
    def is_noop(self) -> bool:
        return not (self.quantizes_weights or self.quantizes_embedding
                    or self.quantizes_activations)

    def needs_second_moment(self) -> bool:
        return any(m in ("lat_exact", "lat_approx", "laq3")
                   for m in (self.w_method, self.e_method))

    def to_dict(self) -> dict:
        return {"w_bits": self.w_bits, "e_bits": self.e_bits, "a_bits": self.a_bits,
                "w_method": self.w_method, "e_method": self.e_method,
                "w_gran": self.w_gran, "e_gran": self.e_gran,
                "act_scheme": self.act_scheme, "lat_iters": self.lat_iters,
                "v_floor": self.v_floor}

    @staticmethod
    def from_dict(d: dict) -> "QuantPlan":
        return QuantPlan(**d)


METHOD_ALIASES = {"twn": "twn_approx", "twn-exact": "twn_exact",
                  "lat": "lat_approx", "lat-exact": "lat_exact", "laq3": "laq3"}


def plan_from_notation(notation: str, method: str = "twn",
                       w_gran: str = "layer", e_gran: str = "row",
                       act: str = "minmax") -> QuantPlan:
    """Parse a Table-1 style ``W-E-A`` triple like ``2-2-8``."""
    parts = notation.split("-")
    if len(parts) != 3:
        raise ValueError(f"plan must look like W-E-A, got {notation!r}")
    try:
        w, e, a = (int(p) for p in parts)
    except ValueError as exc:
        raise ValueError(f"plan bits must be integers, got {notation!r}") from exc
    resolved = METHOD_ALIASES.get(method, method)
    scheme = {"minmax": "minmax8", "sym": "symmetric8"}.get(act, act)
    base = "twn_approx" if resolved == "laq3" else resolved
    return QuantPlan(w_bits=w, e_bits=e, a_bits=a,
                     w_method=base, e_method=base,
                     w_gran=w_gran, e_gran=e_gran, act_scheme=scheme)


NOOP_PLAN = QuantPlan(w_bits=32, e_bits=32, a_bits=32)


# ---------------------------------------------------------------------------
# parameters


def layer_prefix(i: int) -> str:
    return f"layer{i}"


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, dff = config.hidden, config.ffn
    shapes: dict[str, tuple[int, ...]] = {
        "emb.word": (config.vocab, d),
        "emb.seg": (config.segments, d),
        "emb.pos": (config.max_positions, d),
        "emb.ln_g": (d,),
        "emb.ln_b": (d,),
        "head.w": (config.classes, d),
        "head.b": (config.classes,),
    }
    for i in range(config.layers):
        p = layer_prefix(i)
        shapes.update({
            f"{p}.wq": (d, d), f"{p}.wk": (d, d), f"{p}.wv": (d, d),
            f"{p}.wo": (d, d), f"{p}.w1": (dff, d), f"{p}.w2": (d, dff),
            f"{p}.bq": (d,), f"{p}.bk": (d,), f"{p}.bv": (d,),
            f"{p}.bo": (d,), f"{p}.b1": (dff,), f"{p}.b2": (d,),
            f"{p}.ln1_g": (d,), f"{p}.ln1_b": (d,),
            f"{p}.ln2_g": (d,), f"{p}.ln2_b": (d,),
        })
    return shapes


def init_params(config: ModelConfig, rng: np.random.Generator,
                std: float = 0.02) -> dict[str, np.ndarray]:
    params = {}
    for name, shape in param_shapes(config).items():
        leaf = name.split(".")[-1]
        if leaf.endswith("_g"):
            params[name] = np.ones(shape, dtype=np.float32)
        elif leaf.startswith("b") or leaf.endswith("_b"):
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            params[name] = (rng.standard_normal(shape) * std).astype(np.float32)
    return params


def quant_slot(name: str) -> str | None:
    """Which plan slot covers a parameter: 'w', 'e', or None."""
    if name == "emb.word":
        return "e"
    leaf = name.split(".")[-1]
    if name.startswith("layer") and leaf in ("wq", "wk", "wv", "wo", "w1", "w2"):
        return "w"
    return None


def param_role(name: str) -> str:
    slot = quant_slot(name)
    if slot == "w":
        return "transformer_weight"
    if slot == "e":
        return "word_embedding"
    return {"emb.seg": "segment_embedding", "emb.pos": "position_embedding"}.get(
        name, "task_head" if name.startswith("head.") else "other")


def quantize_param(name: str, value: np.ndarray, plan: QuantPlan,
                   second_moment: np.ndarray | None = None):
    """Quantize one parameter per its plan slot; None if it stays fp32."""
    slot = quant_slot(name)
    if slot is None or plan is None:
        return None
    bits = plan.w_bits if slot == "w" else plan.e_bits
    method = plan.w_method if slot == "w" else plan.e_method
    gran = plan.w_gran if slot == "w" else plan.e_gran
    if bits == 32:
        return None
    if method == "int8_sym":
        return ternarize.quantize_int8(value, gran)
    v = second_moment if second_moment is not None else np.zeros_like(value)
    if method == "laq3":
        return ternarize.laq3(value, v, gran, plan.lat_iters, plan.v_floor)
    if method in ("lat_exact", "lat_approx"):
        mode = "exact" if method == "lat_exact" else "approx"
        return ternarize.lat_subproblem(value, v, gran, mode,
                                        plan.lat_iters, plan.v_floor)
    return ternarize.ternarize(value, ternarize.QuantConfig(method, gran))


def build_leaves(params: dict[str, np.ndarray], plan: QuantPlan | None = None,
                 second_moments: dict[str, np.ndarray] | None = None,
                 trainable: bool = True):
    """Per-parameter tape leaves; quantized slots get dequantized codes.

    Returns (leaves, qinfo) where qinfo maps quantized names to their
    TernaryTensor.  Gradients land on the dequantized leaf (the quantized
    weight), which the optimizer then applies to the full-precision shadow.
    """
    leaves: dict[str, Tensor] = {}
    qinfo: dict[str, ternarize.TernaryTensor] = {}
    for name, value in params.items():
        v = second_moments.get(name) if second_moments else None
        q = quantize_param(name, value, plan, v)
        if q is None:
            leaves[name] = Tensor(value, requires_grad=trainable, name=name)
        else:
            qinfo[name] = q
            leaves[name] = Tensor(ternarize.dequantize(q),
                                  requires_grad=trainable, name=name)
    return leaves, qinfo


# ---------------------------------------------------------------------------
# forward


@dataclass
class ForwardTrace:
    hidden: list[Tensor]      # H_1 .. H_{L+1}, each (batch, n, d)
    attention: list[Tensor]   # per layer, heads stacked on axis 0: (heads*batch, n, n)
    logits: Tensor            # (batch, classes)


def _maybe_fq(x: Tensor, plan: QuantPlan | None) -> Tensor:
    if plan is not None and plan.quantizes_activations:
        return actquant.fake_quantize(x, plan.act_scheme)[0]
    return x


def _linear(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    out = T.matmul(x, T.transpose_last2(w))
    if b is not None:
        out = out + b
    return out


def forward(leaves: dict[str, Tensor], config: ModelConfig,
            tokens: np.ndarray, segments: np.ndarray,
            plan: QuantPlan | None = None, train: bool = False,
            rng: np.random.Generator | None = None) -> ForwardTrace:
    tokens = np.asarray(tokens)
    segments = np.asarray(segments)
    if tokens.ndim != 2 or tokens.shape != segments.shape:
        raise ShapeError("tokens/segments must be matching (batch, n) arrays")
    batch, n = tokens.shape
    if n > config.max_positions:
        raise ShapeError(f"sequence length {n} exceeds {config.max_positions}")
    if tokens.min(initial=0) < 0 or tokens.max(initial=0) >= config.vocab:
        raise ShapeError("token id out of range")
    if segments.min(initial=0) < 0 or segments.max(initial=0) >= config.segments:
        raise ShapeError("segment id out of range")
    p_drop = config.dropout if train else 0.0
    if p_drop > 0 and rng is None:
        raise ValueError("training-mode forward needs an rng for dropout")

    def drop(x: Tensor) -> Tensor:
        return T.dropout(x, p_drop, rng) if p_drop > 0 else x

    pos = np.broadcast_to(np.arange(n), (batch, n))
    emb = T.gather_rows(leaves["emb.word"], tokens) \
        + T.gather_rows(leaves["emb.seg"], segments) \
        + T.gather_rows(leaves["emb.pos"], pos)
    h = drop(T.layer_norm(emb, leaves["emb.ln_g"], leaves["emb.ln_b"]))

    scale = 1.0 / math.sqrt(config.hidden if config.attn_scale == "sqrt_d"
                            else config.d_head)
    dh = config.d_head
    hidden = [h]
    attention = []
    for i in range(config.layers):
        p = layer_prefix(i)
        h_q = _maybe_fq(h, plan)
        q = _linear(h_q, leaves[f"{p}.wq"], leaves[f"{p}.bq"])
        k = _linear(h_q, leaves[f"{p}.wk"], leaves[f"{p}.bk"])
        v = _linear(h_q, leaves[f"{p}.wv"], leaves[f"{p}.bv"])
        q, k, v = _maybe_fq(q, plan), _maybe_fq(k, plan), _maybe_fq(v, plan)
        head_outs = []
        scores = []
        for hh in range(config.heads):
            q_h = T.narrow(q, 2, hh * dh, dh)
            k_h = T.narrow(k, 2, hh * dh, dh)
            v_h = T.narrow(v, 2, hh * dh, dh)
            a_h = T.matmul(q_h, T.transpose_last2(k_h))   # raw scores, traced
            scores.append(a_h)
            probs = T.softmax_rows(T.scale(a_h, scale))
            probs = drop(probs)
            head_outs.append(T.matmul(_maybe_fq(probs, plan), v_h))
        attention.append(T.concat(scores, axis=0) if len(scores) > 1 else scores[0])
        ctx = T.concat(head_outs, axis=2) if len(head_outs) > 1 else head_outs[0]
        attn_out = drop(_linear(_maybe_fq(ctx, plan), leaves[f"{p}.wo"],
                                leaves[f"{p}.bo"]))
        x = T.layer_norm(h + attn_out, leaves[f"{p}.ln1_g"], leaves[f"{p}.ln1_b"])
        inner = T.gelu(_linear(_maybe_fq(x, plan), leaves[f"{p}.w1"],
                               leaves[f"{p}.b1"]))
        ffn_out = drop(_linear(_maybe_fq(inner, plan), leaves[f"{p}.w2"],
                               leaves[f"{p}.b2"]))
        h = T.layer_norm(x + ffn_out, leaves[f"{p}.ln2_g"], leaves[f"{p}.ln2_b"])
        hidden.append(h)

    first = T.reshape(T.narrow(h, 1, 0, 1), (batch, config.hidden))
    logits = _linear(first, leaves["head.w"], leaves["head.b"])
    return ForwardTrace(hidden=hidden, attention=attention, logits=logits)


def attention_scores(h: Tensor, wq: Tensor, wk: Tensor,
                     config: ModelConfig) -> list[Tensor]:
    """Raw per-head scores (H W_h^Q)(H W_h^K)^T, no normalization."""
    q = T.matmul(h, T.transpose_last2(wq))
    k = T.matmul(h, T.transpose_last2(wk))
    dh = config.d_head
    return [T.matmul(T.narrow(q, h.ndim - 1, i * dh, dh),
                     T.transpose_last2(T.narrow(k, h.ndim - 1, i * dh, dh)))
            for i in range(config.heads)]


def predict(params: dict[str, np.ndarray], config: ModelConfig,
            tokens: np.ndarray, segments: np.ndarray,
            plan: QuantPlan | None = None,
            second_moments: dict[str, np.ndarray] | None = None) -> np.ndarray:
    """Deterministic class predictions (dropout off)."""
    leaves, _ = build_leaves(params, plan, second_moments, trainable=False)
    trace = forward(leaves, config, tokens, segments, plan=plan, train=False)
    return np.argmax(trace.logits.data, axis=-1)


# ---------------------------------------------------------------------------
# persistence


def to_saved_tensors(params: dict[str, np.ndarray], plan: QuantPlan | None = None,
                     second_moments: dict[str, np.ndarray] | None = None
                     ) -> list[SavedTensor]:
    out = []
    for name in sorted(params):
        value = params[name]
        v = second_moments.get(name) if second_moments else None
        q = quantize_param(name, value, plan, v) if plan else None
        if q is None:
            out.append(SavedTensor(name=name, role=param_role(name), bits=32,
                                   array=value))
        else:
            slot = quant_slot(name)
            bits = plan.w_bits if slot == "w" else plan.e_bits
            method = plan.w_method if slot == "w" else plan.e_method
            out.append(SavedTensor(name=name, role=param_role(name), bits=bits,
                                   method=method, granularity=q.granularity,
                                   quant=q))
    return out


def params_from_loaded(loaded_tensors: dict, config: ModelConfig
                       ) -> tuple[dict[str, np.ndarray], dict]:
    """Dequantized parameter arrays plus the quantized originals by name."""
    expected = param_shapes(config)
    params = {}
    qinfo = {}
    for name, shape in expected.items():
        if name not in loaded_tensors:
            raise KeyError(f"model file is missing tensor {name!r}")
        lt = loaded_tensors[name]
        if lt.array is not None:
            arr = lt.array.reshape(shape)
        else:
            qinfo[name] = lt.quant
            arr = ternarize.dequantize(lt.quant).reshape(shape)
        params[name] = arr.astype(np.float32)
    return params, qinfo
