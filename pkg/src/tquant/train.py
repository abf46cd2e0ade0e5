"""Distillation-aware ternarization: losses, optimizer, training loop.

Each step re-derives the quantized student from its full-precision shadow
weights, runs the quantized forward on student and teacher, and applies
the gradient of the distillation loss (taken with respect to the
quantized weights) to the shadows:

    1. ternarize shadow w^t  (loss-aware modes read the optimizer's
       current second moment v^t)
    2. forward student (quantized, dropout on) and teacher (full
       precision, dropout off)
    3. L = L_trm + L_pred, per stage and ablation flags
    4. backprop to the dequantized weight leaves
    5. shadow update by the Adam variant below; learning rate decays
       linearly to zero

The optimizer keeps first/second moments without bias correction and
applies decoupled weight decay inside the learning-rate multiplier:
``w -= lr * (m / (sqrt(v) + eps) + wd * w)``; biases and layer-norm
parameters are excluded from decay.

Losses: L_trm sums MSE over the embedding output and every layer output
plus MSE over raw attention scores of all heads; L_pred is the soft
cross-entropy between student and teacher logits.  With both disabled,
training falls back to ground-truth cross-entropy and never touches the
teacher.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import (ForwardTrace, ModelConfig, QuantPlan, build_leaves, forward)
from .tasks import Example, as_arrays
from .tensor import GradTape, Tensor


class TrainingDiverged(ArithmeticError):
    """The loss went non-finite; message names the first bad tensor."""


@dataclass
class DistillLossConfig:
    use_trm: bool = True
    use_logits: bool = True
    temperature: float = 1.0


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 0.01
    total_steps: int = 1000


def decay_excluded(name: str) -> bool:
    leaf = name.split(".")[-1]
    return leaf.startswith("b") or leaf.endswith("_g") or leaf.endswith("_b")


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @staticmethod
    def initial(params: dict[str, np.ndarray]) -> "OptimizerState":
        return OptimizerState(m={k: np.zeros_like(p) for k, p in params.items()},
                              v={k: np.zeros_like(p) for k, p in params.items()})


def learning_rate(cfg: OptimizerConfig, step: int) -> float:
    return cfg.lr * max(0.0, 1.0 - step / cfg.total_steps)


def optimizer_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                   state: OptimizerState, cfg: OptimizerConfig) -> tuple[float, float]:
    """Apply one update; returns (lr used, norm of the total weight change)."""
    lr = learning_rate(cfg, state.step)
    delta_sq = 0.0
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        update = m / (np.sqrt(v) + cfg.eps)
        if cfg.weight_decay and not decay_excluded(name):
            update = update + cfg.weight_decay * params[name]
        step = (lr * update).astype(params[name].dtype)
        params[name] -= step
        delta_sq += float((step.astype(np.float64) ** 2).sum())
    state.step += 1
    return lr, float(np.sqrt(delta_sq))


# ---------------------------------------------------------------------------
# losses


def loss_trm(student: ForwardTrace, teacher: ForwardTrace) -> Tensor:
    if len(student.hidden) != len(teacher.hidden) or \
            len(student.attention) != len(teacher.attention):
        raise T.ShapeError("student/teacher traces have different depths")
    total = None
    for hs, ht in zip(student.hidden, teacher.hidden):
        if hs.shape != ht.shape:
            raise T.ShapeError("hidden state shape mismatch")
        term = T.mean_all(T.mul(hs - ht, hs - ht))
        total = term if total is None else total + term
    for as_, at in zip(student.attention, teacher.attention):
        if as_.shape != at.shape:
            raise T.ShapeError("attention score shape mismatch")
        term = T.mean_all(T.mul(as_ - at, as_ - at))
        total = term if total is None else total + term
    return total


def loss_pred(student_logits: Tensor, teacher_logits: Tensor,
              temperature: float = 1.0) -> Tensor:
    """Soft cross-entropy -sum softmax(teacher) * log_softmax(student) / batch."""
    if student_logits.shape != teacher_logits.shape:
        raise T.ShapeError("logit shape mismatch")
    t64 = teacher_logits.data.astype(np.float64) / temperature
    t64 = t64 - t64.max(axis=-1, keepdims=True)
    probs = np.exp(t64)
    probs /= probs.sum(axis=-1, keepdims=True)
    log_sm = T.log_softmax_rows(T.scale(student_logits, 1.0 / temperature))
    weighted = T.mul(log_sm, Tensor(probs.astype(np.float32)))
    return T.scale(T.sum_all(weighted), -1.0 / student_logits.shape[0])


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    batch, classes = logits.shape
    onehot = np.zeros((batch, classes), dtype=np.float32)
    onehot[np.arange(batch), labels] = 1.0
    log_sm = T.log_softmax_rows(logits)
    return T.scale(T.sum_all(T.mul(log_sm, Tensor(onehot))), -1.0 / batch)


# ---------------------------------------------------------------------------
# training state and loop


@dataclass
class TrainState:
    config: ModelConfig
    plan: QuantPlan | None
    params: dict[str, np.ndarray]            # full-precision shadow weights
    teacher: dict[str, np.ndarray] | None
    opt: OptimizerState
    opt_cfg: OptimizerConfig
    loss_cfg: DistillLossConfig
    rng: np.random.Generator
    stage: int = 1
    stages: int = 1
    plan_fingerprint: str = ""

    @staticmethod
    def create(config: ModelConfig, params: dict[str, np.ndarray],
               teacher: dict[str, np.ndarray] | None, plan: QuantPlan | None,
               opt_cfg: OptimizerConfig,
               loss_cfg: DistillLossConfig | None = None,
               seed: int = 0, stages: int = 1) -> "TrainState":
        return TrainState(config=config, plan=plan,
                          params={k: v.copy() for k, v in params.items()},
                          teacher=teacher, opt=OptimizerState.initial(params),
                          opt_cfg=opt_cfg,
                          loss_cfg=loss_cfg or DistillLossConfig(),
                          rng=np.random.default_rng(seed), stages=stages,
                          plan_fingerprint=_fingerprint(plan))


def _fingerprint(plan: QuantPlan | None) -> str:
    return "none" if plan is None else repr(sorted(plan.to_dict().items()))


def _first_nonfinite(trace: ForwardTrace) -> str | None:
    for i, h in enumerate(trace.hidden):
        if not np.isfinite(h.data).all():
            return f"hidden[{i + 1}]"
    for i, a in enumerate(trace.attention):
        if not np.isfinite(a.data).all():
            return f"attention[{i + 1}]"
    if not np.isfinite(trace.logits.data).all():
        return "logits"
    return None


def train_step(state: TrainState, tokens: np.ndarray, segments: np.ndarray,
               labels: np.ndarray) -> dict:
    """One pass of the distillation-aware ternarization loop."""
    if _fingerprint(state.plan) != state.plan_fingerprint:
        raise ValueError("quantization method changed mid-run; "
                         "start a fresh TrainState instead")
    cfg = state.loss_cfg
    stage1_trm_only = state.stages == 2 and state.stage == 1
    use_trm = cfg.use_trm
    use_logits = cfg.use_logits and not stage1_trm_only
    distilling = use_trm or use_logits
    if distilling and state.teacher is None:
        raise ValueError("distillation losses enabled but no teacher set")
    if stage1_trm_only and not use_trm:
        raise ValueError("two-stage training needs the transformer loss enabled")

    with GradTape() as tape:
        # loss-aware methods read the optimizer's accumulated second moment
        leaves, _ = build_leaves(state.params, state.plan,
                                 second_moments=state.opt.v, trainable=True)
        student = forward(leaves, state.config, tokens, segments,
                          plan=state.plan, train=True, rng=state.rng)
        l_trm_t = None
        l_pred_t = None
        if distilling:
            t_leaves, _ = build_leaves(state.teacher, plan=None, trainable=False)
            teacher = forward(t_leaves, state.config, tokens, segments,
                              plan=None, train=False)
            if use_trm:
                l_trm_t = loss_trm(student, teacher)
            if use_logits:
                l_pred_t = loss_pred(student.logits, teacher.logits,
                                     cfg.temperature)
            total = l_trm_t
            if l_pred_t is not None:
                total = l_pred_t if total is None else total + l_pred_t
        else:
            total = cross_entropy(student.logits, labels)

    loss_val = float(total.data)
    if not np.isfinite(loss_val):
        culprit = _first_nonfinite(student) or "loss"
        raise TrainingDiverged(f"non-finite loss at step {state.opt.step}; "
                               f"first bad tensor: {culprit}")

    grads_t = tape.gradients(total)
    grads = {name: grads_t.wrt(leaf) for name, leaf in leaves.items()}
    lr, delta = optimizer_step(state.params, grads, state.opt, state.opt_cfg)
    return {"step": state.opt.step, "stage": state.stage,
            "loss_trm": float(l_trm_t.data) if l_trm_t is not None else None,
            "loss_pred": float(l_pred_t.data) if l_pred_t is not None else None,
            "loss_total": loss_val, "lr": lr, "weight_delta": delta}


def evaluate(params: dict[str, np.ndarray], config: ModelConfig,
             examples: list[Example], plan: QuantPlan | None = None,
             second_moments: dict[str, np.ndarray] | None = None) -> float:
    if not examples:
        raise ValueError("cannot evaluate on an empty dataset")
    from .model import predict
    tokens, segments, labels = as_arrays(examples)
    preds = predict(params, config, tokens, segments, plan=plan,
                    second_moments=second_moments)
    return float((preds == labels).mean())


def eval_loss_trm(state: TrainState, examples: list[Example]) -> float:
    """L_trm of the current quantized student on a fixed batch, dropout off."""
    tokens, segments, _ = as_arrays(examples)
    leaves, _ = build_leaves(state.params, state.plan,
                             second_moments=state.opt.v, trainable=False)
    student = forward(leaves, state.config, tokens, segments,
                      plan=state.plan, train=False)
    t_leaves, _ = build_leaves(state.teacher, plan=None, trainable=False)
    teacher = forward(t_leaves, state.config, tokens, segments,
                      plan=None, train=False)
    return float(loss_trm(student, teacher).data)


@dataclass
class TrainSettings:
    epochs: int = 4
    batch_size: int = 32
    eval_every: int = 25
    seed: int = 0
    checkpoint_every: int = 0          # 0 disables periodic checkpoints
    checkpoint_dir: str | None = None


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def run_training(state: TrainState, train_set: list[Example],
                 eval_set: list[Example], settings: TrainSettings) -> list[dict]:
    """Run the full loop; returns the metrics history (one record per step)."""
    if not train_set:
        raise ValueError("training set is empty")
    if state.teacher is not None:
        shapes_t = {k: v.shape for k, v in state.teacher.items()}
        shapes_s = {k: v.shape for k, v in state.params.items()}
        if shapes_t != shapes_s:
            raise ValueError("teacher/student configurations do not match")
    tokens, segments, labels = as_arrays(train_set)
    steps_per_epoch = -(-len(train_set) // settings.batch_size)
    total_steps = settings.epochs * steps_per_epoch
    state.opt_cfg.total_steps = max(total_steps, 1)
    stage_boundary = total_steps // 2 if state.stages == 2 else 0

    metrics: list[dict] = []
    shuffle_rng = np.random.default_rng(settings.seed + 0x5EED)
    for _ in range(settings.epochs):
        for idx in _batches(len(train_set), settings.batch_size, shuffle_rng):
            if state.stages == 2:
                state.stage = 1 if state.opt.step < stage_boundary else 2
            rec = train_step(state, tokens[idx], segments[idx], labels[idx])
            if settings.eval_every and rec["step"] % settings.eval_every == 0:
                rec["eval_acc"] = evaluate(state.params, state.config, eval_set,
                                           plan=state.plan,
                                           second_moments=state.opt.v)
            else:
                rec["eval_acc"] = None
            rec["seed"] = settings.seed
            metrics.append(rec)
            if settings.checkpoint_every and settings.checkpoint_dir and \
                    rec["step"] % settings.checkpoint_every == 0:
                _write_checkpoint(state, settings, rec["step"])
    return metrics


def _write_checkpoint(state: TrainState, settings: TrainSettings, step: int) -> None:
    import os

    from .model import to_saved_tensors
    from .packed import save_model
    path = os.path.join(settings.checkpoint_dir, f"step{step:06d}.tqm")
    tensors = to_saved_tensors(state.params, state.plan, state.opt.v)
    save_model(path, state.config.to_dict(), tensors,
               extras={"step": step, "stage": state.stage,
                       "seed": settings.seed})


def train_float_baseline(config: ModelConfig, train_set: list[Example],
                         eval_set: list[Example], opt_cfg: OptimizerConfig,
                         settings: TrainSettings,
                         init: dict[str, np.ndarray] | None = None
                         ) -> tuple[dict[str, np.ndarray], list[dict]]:
    """Supervised full-precision training; the usual way to make a teacher."""
    from .model import init_params
    params = init if init is not None else \
        init_params(config, np.random.default_rng(settings.seed))
    state = TrainState.create(config, params, teacher=None, plan=None,
                              opt_cfg=opt_cfg,
                              loss_cfg=DistillLossConfig(False, False),
                              seed=settings.seed)
    metrics = run_training(state, train_set, eval_set, settings)
    return state.params, metrics
