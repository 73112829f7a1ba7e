"""DINO self-distillation: loss, centering, EMA teacher, schedules and the loop."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from . import vit
from .config import RunConfig
from .optim import OptimState, adamw_step, clip_global_norm, cosine_interp
from .tensor import Tensor
from .views import ViewSet, collate, make_views, sample_rng

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "epoch", "loss", "lr", "wd", "lambda", "grad_norm")


# ---------------------------------------------------------------------------
# loss and centering


def loss_pairs(n_teacher: int, n_student: int) -> list[tuple[int, int]]:
    """(teacher view, student view) pairs; the student's first n_teacher views are
    the same crops the teacher saw, and same-index pairs are skipped."""
    return [(i, j) for i in range(n_teacher) for j in range(n_student) if j != i]


def teacher_probs(teacher_logits: np.ndarray, center: np.ndarray, tau_t: float) -> np.ndarray:
    """Centred, sharpened teacher targets. Plain arrays: no gradient flows here."""
    if not tau_t > 0:
        raise ValueError(f"teacher temperature must be positive, got {tau_t}")
    z = (np.asarray(teacher_logits) - center) / tau_t
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def dino_loss(teacher_logits, student_logits: Tensor, tau_t: float, tau_s: float,
              center: np.ndarray) -> Tensor:
    """Mean cross-entropy H(p_t, p_s) over all cross-view pairs and the batch.

    teacher_logits: [n_t × B × K] (array or Tensor; treated as a constant).
    student_logits: [n_s × B × K] Tensor, global views first.
    """
    if not tau_s > 0:
        raise ValueError(f"student temperature must be positive, got {tau_s}")
    t_data = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if center.shape[-1] != t_data.shape[-1]:
        raise ValueError(f"center has length {center.shape[-1]}, logits have K={t_data.shape[-1]}")
    pt = teacher_probs(t_data, center, tau_t)
    n_t, b, _ = pt.shape
    n_s = student_logits.shape[0]
    pairs = loss_pairs(n_t, n_s)
    # Each student view's target weight is the sum of the teacher views it is paired with.
    weight = np.zeros((n_s,) + pt.shape[1:], dtype=student_logits.dtype)
    for i, j in pairs:
        weight[j] += pt[i]
    log_ps = T.log_softmax_temp(student_logits, tau_s)
    total = T.sum_all(T.mul(log_ps, Tensor(weight)))
    return T.scale(total, -1.0 / (len(pairs) * b))


def pair_losses(teacher_logits: np.ndarray, student_logits: np.ndarray, tau_t: float, tau_s: float,
                center: np.ndarray) -> np.ndarray:
    """Per-pair, per-sample cross-entropies [n_pairs × B] (reference, no tape)."""
    pt = teacher_probs(teacher_logits, center, tau_t)
    log_ps = T.log_softmax_temp(Tensor(np.asarray(student_logits)), tau_s).data
    pairs = loss_pairs(pt.shape[0], log_ps.shape[0])
    return np.stack([-(pt[i] * log_ps[j]).sum(axis=-1) for i, j in pairs])


@dataclass
class Center:
    c: np.ndarray
    momentum: float = 0.9

    def __post_init__(self):
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError(f"center momentum must be in [0, 1], got {self.momentum}")


def update_center(center: Center, teacher_logits: np.ndarray) -> Center:
    t = np.asarray(teacher_logits)
    batch_mean = t.reshape(-1, t.shape[-1]).mean(axis=0)
    m = center.momentum
    return Center((m * center.c + (1.0 - m) * batch_mean).astype(center.c.dtype), m)


def ema_update(teacher: dict[str, Tensor], student: dict[str, Tensor], lam: float) -> None:
    """θ_t ← λ·θ_t + (1−λ)·θ_s, in place."""
    if teacher.keys() != student.keys():
        raise RuntimeError("teacher/student parameter trees differ")
    for name, tp in teacher.items():
        sp = student[name]
        if tp.shape != sp.shape:
            raise RuntimeError(f"shape mismatch for {name}: {tp.shape} vs {sp.shape}")
        dt = tp.dtype.type
        tp.data = dt(lam) * tp.data + dt(1.0 - lam) * sp.data


# ---------------------------------------------------------------------------
# schedules


def peak_lr(cfg: RunConfig) -> float:
    return cfg.base_lr * cfg.batch_size / 256.0


def warmup_steps(cfg: RunConfig, total: int) -> int:
    if cfg.warmup_frac <= 0:
        return 0
    return max(1, int(round(cfg.warmup_frac * total)))


def lr_at(t: int, cfg: RunConfig, total: int) -> float:
    """Linear warmup from 0 to the scaled peak, then cosine to ``min_lr``."""
    peak = peak_lr(cfg)
    w = warmup_steps(cfg, total)
    if t < w:
        return peak * t / w
    if total <= w:
        return peak
    return cosine_interp(peak, cfg.min_lr, t - w, total - w)


@dataclass(frozen=True)
class Schedules:
    cfg: RunConfig
    total_steps: int

    def lr(self, t: int) -> float:
        return lr_at(t, self.cfg, self.total_steps)

    def wd(self, t: int) -> float:
        return cosine_interp(self.cfg.weight_decay, self.cfg.weight_decay_end, t, self.total_steps)

    def ema(self, t: int) -> float:
        return cosine_interp(self.cfg.ema_start, self.cfg.ema_end, t, self.total_steps)


def total_steps(cfg: RunConfig, n_samples: int) -> int:
    per_epoch = n_samples // cfg.batch_size
    steps = cfg.epochs * per_epoch
    return min(steps, cfg.max_steps) if cfg.max_steps else steps


# ---------------------------------------------------------------------------
# state and step


@dataclass
class TrainState:
    student: dict[str, Tensor]
    teacher: dict[str, Tensor]
    opt: OptimState
    center: Center
    step: int = 0
    seed: int = 0

    @classmethod
    def init(cls, cfg: RunConfig) -> "TrainState":
        dtype = T.DTYPES[cfg.dtype]
        student = vit.init_params(cfg.vit_config(), cfg.seed, dtype)
        teacher = {k: Tensor(v.data.copy(), name=k) for k, v in student.items()}
        return cls(student, teacher, OptimState(cfg.beta1, cfg.beta2, cfg.adam_eps),
                   Center(np.zeros(cfg.out_dim, dtype=dtype), cfg.center_momentum), 0, cfg.seed)


def _checksum(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()[:16]


def student_logits(params, vcfg: vit.ViTConfig, globals_: np.ndarray, locals_: np.ndarray,
                   n_global: int, n_local: int, b: int) -> Tensor:
    """[n_global + n_local × B × K], globals first."""
    parts = [vit.forward(globals_, vcfg, params).cls_embedding]
    if n_local:
        parts.append(vit.forward(locals_, vcfg, params).cls_embedding)
    logits = vit.head_forward(T.concat(parts, axis=0) if len(parts) > 1 else parts[0], params)
    return T.reshape(logits, (n_global + n_local, b, vcfg.out_dim))


def teacher_logits(params, vcfg: vit.ViTConfig, globals_: np.ndarray, n_global: int, b: int) -> np.ndarray:
    emb = vit.forward(globals_, vcfg, params).cls_embedding
    return vit.head_forward(emb, params).data.reshape(n_global, b, vcfg.out_dim)


def train_step(batch: Sequence[ViewSet], state: TrainState, cfg: RunConfig, sched: Schedules,
               epoch: int = 0) -> dict:
    """One optimisation step; mutates and returns ``state`` alongside the metrics."""
    if not batch:
        raise ValueError("empty batch")
    vcfg = cfg.vit_config()
    b = len(batch)
    n_g, n_l = cfg.global_crops, cfg.local_crops
    dtype = T.DTYPES[cfg.dtype]
    t_in, s_glob, s_loc = (x.astype(dtype, copy=False) for x in collate(list(batch)))

    t_logits = teacher_logits(state.teacher, vcfg, t_in, n_g, b)
    with T.Tape() as tape:
        s_logits = student_logits(state.student, vcfg, s_glob, s_loc, n_g, n_l, b)
        loss = dino_loss(t_logits, s_logits, cfg.temp_teacher, cfg.temp_student, state.center.c)
    loss_value = float(loss.data)
    if not np.isfinite(loss_value):
        raise FloatingPointError(
            f"non-finite loss {loss_value} at step {state.step}; input checksums "
            f"teacher={_checksum(t_in)} student_globals={_checksum(s_glob)} locals={_checksum(s_loc)}")
    for p in state.student.values():
        p.grad = None
    T.backward(loss, tape)

    t = state.step
    lr, wd, lam = sched.lr(t), sched.wd(t), sched.ema(t)
    names = list(state.student)
    grads = [state.student[n].grad if state.student[n].grad is not None
             else np.zeros_like(state.student[n].data) for n in names]
    grads, gnorm = clip_global_norm(grads, cfg.clip_grad)
    freeze = epoch < cfg.freeze_last_layer_epochs
    for name, g in zip(names, grads):
        if freeze and name == "head.last.v":
            continue
        adamw_step(state.student[name], g, state.opt, lr, wd if vit.is_decayed(name) else 0.0, name=name)
        state.student[name].grad = None
    ema_update(state.teacher, state.student, lam)
    state.center = update_center(state.center, t_logits)
    state.step += 1
    return {"step": t + 1, "epoch": epoch, "loss": loss_value, "lr": lr, "wd": wd,
            "lambda": lam, "grad_norm": gnorm, "terms": len(loss_pairs(n_g, n_g + n_l)) * b}


# ---------------------------------------------------------------------------
# loop


def format_metrics(m: dict) -> str:
    return "\t".join([str(m["step"]), str(m["epoch"])] +
                     [f"{m[k]:.9g}" for k in METRIC_COLUMNS[2:]])


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch], spawn_key=(1,)))
    return rng.permutation(n)


@dataclass
class TrainResult:
    state: TrainState
    metrics: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


def train(images: Sequence[np.ndarray], cfg: RunConfig, run_dir: str | Path | None = None,
          state: TrainState | None = None) -> TrainResult:
    """Epoch × batch loop over ``images`` ([C×H×W] arrays in [0, 1]).

    When ``run_dir`` is given, writes ``metrics.tsv``, periodic checkpoints and
    ``final.ckpt`` there.
    """
    from .checkpoint import save_checkpoint

    if len(images) == 0:
        raise ValueError("dataset is empty")
    cfg.validate()
    state = state or TrainState.init(cfg)
    n_steps = total_steps(cfg, len(images))
    sched = Schedules(cfg, max(n_steps, 1))
    vcfg = cfg.view_config()
    result = TrainResult(state)
    out = Path(run_dir) if run_dir is not None else None
    metrics_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_file = open(out / "metrics.tsv", "w")
        metrics_file.write("\t".join(METRIC_COLUMNS) + "\n")
    try:
        for epoch in range(cfg.epochs):
            if state.step >= n_steps:
                break
            order = epoch_order(cfg.seed, epoch, len(images))
            for start in range(0, len(order) - cfg.batch_size + 1, cfg.batch_size):
                if state.step >= n_steps:
                    break
                idx = order[start:start + cfg.batch_size]
                batch = [make_views(images[i], vcfg, sample_rng(cfg.seed, epoch, int(i))) for i in idx]
                m = train_step(batch, state, cfg, sched, epoch)
                result.metrics.append(m)
                if metrics_file is not None:
                    metrics_file.write(format_metrics(m) + "\n")
                    metrics_file.flush()
                if m["step"] % 50 == 0:
                    logger.info("step %d loss %.4f lr %.2e", m["step"], m["loss"], m["lr"])
            if out is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                path = out / f"epoch{epoch + 1:04d}.ckpt"
                save_checkpoint(state, cfg, path)
                result.checkpoints.append(path)
    finally:
        if metrics_file is not None:
            metrics_file.close()
    if out is not None:
        path = out / "final.ckpt"
        save_checkpoint(state, cfg, path)
        result.checkpoints.append(path)
    return result
