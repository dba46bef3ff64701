"""Fine-tuning engine.

Every step evaluates the classification loss at the current weights; in
``iwr`` mode it also evaluates the loss at a random point on the segment
towards the pretrained weights and adds that gradient with weight ``C``
(the interpolation factor of the chain rule cancels the 1/(1-alpha) in the
loss weight).  A running weight average is folded in every ``swa_cycle``
steps after ``swa_start``.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as tc
from .model import ClassPromptBank, ModelConfig, VideoBatch, as_tensors, check_params, video_embedding
from .weightspace import (Checkpoint, ParamVector, SwaState, combine, interpolate,
                          load_checkpoint, save_checkpoint, swa_update)

log = logging.getLogger(__name__)

MODES = ("iwr", "plain", "l2")


class TrainingAborted(RuntimeError):
    def __init__(self, msg, report=None):
        super().__init__(msg)
        self.report = report


@dataclass(frozen=True)
class TrainConfig:
    lr_init: float = 3.33e-6
    lr_final: float = 3.33e-8
    warmup_lr: float = 3.33e-8
    warmup_epochs: int = 2
    epochs: int = 20
    batch: int = 16
    R: float = 0.6
    C: float = 0.5
    mode: str = "iwr"
    mu: float = 0.0
    swa: bool = True
    swa_start: int | None = None      # default: end of warm-up + one epoch
    swa_cycle: int = 50
    optimizer: str = "adamw"
    weight_decay: float = 0.0
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    precision: str = "float32"
    keep_snapshots: bool = False

    def __post_init__(self):
        if not 0.0 < self.R < 1.0:
            raise ValueError(f"R must lie in (0, 1), got {self.R}")
        if self.C < 0:
            raise ValueError("C must be >= 0")
        if self.lr_final > self.lr_init:
            raise ValueError("lr_final must not exceed lr_init")
        if self.batch < 2:
            raise ValueError("batch must be >= 2")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.mu < 0:
            raise ValueError("mu must be >= 0")
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError("optimizer must be 'adamw' or 'sgd'")
        if self.swa_cycle < 1:
            raise ValueError("swa_cycle must be >= 1")
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ValueError("epoch counts must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)

    def replace(self, **kw) -> "TrainConfig":
        return TrainConfig.from_dict({**self.to_dict(), **kw})


@dataclass
class LossReport:
    step: int
    base_loss: float
    reg_loss: float | None
    alpha: float | None
    beta: float | None
    lr: float
    grad_norm: float
    finite: bool = True

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


# -- losses ----------------------------------------------------------------------

def _targets(batch: VideoBatch, candidates: Sequence[int]) -> np.ndarray:
    row = {int(c): i for i, c in enumerate(candidates)}
    missing = sorted({int(c) for c in batch.class_ids} - set(row))
    if missing:
        raise KeyError(f"class ids {missing} are not among the training prompts")
    return np.array([row[int(c)] for c in batch.class_ids], dtype=np.intp)


def loss_tensor(P, batch: VideoBatch, text: np.ndarray, targets: np.ndarray, cfg: ModelConfig) -> tc.Tensor:
    """Cross-entropy of cos(v, t_k) / tau over the candidate prompts."""
    v = tc.l2_normalize(video_embedding(P, batch.pixels, cfg))
    logits = tc.scale(tc.matmul(v, tc.Tensor(text.T)), 1.0 / cfg.temperature)
    return tc.cross_entropy(logits, targets)


def contrastive_loss(videos: VideoBatch, bank: ClassPromptBank, theta: ParamVector, cfg: ModelConfig,
                     candidates: Sequence[int] | None = None) -> float:
    candidates = list(bank.class_ids if candidates is None else candidates)
    targets = _targets(videos, candidates)
    check_params(theta, cfg)
    return loss_tensor(as_tensors(theta), videos, bank.matrix(candidates), targets, cfg).item()


def loss_and_grad(theta: ParamVector, batch: VideoBatch, text: np.ndarray, targets: np.ndarray,
                  cfg: ModelConfig) -> tuple[float, ParamVector]:
    P = as_tensors(theta, requires_grad=True)
    loss = loss_tensor(P, batch, text, targets, cfg)
    grads = tc.grad(loss, P.values())
    return loss.item(), ParamVector(zip(P.keys(), grads))


def sample_alpha(R: float, rng: np.random.Generator) -> float:
    """Uniform draw from the open interval (0, R)."""
    if not 0.0 < R < 1.0:
        raise ValueError(f"R must lie in (0, 1), got {R}")
    while True:
        a = rng.uniform(0.0, R)
        if a > 0.0:
            return float(a)


# -- optimisers ------------------------------------------------------------------

class AdamW:
    def __init__(self, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, theta: ParamVector, grad: ParamVector, lr: float) -> ParamVector:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        out = []
        for n, p in theta.items():
            g = grad[n]
            m = self.m.get(n)
            v = self.v.get(n)
            m = (1.0 - self.b1) * g if m is None else self.b1 * m + (1.0 - self.b1) * g
            v = (1.0 - self.b2) * g * g if v is None else self.b2 * v + (1.0 - self.b2) * g * g
            self.m[n], self.v[n] = m.astype(p.dtype), v.astype(p.dtype)
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.wd:
                upd = upd + self.wd * p
            out.append((n, (p - lr * upd).astype(p.dtype)))
        return ParamVector(out)

    def state(self) -> tuple[dict, dict]:
        tensors = {f"adam.m/{n}": a for n, a in self.m.items()}
        tensors.update({f"adam.v/{n}": a for n, a in self.v.items()})
        return tensors, {"t": self.t}

    def load(self, tensors: Mapping[str, np.ndarray], meta: Mapping) -> None:
        self.t = int(meta["t"])
        self.m = {k[len("adam.m/"):]: v for k, v in tensors.items() if k.startswith("adam.m/")}
        self.v = {k[len("adam.v/"):]: v for k, v in tensors.items() if k.startswith("adam.v/")}


class MomentumSGD:
    def __init__(self, momentum=0.9, weight_decay=0.0):
        self.mom = momentum
        self.wd = weight_decay
        self.buf: dict[str, np.ndarray] = {}

    def step(self, theta: ParamVector, grad: ParamVector, lr: float) -> ParamVector:
        out = []
        for n, p in theta.items():
            g = grad[n] + self.wd * p if self.wd else grad[n]
            b = g if n not in self.buf else self.mom * self.buf[n] + g
            self.buf[n] = b.astype(p.dtype)
            out.append((n, (p - lr * b).astype(p.dtype)))
        return ParamVector(out)

    def state(self) -> tuple[dict, dict]:
        return {f"sgd.buf/{n}": a for n, a in self.buf.items()}, {}

    def load(self, tensors: Mapping[str, np.ndarray], meta: Mapping) -> None:
        self.buf = {k[len("sgd.buf/"):]: v for k, v in tensors.items() if k.startswith("sgd.buf/")}


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "adamw":
        return AdamW(cfg.betas, cfg.eps, cfg.weight_decay)
    return MomentumSGD(cfg.momentum, cfg.weight_decay)


def _norm(g: ParamVector) -> float:
    return math.sqrt(sum(float(np.dot(a.reshape(-1).astype(np.float64), a.reshape(-1).astype(np.float64)))
                         for a in g.values()))


# -- single steps ------------------------------------------------------------------

@dataclass
class StepContext:
    """Everything a step needs besides the weights and the batch."""

    model: ModelConfig
    text: np.ndarray                  # candidate prompt embeddings, K x d
    candidates: list[int]
    clip: ParamVector
    optimizer: object


def _finite_or_abort(step, value, **kw):
    if not math.isfinite(value):
        report = LossReport(step=step, base_loss=value, finite=False, **kw)
        raise TrainingAborted(f"non-finite loss at step {step}", report)


def plain_step(theta, batch, ctx: StepContext, lr: float, step: int = 0):
    targets = _targets(batch, ctx.candidates)
    try:
        loss, g = loss_and_grad(theta, batch, ctx.text, targets, ctx.model)
    except tc.NonFiniteError as exc:
        raise TrainingAborted(str(exc), LossReport(step, math.nan, None, None, None, lr, math.nan, False))
    _finite_or_abort(step, loss, reg_loss=None, alpha=None, beta=None, lr=lr, grad_norm=math.nan)
    new = ctx.optimizer.step(theta, g, lr)
    return new, LossReport(step, loss, None, None, None, lr, _norm(g))


def iwr_step(theta, batch, ctx: StepContext, lr: float, C: float, alpha: float, step: int = 0):
    """One update on L(theta) + C/(1-alpha) * L(alpha*clip + (1-alpha)*theta).

    The gradient is assembled as dL|theta + C * dL|interp from two separate
    backward passes.
    """
    targets = _targets(batch, ctx.candidates)
    beta = C / (1.0 - alpha)
    try:
        loss, g = loss_and_grad(theta, batch, ctx.text, targets, ctx.model)
        interp = interpolate(ctx.clip, theta, alpha)
        reg, g_interp = loss_and_grad(interp, batch, ctx.text, targets, ctx.model)
    except tc.NonFiniteError as exc:
        raise TrainingAborted(str(exc), LossReport(step, math.nan, math.nan, alpha, beta, lr, math.nan, False))
    _finite_or_abort(step, loss + reg, reg_loss=reg, alpha=alpha, beta=beta, lr=lr, grad_norm=math.nan)
    total = combine([(1.0, g), (theta.dtype.type(C), g_interp)], out_dtype=theta.dtype)
    new = ctx.optimizer.step(theta, total, lr)
    return new, LossReport(step, loss, reg, alpha, beta, lr, _norm(total))


def l2_reg_step(theta, batch, ctx: StepContext, lr: float, mu: float, step: int = 0):
    """One update on L(theta) + mu * ||theta - clip||^2."""
    if mu < 0:
        raise ValueError("mu must be >= 0")
    targets = _targets(batch, ctx.candidates)
    try:
        loss, g = loss_and_grad(theta, batch, ctx.text, targets, ctx.model)
    except tc.NonFiniteError as exc:
        raise TrainingAborted(str(exc), LossReport(step, math.nan, None, None, None, lr, math.nan, False))
    dt = theta.dtype.type
    penalty = sum(float(np.sum((theta[n].astype(np.float64) - ctx.clip[n]) ** 2)) for n in theta)
    _finite_or_abort(step, loss, reg_loss=mu * penalty, alpha=None, beta=None, lr=lr, grad_norm=math.nan)
    total = ParamVector((n, g[n] + dt(2.0 * mu) * (theta[n] - ctx.clip[n])) for n in theta)
    new = ctx.optimizer.step(theta, total, lr)
    return new, LossReport(step, loss, mu * penalty, None, None, lr, _norm(total))


def l2_penalty_grad(theta: ParamVector, clip: ParamVector, mu: float) -> ParamVector:
    return ParamVector((n, 2.0 * mu * (theta[n] - clip[n])) for n in theta)


# -- verification ------------------------------------------------------------------

def combined_objective(theta: ParamVector, clip: ParamVector, batch: VideoBatch, text: np.ndarray,
                       targets: np.ndarray, cfg: ModelConfig, alpha: float, C: float):
    """Tape graph of L(theta) + C/(1-alpha) * L(alpha*clip + (1-alpha)*theta).

    Returns the loss tensor and the leaf tensors for ``theta``.
    """
    P = as_tensors(theta, requires_grad=True)
    Q = {n: tc.add(tc.scale(tc.Tensor(clip[n]), alpha), tc.scale(P[n], 1.0 - alpha)) for n in P}
    beta = C / (1.0 - alpha)
    total = tc.add(loss_tensor(P, batch, text, targets, cfg),
                   tc.scale(loss_tensor(Q, batch, text, targets, cfg), beta))
    return total, P


def relative_deviation(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """max_i |a_i - b_i| / max(|b_i|, floor * max_j |b_j|)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    scale = np.abs(b).max()
    if scale == 0:
        return float(np.abs(a).max())
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), floor * scale)))


def check_grad_identity(theta: ParamVector, clip: ParamVector, batch: VideoBatch, bank: ClassPromptBank,
                        cfg: ModelConfig, alpha: float, C: float,
                        candidates: Sequence[int] | None = None) -> float:
    """Backprop through the combined objective vs dL|theta + C * dL|interp (64-bit)."""
    candidates = list(bank.class_ids if candidates is None else candidates)
    targets = _targets(batch, candidates)
    with tc.precision("float64"):
        th = theta.astype(np.float64)
        cl = clip.astype(np.float64)
        b64 = VideoBatch(batch.pixels.astype(np.float64), batch.class_ids)
        text = bank.matrix(candidates).astype(np.float64)
        total, P = combined_objective(th, cl, b64, text, targets, cfg, alpha, C)
        lhs = np.concatenate([g.reshape(-1) for g in tc.grad(total, P.values())])
        _, g_theta = loss_and_grad(th, b64, text, targets, cfg)
        _, g_interp = loss_and_grad(interpolate(cl, th, alpha), b64, text, targets, cfg)
        rhs = g_theta.to_flat() + C * g_interp.to_flat()
    return relative_deviation(lhs, rhs)


# -- schedule --------------------------------------------------------------------

def cosine_lr(step: int, cfg: TrainConfig, steps_per_epoch: int) -> float:
    """Learning rate before update number ``step`` (0-based).

    Linear warm-up from ``warmup_lr`` to ``lr_init`` over the warm-up epochs,
    then cosine decay reaching ``lr_final`` on the last update.
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    warm = cfg.warmup_epochs * steps_per_epoch
    total = total_steps(cfg, steps_per_epoch)
    if step < warm:
        return cfg.warmup_lr + (cfg.lr_init - cfg.warmup_lr) * step / warm
    span = total - 1 - warm
    if span <= 0:
        return cfg.lr_init
    p = min(1.0, (step - warm) / span)
    return cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final) * (1.0 + math.cos(math.pi * p))


def total_steps(cfg: TrainConfig, steps_per_epoch: int) -> int:
    """No fine-tuning epochs means no training at all, warm-up included."""
    if cfg.epochs == 0:
        return 0
    return (cfg.warmup_epochs + cfg.epochs) * steps_per_epoch


def default_swa_start(cfg: TrainConfig, steps_per_epoch: int) -> int:
    return cfg.swa_start if cfg.swa_start is not None else (cfg.warmup_epochs + 1) * steps_per_epoch


# -- training loop -------------------------------------------------------------------

@dataclass
class TrainState:
    step: int
    theta: ParamVector
    swa: SwaState
    optimizer_tensors: dict
    optimizer_meta: dict
    batch_rng: dict
    alpha_rng: dict
    nonfinite_streak: int = 0


@dataclass
class TrainResult:
    theta: ParamVector
    swa: SwaState
    reports: list[LossReport] = field(default_factory=list)
    state: TrainState | None = None

    @property
    def swa_params(self) -> ParamVector:
        """Averaged weights, or the final weights when nothing was averaged."""
        return self.swa.mean if self.swa.count else self.theta


def _rngs(seed: int):
    ss = np.random.SeedSequence(seed)
    batch_ss, alpha_ss = ss.spawn(2)
    return np.random.Generator(np.random.PCG64(batch_ss)), np.random.Generator(np.random.PCG64(alpha_ss))


def train(cfg: TrainConfig, data, clip: ParamVector, bank: ClassPromptBank, model: ModelConfig,
          candidates: Sequence[int] | None = None, resume: TrainState | None = None,
          on_report: Callable[[LossReport], None] | None = None, stop_after: int | None = None,
          max_nonfinite: int = 10) -> TrainResult:
    """Fine-tune from ``clip`` on ``data`` (a VideoSet), returning final and averaged weights.

    ``stop_after`` halts after that many total updates and returns a state that
    ``resume`` continues bit-for-bit.
    """
    check_params(clip, model)
    candidates = sorted({int(c) for c in data.labels}) if candidates is None else list(candidates)
    n = len(data)
    spe = max(1, math.ceil(n / cfg.batch))
    total = total_steps(cfg, spe)
    dtype = tc._DTYPES[cfg.precision]
    with tc.precision(cfg.precision):
        clip = clip.astype(dtype)
        ctx = StepContext(model=model, text=bank.matrix(candidates).astype(dtype), candidates=candidates,
                          clip=clip, optimizer=make_optimizer(cfg))
        batch_rng, alpha_rng = _rngs(cfg.seed)
        if resume is None:
            step, theta, streak = 0, clip.copy(), 0
            swa = SwaState(start=default_swa_start(cfg, spe), cycle=cfg.swa_cycle,
                           snapshots=[] if cfg.keep_snapshots else None)
        else:
            step, theta, swa, streak = resume.step, resume.theta.astype(dtype), resume.swa, resume.nonfinite_streak
            ctx.optimizer.load(resume.optimizer_tensors, resume.optimizer_meta)
            batch_rng.bit_generator.state = resume.batch_rng
            alpha_rng.bit_generator.state = resume.alpha_rng
        reports: list[LossReport] = []
        pixels = data.pixels.astype(dtype, copy=False)
        while step < total and (stop_after is None or step < stop_after):
            idx = batch_rng.integers(0, n, size=cfg.batch)
            batch = VideoBatch(pixels[idx], data.labels[idx])
            alpha = sample_alpha(cfg.R, alpha_rng) if cfg.mode == "iwr" else None
            lr = cosine_lr(step, cfg, spe)
            step += 1
            try:
                if cfg.mode == "iwr":
                    theta, report = iwr_step(theta, batch, ctx, lr, cfg.C, alpha, step)
                elif cfg.mode == "l2":
                    theta, report = l2_reg_step(theta, batch, ctx, lr, cfg.mu, step)
                else:
                    theta, report = plain_step(theta, batch, ctx, lr, step)
                streak = 0
            except TrainingAborted as exc:
                streak += 1
                report = exc.report
                log.warning("step %d skipped: %s", step, exc)
                if streak > max_nonfinite:
                    raise TrainingAborted(f"{streak} consecutive non-finite steps; last at step {step}",
                                          report) from exc
            if cfg.swa and swa.due(step):
                swa = swa_update(swa, theta)
            reports.append(report)
            if on_report is not None:
                on_report(report)
        opt_t, opt_m = ctx.optimizer.state()
        state = TrainState(step=step, theta=theta, swa=swa, optimizer_tensors=opt_t, optimizer_meta=opt_m,
                           batch_rng=batch_rng.bit_generator.state, alpha_rng=alpha_rng.bit_generator.state,
                           nonfinite_streak=streak)
    return TrainResult(theta=theta, swa=swa, reports=reports, state=state)


def save_train_state(path, state: TrainState, model: ModelConfig, extra_meta: dict | None = None) -> str:
    entries = [(f"theta/{n}", a) for n, a in state.theta.items()]
    if state.swa.mean is not None:
        entries += [(f"swa/{n}", a) for n, a in state.swa.mean.items()]
    entries += sorted(state.optimizer_tensors.items())
    meta = {
        "step": state.step,
        "swa": {"start": state.swa.start, "cycle": state.swa.cycle, "count": state.swa.count},
        "optimizer": state.optimizer_meta,
        "batch_rng": state.batch_rng,
        "alpha_rng": state.alpha_rng,
        "nonfinite_streak": state.nonfinite_streak,
        **(extra_meta or {}),
    }
    return save_checkpoint(path, Checkpoint("trainstate", ParamVector(entries), model.to_dict(), meta))


def load_train_state(path, model: ModelConfig) -> tuple[TrainState, dict]:
    cp = load_checkpoint(path, expected_config=model.to_dict())
    if cp.role != "trainstate":
        raise ValueError(f"{path} holds a {cp.role!r} checkpoint, not a training state")
    p, m = cp.params, cp.meta

    def section(prefix):
        return [(n[len(prefix):], p[n]) for n in p if n.startswith(prefix)]

    theta = ParamVector(section("theta/"))
    swa_entries = section("swa/")
    swa = SwaState(start=m["swa"]["start"], cycle=m["swa"]["cycle"],
                   mean=ParamVector(swa_entries) if swa_entries else None, count=m["swa"]["count"])
    opt = {n: p[n] for n in p if n.startswith(("adam.", "sgd."))}
    state = TrainState(step=m["step"], theta=theta, swa=swa, optimizer_tensors=opt, optimizer_meta=m["optimizer"],
                       batch_rng=m["batch_rng"], alpha_rng=m["alpha_rng"], nonfinite_streak=m["nonfinite_streak"])
    return state, m
