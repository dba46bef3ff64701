"""Invariant suite behind ``tempclip check``.

Each check measures a deviation, compares it with its tolerance and reports
both; nothing here trains a model.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as tc
from .data import gen_static_video
from .evaluation import sweep_lambda, zero_shot_accuracy
from .model import ClassPromptBank, ModelConfig, TextEncoder, VideoBatch, encode_frames_imagewise, \
    encode_video, init_params
from .training import _targets, check_grad_identity, combined_objective, relative_deviation
from .weightspace import ParamVector, check_swa_commutation, interpolate

CHECK_MODEL = ModelConfig(embed_dim=16, num_layers=2, num_heads=2, frames_T=4)
NUM_CLASSES = 6


@dataclass
class CheckResult:
    name: str
    deviation: float
    tolerance: float
    seconds: float
    detail: str = ""

    @property
    def passed(self) -> bool:
        return bool(self.deviation <= self.tolerance)

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        extra = f"  {self.detail}" if self.detail else ""
        return f"{flag}  {self.name:<24} deviation={self.deviation:.3e}  tol={self.tolerance:.0e}  " \
               f"({self.seconds:.1f}s){extra}"


def _timed(name: str, tol: float, fn: Callable[[], tuple[float, str]]) -> CheckResult:
    t0 = time.perf_counter()
    dev, detail = fn()
    return CheckResult(name, dev, tol, time.perf_counter() - t0, detail)


def random_bank(dim: int, n: int = NUM_CLASSES, seed: int = 0) -> ClassPromptBank:
    return ClassPromptBank({i: ("class", f"c{i}") for i in range(n)}, TextEncoder(dim, seed))


def random_batch(cfg: ModelConfig, size: int, rng: np.random.Generator, n_classes: int = NUM_CLASSES) -> VideoBatch:
    px = rng.uniform(0.0, 1.0, size=(size, cfg.frames_T, cfg.frame_size, cfg.frame_size, cfg.channels))
    return VideoBatch(px, rng.integers(0, n_classes, size=size))


def perturbed(theta: ParamVector, rng: np.random.Generator, scale: float = 0.05) -> ParamVector:
    """theta plus Gaussian noise: a stand-in for fine-tuned weights near the pretrained ones."""
    return ParamVector((n, (a + rng.normal(0.0, scale, a.shape)).astype(a.dtype)) for n, a in theta.items())


def gradient_identity(cfg: ModelConfig = CHECK_MODEL, alphas=(0.1, 0.3, 0.59), batches: int = 5,
                      C: float = 0.5, batch_size: int = 4, seed: int = 0) -> tuple[float, str]:
    """Worst relative deviation between the two ways of differentiating the regularised loss."""
    rng = np.random.default_rng(seed)
    bank = random_bank(cfg.embed_dim, seed=seed)
    clip = init_params(cfg, seed)
    worst = 0.0
    for _ in range(batches):
        theta = perturbed(clip, rng)
        batch = random_batch(cfg, batch_size, rng)
        for a in alphas:
            worst = max(worst, check_grad_identity(theta, clip, batch, bank, cfg, a, C))
    return worst, f"{batches} batches x alpha {list(alphas)}"


def fd_relative_deviation(a: np.ndarray, b: np.ndarray, floor: float = 1e-3) -> float:
    """Like ``relative_deviation`` but coordinates smaller than ``floor`` x the largest are
    judged against that floor: central differences carry an absolute rounding error."""
    return relative_deviation(a, b, floor=floor)


def finite_differences(cfg: ModelConfig = CHECK_MODEL, coords: int = 64, alpha: float = 0.3, C: float = 0.5,
                       batch_size: int = 2, step: float = 1e-5, seed: int = 0) -> tuple[float, str]:
    """Backprop of the combined objective against central differences on sampled coordinates."""
    rng = np.random.default_rng(seed)
    bank = random_bank(cfg.embed_dim, seed=seed)
    cands = bank.class_ids
    with tc.precision("float64"):
        clip = init_params(cfg, seed).astype(np.float64)
        theta = perturbed(clip, rng)
        batch = random_batch(cfg, batch_size, rng)
        text = bank.matrix(cands)
        targets = _targets(batch, cands)
        total, P = combined_objective(theta, clip, batch, text, targets, cfg, alpha, C)
        bp = np.concatenate([g.reshape(-1) for g in tc.grad(total, P.values())])
        idx = np.sort(rng.choice(bp.size, size=min(coords, bp.size), replace=False))

        def f(flat):
            loss, _ = combined_objective(theta.from_flat(flat), clip, batch, text, targets, cfg, alpha, C)
            return loss.item()

        fd = tc.finite_difference_gradient(f, theta.to_flat(), step=step, coords=idx)
    return fd_relative_deviation(fd, bp[idx]), f"{idx.size} coordinates, step {step:g}"


def swa_commutation(precision: str, counts=(1, 8, 32), lams=(0.0, 0.5, 1.0), seed: int = 0,
                    cfg: ModelConfig = CHECK_MODEL) -> tuple[float, str]:
    """Averaging patched snapshots vs patching the average, worst coordinate."""
    rng = np.random.default_rng(seed)
    dt = tc._DTYPES[precision]
    with tc.precision(precision):
        theta_a = init_params(cfg, seed).astype(dt)
        worst = 0.0
        for n in counts:
            snaps = [perturbed(theta_a, rng, 0.1) for _ in range(n)]
            for lam in lams:
                worst = max(worst, check_swa_commutation(theta_a, snaps, lam))
    return worst, f"N {list(counts)} x lambda {list(lams)}"


def static_equivalence(cfg: ModelConfig = CHECK_MODEL.replace(window=1), videos: int = 20, thetas: int = 5,
                       seed: int = 0) -> tuple[float, str]:
    """Windowed video encoder vs per-frame image encoder on clips of repeated frames."""
    rng = np.random.default_rng(seed)
    frames = rng.uniform(0.0, 1.0, size=(videos, cfg.frame_size, cfg.frame_size, cfg.channels)).astype(np.float32)
    batch = VideoBatch(np.concatenate([gen_static_video(f, cfg.frames_T).pixels for f in frames]),
                       np.zeros(videos, dtype=np.int64))
    worst = 0.0
    for k in range(thetas):
        theta = init_params(cfg, seed + 1 + k)
        v = encode_video(batch, theta, cfg)
        i = encode_frames_imagewise(batch, theta, cfg)
        worst = max(worst, float(np.max(np.abs(v - i))))
    return worst, f"{videos} videos x {thetas} weight draws, window {cfg.window}"


def patch_endpoints(cfg: ModelConfig = CHECK_MODEL, seed: int = 0) -> tuple[float, str]:
    """Sweep scores at lambda 0 and 1 vs scoring the end and pretrained weights directly.

    The deviation is the number of mismatching scores plus the largest weight
    difference, so anything but a bit-exact match fails.
    """
    rng = np.random.default_rng(seed)
    bank = random_bank(cfg.embed_dim, seed=seed)
    clip = init_params(cfg, seed)
    end = perturbed(clip, rng, 0.2)
    cs = random_batch(cfg, 12, rng)
    zs = random_batch(cfg, 12, rng)
    cands = bank.class_ids
    curve = sweep_lambda(clip, end, [0.0, 1.0], (cs.pixels, cs.class_ids, cands),
                         (zs.pixels, zs.class_ids, cands), cfg, bank)
    direct = []
    for theta in (end, clip):
        direct.append((zero_shot_accuracy(cs.pixels, cs.class_ids, cands, theta, cfg, bank).top1,
                       zero_shot_accuracy(zs.pixels, zs.class_ids, cands, theta, cfg, bank).top1))
    swept = [(c, z) for _, c, z in curve.points]
    mismatches = sum(a != b for pair_s, pair_d in zip(swept, direct) for a, b in zip(pair_s, pair_d))
    wdev = max(max(float(np.max(np.abs(interpolate(clip, end, 0.0)[n] - end[n]))) for n in end),
               max(float(np.max(np.abs(interpolate(clip, end, 1.0)[n] - clip[n]))) for n in end))
    return float(mismatches) + wdev, f"{mismatches} of 4 scores differ"


def run_checks(level: str = "fast") -> list[CheckResult]:
    if level not in ("fast", "full"):
        raise ValueError(f"unknown check level {level!r}; choose 'fast' or 'full'")
    out = [
        _timed("gradient-identity", 1e-9, gradient_identity),
        _timed("swa-commutation-f32", 1e-6, lambda: swa_commutation("float32")),
        _timed("swa-commutation-f64", 1e-12, lambda: swa_commutation("float64")),
        _timed("static-equivalence", 1e-5, static_equivalence),
        _timed("patch-endpoints", 0.0, patch_endpoints),
    ]
    if level == "full":
        out.append(_timed("finite-differences", 1e-6, finite_differences))
        out.append(_timed("finite-differences-w0", 1e-6,
                          lambda: finite_differences(CHECK_MODEL.replace(window=0), seed=1)))
    return out
