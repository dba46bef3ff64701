"""End-to-end pipelines: pretrain the image model, fine-tune on video, patch, score.

The presets here are the reduced scale used by the behavioural checks; every
one of them is an ordinary ``ModelConfig`` / ``TrainConfig`` and can be
overridden.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Dataset, SyntheticVideoSpec, VideoSet, gen_dataset, motion_pairs
from .evaluation import DEFAULT_LAMBDA_GRID, TradeoffCurve, sweep_lambda, zero_shot_accuracy
from .model import ClassPromptBank, ModelConfig, init_params
from .training import TrainConfig, TrainResult, train
from .weightspace import ParamVector

SMALL_MODEL = ModelConfig(embed_dim=32, num_layers=2, num_heads=2, frames_T=4)

STUDY_COUNTS = {"train": 100, "eval": 100}

PRETRAIN = TrainConfig(lr_init=2e-3, lr_final=2e-5, warmup_lr=2e-5, warmup_epochs=1, epochs=40,
                       batch=32, mode="plain", swa=False)

# long enough that plain fine-tuning saturates the close-set task
FINETUNE = TrainConfig(lr_init=2e-3, lr_final=2e-5, warmup_lr=2e-5, warmup_epochs=1, epochs=80,
                       batch=16, mode="iwr", swa=True, swa_cycle=5)

PAIR_TRAIN = TrainConfig(lr_init=2e-3, lr_final=2e-5, warmup_lr=2e-5, warmup_epochs=1, epochs=20,
                         batch=32, mode="plain", swa=False)

L2_MUS = (1e-4, 1e-3, 1e-2)


@dataclass
class Benchmark:
    """A dataset with its prompt bank and the three evaluation views."""

    data: Dataset
    bank: ClassPromptBank

    @classmethod
    def build(cls, data: Dataset, model: ModelConfig, text_seed: int = 0) -> "Benchmark":
        return cls(data, data.bank(model.embed_dim, text_seed))

    @classmethod
    def generate(cls, seed: int, model: ModelConfig = SMALL_MODEL, counts: dict = STUDY_COUNTS) -> "Benchmark":
        spec = SyntheticVideoSpec(frame_size=model.frame_size, frames_T=model.frames_T)
        return cls.build(gen_dataset(spec, counts, seed=seed), model)

    @property
    def closeset(self):
        """Fine-tuning classes, scored against the fine-tuning prompts."""
        vs = self.data.splits["finetune/eval"]
        return vs.pixels, vs.labels, self.data.pool_ids("finetune")

    @property
    def zeroshot(self):
        """Every held-out clip, scored against all held-out prompts."""
        vs = self.data.splits["zeroshot/eval"]
        return vs.pixels, vs.labels, self.data.pool_ids("zeroshot")

    @property
    def heldout_static(self):
        """Held-out colour/shape photos only, still scored against all held-out prompts."""
        static = [c.id for c in self.data.pool("zeroshot") if c.motion is None]
        vs = self.data.splits["zeroshot/eval"].where(static)
        return vs.pixels, vs.labels, self.data.pool_ids("zeroshot")

    def score(self, view, theta: ParamVector, model: ModelConfig) -> float:
        pixels, labels, cands = view
        return zero_shot_accuracy(pixels, labels, cands, theta, model, self.bank).top1


def pretrain(bench: Benchmark, model: ModelConfig, cfg: TrainConfig = PRETRAIN, seed: int = 0) -> TrainResult:
    """Image model trained from scratch on single-frame photos of the pretraining pool."""
    image_model = model.replace(frames_T=1)
    theta0 = init_params(image_model, seed)
    return train(cfg.replace(seed=seed), bench.data.splits["pretrain/train"], theta0, bench.bank, image_model,
                 candidates=bench.data.pool_ids("pretrain"))


def finetune(bench: Benchmark, clip: ParamVector, model: ModelConfig, cfg: TrainConfig = FINETUNE,
             data: VideoSet | None = None, candidates: Sequence[int] | None = None) -> TrainResult:
    data = bench.data.splits["finetune/train"] if data is None else data
    candidates = bench.data.pool_ids("finetune") if candidates is None else candidates
    return train(cfg, data, clip, bench.bank, model, candidates=candidates)


def end_weights(result: TrainResult, cfg: TrainConfig) -> ParamVector:
    """What a run hands to patching: the weight average when SWA is on, else the last iterate."""
    return result.swa_params if cfg.swa else result.theta


def tradeoff(bench: Benchmark, clip: ParamVector, end: ParamVector, model: ModelConfig,
             grid: Sequence[float] = DEFAULT_LAMBDA_GRID) -> TradeoffCurve:
    return sweep_lambda(clip, end, grid, bench.closeset, bench.zeroshot, model, bench.bank)


def best_zeroshot_matched(curve: TradeoffCurve, reference_closeset: float, tol: float = 0.02) -> float | None:
    """Best zero-shot accuracy among curve points within ``tol`` of (or above) a reference close-set score."""
    return curve.best_zeroshot(reference_closeset - tol)


@dataclass
class PairResult:
    pair: tuple[int, int]
    accuracy: dict[int, float] = field(default_factory=dict)  # window -> pairwise accuracy


def temporal_pair(bench: Benchmark, clip: ParamVector, model: ModelConfig, cfg: TrainConfig = PAIR_TRAIN,
                  windows: Sequence[int] = (1, 0), pair: tuple[int, int] | None = None) -> PairResult:
    """Fine-tune on one direction-only class pair with each window and score it on held-out clips."""
    pair = motion_pairs(bench.data.classes)[0] if pair is None else tuple(pair)
    train_vs = bench.data.splits["finetune/train"].where(pair)
    eval_vs = bench.data.splits["finetune/eval"].where(pair)
    out = PairResult(pair)
    for w in windows:
        mw = model.replace(window=w)
        res = train(cfg, train_vs, clip, bench.bank, mw, candidates=list(pair))
        theta = end_weights(res, cfg)
        out.accuracy[w] = zero_shot_accuracy(eval_vs.pixels, eval_vs.labels, pair, theta, mw, bench.bank).top1
    return out


def seed_medians(values: Sequence[float]) -> float:
    return float(np.median(np.asarray(values, dtype=np.float64)))


@dataclass
class Study:
    """One seed of the forgetting study: every fine-tuning variant started from the same image model.

    ``curves`` holds patching sweeps keyed by variant: ``plain``, ``swa`` (plain
    trajectory, averaged), ``iwr`` (last iterate) and ``ovclip`` (IWR
    trajectory, averaged).  ``l2`` maps each penalty weight to the
    (close-set, zero-shot) scores of its final weights.
    """

    seed: int
    static_pretrained: float
    static_plain: float
    curves: dict[str, TradeoffCurve]
    l2: dict[float, tuple[float, float]]
    seconds: float

    @property
    def plain_point(self) -> tuple[float, float]:
        _, c, z = self.curves["plain"].points[0]
        return c, z


def forgetting_study(seed: int, model: ModelConfig = SMALL_MODEL, cfg: TrainConfig = FINETUNE,
                     mus: Sequence[float] = L2_MUS, bench: Benchmark | None = None,
                     clip: ParamVector | None = None) -> Study:
    t0 = time.perf_counter()
    bench = Benchmark.generate(seed, model) if bench is None else bench
    clip = pretrain(bench, model, seed=seed).theta if clip is None else clip
    cfg = cfg.replace(seed=seed)
    # one trajectory yields both its last iterate and its running average
    plain = finetune(bench, clip, model, cfg.replace(mode="plain", swa=True))
    iwr = finetune(bench, clip, model, cfg.replace(mode="iwr", swa=True))
    ends = {"plain": plain.theta, "swa": plain.swa_params, "iwr": iwr.theta, "ovclip": iwr.swa_params}
    curves = {k: tradeoff(bench, clip, v, model) for k, v in ends.items()}
    l2 = {}
    for mu in mus:
        end = finetune(bench, clip, model, cfg.replace(mode="l2", mu=mu, swa=False)).theta
        l2[mu] = (bench.score(bench.closeset, end, model), bench.score(bench.zeroshot, end, model))
    static = [bench.score(bench.heldout_static, theta, model) for theta in (clip, ends["plain"])]
    return Study(seed, static[0], static[1], curves, l2, time.perf_counter() - t0)
