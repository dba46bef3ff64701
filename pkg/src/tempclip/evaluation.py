"""Zero-shot / close-set accuracy, retrieval recall and interpolation sweeps."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .model import ClassPromptBank, ModelConfig, check_params, cosine_matrix, encode_in_chunks
from .weightspace import ParamVector, interpolate

DEFAULT_LAMBDA_GRID = (0.0, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8)


@dataclass
class Metrics:
    top1: float
    top5: float
    n_samples: int
    per_class: dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class"] = {str(k): v for k, v in self.per_class.items()}
        return d


@dataclass
class SummaryMetrics:
    """Mean and standard deviation over repeated class subsets."""

    top1_mean: float
    top1_std: float
    top5_mean: float
    top5_std: float
    repeats: list[Metrics]

    def to_dict(self) -> dict:
        return {"top1_mean": self.top1_mean, "top1_std": self.top1_std,
                "top5_mean": self.top5_mean, "top5_std": self.top5_std,
                "repeats": [{"top1": m.top1, "top5": m.top5, "n_samples": m.n_samples} for m in self.repeats]}


@dataclass
class TradeoffCurve:
    points: list[tuple[float, float, float]]  # (lambda, close-set top1, zero-shot top1)

    def __post_init__(self):
        lams = [p[0] for p in self.points]
        if any(b <= a for a, b in zip(lams, lams[1:])):
            raise ValueError("lambda values must be strictly increasing")
        for lam, c, z in self.points:
            if not (0.0 <= c <= 1.0 and 0.0 <= z <= 1.0):
                raise ValueError(f"accuracy outside [0, 1] at lambda={lam}")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["lambda", "closeset_top1", "zeroshot_top1"])
        for lam, c, z in self.points:
            w.writerow([repr(float(lam)), repr(float(c)), repr(float(z))])
        return buf.getvalue()

    def best_zeroshot(self, min_closeset: float) -> float | None:
        """Highest zero-shot accuracy among points whose close-set accuracy reaches ``min_closeset``."""
        ok = [z for _, c, z in self.points if c >= min_closeset]
        return max(ok) if ok else None


def predict_ranks(embeddings: np.ndarray, text: np.ndarray) -> np.ndarray:
    """Candidate indices sorted by decreasing cosine; ties go to the lower index."""
    sims = cosine_matrix(embeddings, text)
    return np.argsort(-sims, axis=1, kind="stable")


def accuracy_from_embeddings(embeddings: np.ndarray, labels: Sequence[int], candidates: Sequence[int],
                             bank: ClassPromptBank) -> Metrics:
    candidates = sorted(int(c) for c in candidates)
    labels = np.asarray(labels, dtype=np.int64)
    pos = {c: i for i, c in enumerate(candidates)}
    outside = sorted({int(l) for l in labels} - set(pos))
    if outside:
        raise ValueError(f"labels {outside} are not in the candidate set")
    target = np.array([pos[int(l)] for l in labels])
    ranks = predict_ranks(embeddings, bank.matrix(candidates))
    hit1 = ranks[:, 0] == target
    hit5 = (ranks[:, :5] == target[:, None]).any(axis=1)
    per_class = {int(c): float(hit1[labels == c].mean()) for c in np.unique(labels)}
    return Metrics(top1=float(hit1.mean()), top5=float(hit5.mean()), n_samples=int(labels.size),
                   per_class=per_class)


def embed(pixels: np.ndarray, theta: ParamVector, cfg: ModelConfig) -> np.ndarray:
    check_params(theta, cfg)
    return encode_in_chunks(pixels, theta, cfg)


def zero_shot_accuracy(videos, labels, candidates, theta: ParamVector, cfg: ModelConfig,
                       bank: ClassPromptBank) -> Metrics:
    """Top-1/top-5 by cosine similarity against the candidate prompts."""
    outside = sorted({int(l) for l in labels} - {int(c) for c in candidates})
    if outside:
        raise ValueError(f"labels {outside} are not in the candidate set")
    return accuracy_from_embeddings(embed(videos, theta, cfg), labels, candidates, bank)


def ep1_from_embeddings(embeddings, labels, class_set, bank, repeats: int = 10, seed: int = 0) -> SummaryMetrics:
    class_set = sorted(int(c) for c in class_set)
    if len(class_set) < 2:
        raise ValueError("need at least two classes")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    runs = []
    for _ in range(repeats):
        half = sorted(rng.choice(class_set, size=len(class_set) // 2, replace=False).tolist())
        keep = np.isin(labels, half)
        runs.append(accuracy_from_embeddings(embeddings[keep], labels[keep], half, bank))
    t1 = np.array([m.top1 for m in runs])
    t5 = np.array([m.top5 for m in runs])
    return SummaryMetrics(float(t1.mean()), float(t1.std()), float(t5.mean()), float(t5.std()), runs)


def ep1_eval(videos, labels, class_set, theta, cfg, bank, repeats: int = 10, seed: int = 0) -> SummaryMetrics:
    """Random half of the classes as candidates, repeated; mean and std of accuracy."""
    labels = np.asarray(labels)
    keep = np.isin(labels, list(class_set))
    return ep1_from_embeddings(embed(videos[keep], theta, cfg), labels[keep], class_set, bank, repeats, seed)


def retrieval_recall(video_emb: np.ndarray, text_emb: np.ndarray, pairs: Sequence[tuple[int, int]],
                     N: int) -> dict:
    """Recall@N in both directions for a one-to-one video/text pairing."""
    if N < 1:
        raise ValueError("N must be >= 1")
    pairs = [(int(a), int(b)) for a, b in pairs]
    vids = [a for a, _ in pairs]
    txts = [b for _, b in pairs]
    if len(set(vids)) != len(vids) or len(set(txts)) != len(txts):
        raise ValueError("pairs must be a bijection")
    sims = cosine_matrix(np.asarray(video_emb)[vids], np.asarray(text_emb)[txts])
    v2t = np.argsort(-sims, axis=1, kind="stable")[:, :N]
    t2v = np.argsort(-sims.T, axis=1, kind="stable")[:, :N]
    idx = np.arange(len(pairs))[:, None]
    return {"t2v": float((t2v == idx).any(axis=1).mean()), "v2t": float((v2t == idx).any(axis=1).mean()),
            "N": N}


def sweep_lambda(theta_clip: ParamVector, theta_end: ParamVector, grid: Sequence[float], closeset, zeroshot,
                 cfg: ModelConfig, bank: ClassPromptBank) -> TradeoffCurve:
    """Patch at every ratio in ``grid`` and score both axes.

    ``closeset`` / ``zeroshot`` are (pixels, labels, candidates) triples.
    """
    grid = sorted(float(g) for g in grid)
    if any(not 0.0 <= g <= 1.0 for g in grid):
        raise ValueError("grid values must lie in [0, 1]")
    points = []
    for lam in grid:
        theta = interpolate(theta_clip, theta_end, lam)
        c = zero_shot_accuracy(*closeset[:2], closeset[2], theta, cfg, bank).top1
        z = zero_shot_accuracy(*zeroshot[:2], zeroshot[2], theta, cfg, bank).top1
        points.append((lam, c, z))
    return TradeoffCurve(points)


def metrics_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)
