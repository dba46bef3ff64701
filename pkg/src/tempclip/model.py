"""Toy video-text dual encoder.

Visual side: a pre-norm ViT applied to every frame with one shared spatial
position table.  Self-attention keys/values are gathered from the frames
inside a symmetric temporal window, clipped to the clip boundaries, so the
video model has exactly the image model's parameters.

Text side: frozen.  A prompt embeds as the sum of seeded per-token vectors,
mixed by a fixed orthogonal map and L2-normalised.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, fields
from typing import Mapping, Sequence

import numpy as np

from . import tensor as tc
from .tensor import Tensor
from .weightspace import IncompatibleParamsError, ParamVector


@dataclass(frozen=True)
class ModelConfig:
    frame_size: int = 16
    patch_size: int = 4
    channels: int = 3
    frames_T: int = 8
    embed_dim: int = 64
    num_layers: int = 4
    num_heads: int = 4
    window: int = 1
    temperature: float = 0.07
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.frame_size % self.patch_size:
            raise ValueError("frame_size must be divisible by patch_size")
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.window < 0:
            raise ValueError("window radius must be >= 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if min(self.frames_T, self.num_layers, self.channels, self.mlp_ratio) < 1:
            raise ValueError("frames_T, num_layers, channels and mlp_ratio must be >= 1")

    @property
    def num_patches(self) -> int:
        return (self.frame_size // self.patch_size) ** 2

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "ModelConfig":
        return ModelConfig(**{**self.to_dict(), **kw})

    def architecture(self) -> dict:
        """Fields that determine the parameter layout (window/T/τ do not)."""
        d = self.to_dict()
        for k in ("frames_T", "window", "temperature"):
            d.pop(k)
        return d


@dataclass
class VideoBatch:
    pixels: np.ndarray  # B x T x H x W x C in [0, 1]
    class_ids: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64)
        if self.pixels.ndim != 5:
            raise ValueError(f"pixels must be B x T x H x W x C, got shape {self.pixels.shape}")
        if self.class_ids.shape != (self.pixels.shape[0],):
            raise ValueError("need one class id per video")
        if not np.isfinite(self.pixels).all():
            raise ValueError("pixels must be finite")

    def __len__(self):
        return self.pixels.shape[0]

    def subset(self, idx) -> "VideoBatch":
        return VideoBatch(self.pixels[idx], self.class_ids[idx])


# -- parameters ----------------------------------------------------------------

def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, p, c = cfg.embed_dim, cfg.patch_size, cfg.channels
    h = cfg.mlp_ratio * d
    out = [
        ("patch.weight", (p * p * c, d)),
        ("patch.bias", (d,)),
        ("cls", (d,)),
        ("pos", (cfg.seq_len, d)),
        ("ln_pre.gain", (d,)),
        ("ln_pre.bias", (d,)),
    ]
    for i in range(cfg.num_layers):
        b = f"blocks.{i}."
        out += [
            (b + "ln1.gain", (d,)), (b + "ln1.bias", (d,)),
            (b + "attn.q.weight", (d, d)), (b + "attn.q.bias", (d,)),
            (b + "attn.k.weight", (d, d)), (b + "attn.k.bias", (d,)),
            (b + "attn.v.weight", (d, d)), (b + "attn.v.bias", (d,)),
            (b + "attn.out.weight", (d, d)), (b + "attn.out.bias", (d,)),
            (b + "ln2.gain", (d,)), (b + "ln2.bias", (d,)),
            (b + "mlp.fc1.weight", (d, h)), (b + "mlp.fc1.bias", (h,)),
            (b + "mlp.fc2.weight", (h, d)), (b + "mlp.fc2.bias", (d,)),
        ]
    out += [("ln_post.gain", (d,)), ("ln_post.bias", (d,)), ("proj", (d, d))]
    return out


def init_params(cfg: ModelConfig, seed: int) -> ParamVector:
    rng = np.random.default_rng(seed)
    dt = tc.get_dtype()
    out = []
    for name, shape in param_shapes(cfg):
        if name.endswith(".gain"):
            arr = np.ones(shape)
        elif name.endswith(".bias"):
            arr = np.zeros(shape)
        elif name in ("cls", "pos"):
            arr = rng.normal(0.0, 0.02, shape)
        elif name.endswith("out.weight") or name.endswith("fc2.weight"):
            arr = rng.normal(0.0, 0.02 / math.sqrt(2 * cfg.num_layers), shape)
        else:
            arr = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), shape)
        out.append((name, arr.astype(dt)))
    return ParamVector(out)


def check_params(theta: ParamVector, cfg: ModelConfig) -> None:
    expected = param_shapes(cfg)
    names = [n for n, _ in expected]
    if list(theta.names) != names:
        missing = sorted(set(names) - set(theta.names))
        extra = sorted(set(theta.names) - set(names))
        raise IncompatibleParamsError(f"parameter names do not match model: missing {missing}, extra {extra}")
    for n, shape in expected:
        if theta[n].shape != shape:
            raise IncompatibleParamsError(f"{n!r}: shape {theta[n].shape}, model expects {shape}")


def as_tensors(theta: ParamVector, requires_grad: bool = False) -> dict[str, Tensor]:
    return {n: Tensor(a, requires_grad=requires_grad) for n, a in theta.items()}


# -- visual encoder ------------------------------------------------------------

def patchify(pixels: np.ndarray, patch: int) -> np.ndarray:
    """B x T x H x W x C -> B x T x P x (patch*patch*C), row-major patches."""
    b, t, h, w, c = pixels.shape
    x = pixels.reshape(b, t, h // patch, patch, w // patch, patch, c)
    x = x.transpose(0, 1, 2, 4, 3, 5, 6)
    return x.reshape(b, t, (h // patch) * (w // patch), patch * patch * c)


def _check_pixels(pixels: np.ndarray, cfg: ModelConfig, frames: int | None = None) -> None:
    want = (cfg.frame_size, cfg.frame_size, cfg.channels)
    if pixels.ndim != 5 or pixels.shape[2:] != want:
        raise ValueError(f"expected B x T x {want}, got {pixels.shape}")
    if frames is not None and pixels.shape[1] != frames:
        raise ValueError(f"expected {frames} frames, got {pixels.shape[1]}")


def patch_embed(pixels: np.ndarray, P: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Token grid B x T x S x d: [class token, patches] + spatial positions, per frame."""
    _check_pixels(pixels, cfg)
    b, t = pixels.shape[:2]
    patches = Tensor(patchify(pixels, cfg.patch_size))
    x = tc.linear(patches, P["patch.weight"], P["patch.bias"])  # B,T,N,d
    cls = tc.reshape(tc.tile_leading(P["cls"], b * t), (b, t, 1, cfg.embed_dim))
    x = tc.concat([cls, x], axis=2)
    return tc.add_bias(x, P["pos"])


def window_indices(frames: int, window: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame key frames (T x (2w+1)) and a validity mask of the same shape.

    Frames outside [0, T-1] are clipped to an in-range index and marked
    invalid; the attention masks them out, which leaves the window
    intersected with the clip rather than padded.
    """
    offs = np.arange(-window, window + 1)
    raw = np.arange(frames)[:, None] + offs[None, :]
    valid = (raw >= 0) & (raw < frames)
    return np.clip(raw, 0, frames - 1), valid


def windowed_attention(q: Tensor, k: Tensor, v: Tensor, window: int) -> Tensor:
    """Attention of every query over keys/values from frames t-w..t+w.

    q, k, v: B x H x T x S x dh.  Returns B x H x T x S x dh.
    """
    b, h, t, s, dh = q.shape
    if window == 0 or t == 1:
        kw, vw, mask = k, v, None
    else:
        idx, valid = window_indices(t, window)
        kw = tc.concat([tc.take(k, idx[:, j], axis=2) for j in range(idx.shape[1])], axis=3)
        vw = tc.concat([tc.take(v, idx[:, j], axis=2) for j in range(idx.shape[1])], axis=3)
        if valid.all():
            mask = None
        else:
            # -inf is avoided so the logits stay finite; exp underflows to exactly 0
            mask = np.where(np.repeat(valid, s, axis=1), 0.0, -1e30)[:, None, :]
    logits = tc.scale(tc.matmul(q, tc.swap_last(kw)), 1.0 / math.sqrt(dh))
    if mask is not None:
        logits = tc.add_const(logits, mask)
    return tc.matmul(tc.softmax(logits, axis=-1), vw)


def temporal_self_attention(x: Tensor, P: Mapping[str, Tensor], prefix: str,
                            num_heads: int, window: int) -> Tensor:
    """Multi-head self-attention over B x T x S x d tokens with a temporal window."""
    b, t, s, d = x.shape
    dh = d // num_heads

    def heads(name):
        y = tc.linear(x, P[prefix + name + ".weight"], P[prefix + name + ".bias"])
        return tc.transpose(tc.reshape(y, (b, t, s, num_heads, dh)), (0, 3, 1, 2, 4))

    y = windowed_attention(heads("q"), heads("k"), heads("v"), window)
    y = tc.reshape(tc.transpose(y, (0, 2, 3, 1, 4)), (b, t, s, d))
    return tc.linear(y, P[prefix + "out.weight"], P[prefix + "out.bias"])


def frame_features(P: Mapping[str, Tensor], pixels: np.ndarray, cfg: ModelConfig,
                   window: int | None = None) -> Tensor:
    """Per-frame class-token outputs after the final block and ln_post: B x T x d."""
    w = cfg.window if window is None else window
    x = patch_embed(pixels, P, cfg)
    x = tc.layer_norm(x, P["ln_pre.gain"], P["ln_pre.bias"])
    for i in range(cfg.num_layers):
        pre = f"blocks.{i}."
        hN = tc.layer_norm(x, P[pre + "ln1.gain"], P[pre + "ln1.bias"])
        x = x + temporal_self_attention(hN, P, pre + "attn.", cfg.num_heads, w)
        hN = tc.layer_norm(x, P[pre + "ln2.gain"], P[pre + "ln2.bias"])
        hN = tc.gelu(tc.linear(hN, P[pre + "mlp.fc1.weight"], P[pre + "mlp.fc1.bias"]))
        x = x + tc.linear(hN, P[pre + "mlp.fc2.weight"], P[pre + "mlp.fc2.bias"])
    b, t = pixels.shape[:2]
    cls = tc.reshape(tc.take(x, [0], axis=2), (b, t, cfg.embed_dim))
    return tc.layer_norm(cls, P["ln_post.gain"], P["ln_post.bias"])


def video_embedding(P: Mapping[str, Tensor], pixels: np.ndarray, cfg: ModelConfig,
                    window: int | None = None) -> Tensor:
    """Mean over frames of the class-token features, then the output projection."""
    return tc.matmul(tc.mean(frame_features(P, pixels, cfg, window), axis=1), P["proj"])


def encode_video(video: VideoBatch, theta: ParamVector, cfg: ModelConfig) -> np.ndarray:
    check_params(theta, cfg)
    _check_pixels(video.pixels, cfg, cfg.frames_T)
    return video_embedding(as_tensors(theta), video.pixels, cfg).data


def encode_frames_imagewise(video: VideoBatch, theta: ParamVector, cfg: ModelConfig) -> np.ndarray:
    """Image-model baseline: every frame encoded on its own, then averaged."""
    check_params(theta, cfg)
    _check_pixels(video.pixels, cfg, cfg.frames_T)
    return video_embedding(as_tensors(theta), video.pixels, cfg, window=0).data


def encode_in_chunks(pixels: np.ndarray, theta: ParamVector, cfg: ModelConfig,
                     window: int | None = None, chunk: int = 64) -> np.ndarray:
    P = as_tensors(theta)
    parts = [video_embedding(P, pixels[i:i + chunk], cfg, window).data
             for i in range(0, pixels.shape[0], chunk)]
    return np.concatenate(parts, axis=0)


def similarity(v: np.ndarray, t: np.ndarray) -> float:
    v = np.asarray(v, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    nv, nt = np.linalg.norm(v), np.linalg.norm(t)
    if nv == 0 or nt == 0:
        raise ZeroDivisionError("cosine similarity of a zero vector")
    return float(np.clip(np.dot(v, t) / (nv * nt), -1.0, 1.0))


def cosine_matrix(v: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarities, rows of v against rows of t."""
    v = np.asarray(v, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    nv = np.linalg.norm(v, axis=1, keepdims=True)
    nt = np.linalg.norm(t, axis=1, keepdims=True)
    if (nv == 0).any() or (nt == 0).any():
        raise ZeroDivisionError("cosine similarity of a zero vector")
    return (v / nv) @ (t / nt).T


# -- frozen text encoder ---------------------------------------------------------

class TextEncoder:
    """Frozen bag-of-tokens encoder with seeded per-token vectors."""

    def __init__(self, dim: int, seed: int = 0):
        self.dim = dim
        self.seed = seed
        q, r = np.linalg.qr(np.random.default_rng([seed, 7]).normal(size=(dim, dim)))
        self.mixer = q * np.sign(np.diag(r))

    def token_vector(self, token: str) -> np.ndarray:
        h = hashlib.sha256(f"{self.seed}:{token}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(h[:8], "little"))
        return rng.normal(0.0, 1.0 / math.sqrt(self.dim), self.dim)

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        if not tokens:
            raise ValueError("empty prompt")
        s = np.sum([self.token_vector(tok) for tok in tokens], axis=0)
        y = self.mixer @ s
        return y / np.linalg.norm(y)


class ClassPromptBank:
    """Frozen unit-norm prompt embeddings for every registered class."""

    def __init__(self, prompts: Mapping[int, Sequence[str]], encoder: TextEncoder):
        self.encoder = encoder
        self.tokens = {int(c): tuple(t) for c, t in prompts.items()}
        self.class_ids = sorted(self.tokens)
        self._row = {c: i for i, c in enumerate(self.class_ids)}
        self._emb = np.stack([encoder.encode(self.tokens[c]) for c in self.class_ids])
        self._emb.setflags(write=False)

    def __contains__(self, cid) -> bool:
        return int(cid) in self._row

    def __len__(self):
        return len(self.class_ids)

    def encode_text(self, cid: int) -> np.ndarray:
        if int(cid) not in self._row:
            raise KeyError(f"class id {cid} is not in the prompt bank")
        return self._emb[self._row[int(cid)]].copy()

    def matrix(self, cids: Sequence[int]) -> np.ndarray:
        missing = [c for c in cids if int(c) not in self._row]
        if missing:
            raise KeyError(f"class ids not in the prompt bank: {missing}")
        return self._emb[[self._row[int(c)] for c in cids]]

    def digest(self) -> str:
        return hashlib.sha256(self._emb.tobytes()).hexdigest()
