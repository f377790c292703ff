"""Time-aware compression of the previous-frame window, and the class-token cache."""

from __future__ import annotations

import hashlib
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .backbone import Backbone, ConditionEmbedder
from .blobio import read_blob, write_blob
from .nn import MLP, Module, Parameter


@dataclass(frozen=True)
class MemoryConfig:
    enabled: bool = True
    t_mem: int = 32
    d_t: int = 24
    te_octaves: int = 6
    q_bar_dim: int = 32
    d_m: int = 64
    frame_hidden: int = 64
    agg_hidden: int = 128
    cond_hidden: int = 16
    cond_embed_dim: int = 16

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MemoryWindow:
    """Previous ``t_mem`` frames of one trial, oldest first (slot s holds lag s - t_mem)."""

    frames: np.ndarray  # [t_mem] trial indices, -1 for a padded blank
    conditions: np.ndarray  # [t_mem, d_c]
    blank_mask: np.ndarray  # [t_mem] bool

    def __post_init__(self):
        if not (len(self.frames) == len(self.conditions) == len(self.blank_mask)):
            raise ShapeError("window fields must share length t_mem")


def time_features(t_mem: int, octaves: int = 6, lags=None) -> np.ndarray:
    """Sinusoidal embedding of |t|/t_mem for t = -t_mem..-1 (oldest first): [t_mem, 2*octaves]."""
    lags = np.arange(-t_mem, 0) if lags is None else np.atleast_1d(np.asarray(lags))
    if np.any(lags >= 0) or np.any(lags < -t_mem):
        raise ValueError(f"lag index outside -{t_mem}..-1: {lags.tolist()}")
    tau = np.abs(lags).astype(np.float64) / t_mem
    ang = tau[:, None] * (2.0 ** np.arange(octaves) * np.pi)[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class MemoryCompressor(Module):
    """h_bar = MLP(concat_t MLP(q_t, e_t, TE(t) w_s)) over the whole window."""

    def __init__(self, config: MemoryConfig, token_dim: int, cond_dim: int, n_subjects: int,
                 rng: np.random.Generator):
        self.config = config
        self.n_subjects = n_subjects
        te_dim = 2 * config.te_octaves
        self.w_time = Parameter(rng.normal(0.0, 1.0 / np.sqrt(te_dim), size=(n_subjects, te_dim, config.d_t)))
        self.cond = ConditionEmbedder(cond_dim, config.cond_hidden, config.cond_embed_dim, n_subjects, rng)
        self.frame_mlp = MLP([token_dim + config.cond_embed_dim + config.d_t, config.frame_hidden,
                              config.q_bar_dim], rng)
        self.agg_mlp = MLP([config.t_mem * config.q_bar_dim, config.agg_hidden, config.d_m], rng)
        self._te = time_features(config.t_mem, config.te_octaves)
        # per-dimension token standardization, fitted once on the training images
        self.token_mean = Parameter(np.zeros(token_dim), frozen=True)
        self.token_inv_std = Parameter(np.ones(token_dim), frozen=True)
        self.token_fitted = Parameter(np.zeros(1), frozen=True)

    @property
    def stats_fitted(self) -> bool:
        return bool(self.token_fitted.data[0])

    def fit_token_stats(self, tokens: np.ndarray, eps: float = 1e-8) -> None:
        """Class tokens vary little around a large shared offset; centre and scale each dimension."""
        tokens = np.asarray(tokens, dtype=np.float64)
        self.token_mean.data = tokens.mean(axis=0)
        self.token_inv_std.data = 1.0 / (tokens.std(axis=0) + eps)
        self.token_fitted.data = np.ones(1)

    def time_embed(self, t, subject: int) -> Tensor:
        """TE(|t|) w_s for one lag index t in -t_mem..-1 (or an array of them)."""
        if not 0 <= int(subject) < self.n_subjects:
            raise KeyError(f"unknown subject {subject}")
        feats = time_features(self.config.t_mem, self.config.te_octaves, t)
        out = ad.matmul(Tensor(feats), self.w_time[int(subject)])
        return out.reshape(out.shape[-1]) if np.ndim(t) == 0 else out

    def compress(self, tokens, conditions, subject) -> Tensor:
        """tokens [B, T, D'], conditions [B, T, d_c], subject [B] -> h_bar [B, d_m]."""
        tokens = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
        conditions = conditions if isinstance(conditions, Tensor) else Tensor(conditions)
        single = tokens.ndim == 2
        if single:
            tokens = tokens.reshape(1, *tokens.shape)
            conditions = conditions.reshape(1, *conditions.shape)
        b, t, dq = tokens.shape
        if t != self.config.t_mem or conditions.shape[:2] != (b, t):
            raise ShapeError(f"window length {t} / conditions {conditions.shape} vs t_mem {self.config.t_mem}")
        subject = np.broadcast_to(np.atleast_1d(np.asarray(subject, dtype=np.int64)), (b,))
        if subject.min() < 0 or subject.max() >= self.n_subjects:
            raise KeyError(f"unknown subject id in {sorted(set(subject.tolist()))}")
        tokens = ad.sub(tokens, self.token_mean)
        tokens = ad.mul(tokens, ad.expand(self.token_inv_std.reshape(1, 1, dq), (b, t, dq)))
        te = ad.expand(Tensor(self._te).reshape(1, t, self._te.shape[1]), (b, t, self._te.shape[1]))
        t_check = ad.matmul(te, ad.take_rows(self.w_time, subject))  # [B, T, d_t]
        dc = conditions.shape[-1]
        e = self.cond(conditions.reshape(b * t, dc), np.repeat(subject, t)).reshape(b, t, -1)
        q_bar = self.frame_mlp(ad.concat([tokens, e, t_check], axis=-1))  # [B, T, q_bar]
        h = self.agg_mlp(q_bar.reshape(b, t * q_bar.shape[-1]))
        return h.reshape(h.shape[-1]) if single else h

    __call__ = compress


def image_hash(img: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(img, dtype=np.float64).tobytes()).hexdigest()


class TokenCache:
    """Content-addressed cache of backbone outputs keyed by (image hash, ViT weight hash).

    Stores the raw tap token grids and the final class token for each image.
    ``forwards`` counts backbone image evaluations, ``hits`` cache hits.
    """

    def __init__(self, backbone: Backbone, batch_size: int = 64):
        self.backbone = backbone
        self.batch_size = batch_size
        self._store: dict[tuple[str, str], tuple[np.ndarray, np.ndarray]] = {}
        self.hits = 0
        self.forwards = 0
        self._weight_hash = backbone.vit_hash()

    @property
    def weight_hash(self) -> str:
        return self._weight_hash

    def refresh(self) -> None:
        """Re-read the backbone weight hash; stale entries stop matching."""
        self._weight_hash = self.backbone.vit_hash()

    def key(self, img: np.ndarray) -> tuple[str, str]:
        return image_hash(img), self._weight_hash

    def lookup(self, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return (taps [n, 4, g, g, D'], cls [n, D']) for ``images`` [n, H, W, 3]."""
        images = np.asarray(images, dtype=np.float64)
        keys = [self.key(im) for im in images]
        missing = [i for i, k in enumerate(keys) if k not in self._store]
        self.hits += len(keys) - len(missing)
        for lo in range(0, len(missing), self.batch_size):
            chunk = missing[lo:lo + self.batch_size]
            with ad.no_grad():
                taps, q = self.backbone.encode(images[chunk])
            tap_arr = np.stack([t.data for t in taps], axis=1)
            self.forwards += len(chunk)
            for n, i in enumerate(chunk):
                self._store[keys[i]] = (tap_arr[n].copy(), q.data[n].copy())
        taps = np.stack([self._store[k][0] for k in keys])
        cls = np.stack([self._store[k][1] for k in keys])
        return taps, cls

    def __len__(self) -> int:
        return len(self._store)

    def save(self, stem: str | Path) -> str:
        arrays, order = {}, []
        for n, ((ih, wh), (taps, cls)) in enumerate(sorted(self._store.items())):
            arrays[f"{n}.taps"] = taps
            arrays[f"{n}.cls"] = cls
            order.append([ih, wh])
        return write_blob(stem, arrays, meta={"keys": order})

    def load(self, stem: str | Path) -> int:
        arrays, manifest = read_blob(stem)
        for n, (ih, wh) in enumerate(manifest["meta"]["keys"]):
            self._store[(ih, wh)] = (arrays[f"{n}.taps"], arrays[f"{n}.cls"])
        return len(manifest["meta"]["keys"])


def default_cache_dir() -> Path | None:
    env = os.environ.get("MEMENC_CACHE_DIR")
    return Path(env) if env else None
