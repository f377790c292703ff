"""Voxel-coordinate feature routing and per-voxel linear readout.

Each voxel's 3D coordinate picks a 2D sampling location on the latent image
grid (RetinaMapper) and a distribution over the four tap layers
(LayerSelector).  The sampled and pooled features of each tap are mixed by
that distribution and regressed with weights unique to the voxel.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .nn import MLP, Linear, Module, Parameter


@dataclass(frozen=True)
class HeadsConfig:
    d: int = 64
    pe_octaves: int = 6
    retina_hidden: int = 64
    selector_hidden: int = 64
    sigma: float = 0.01

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class VoxelSet:
    coords: np.ndarray  # [N, 3] in [-1, 1]
    roi_label: np.ndarray  # [N] dense 0..R-1
    roi_names: list[str]
    subject_id: int = 0

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.roi_label = np.asarray(self.roi_label, dtype=np.int64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise ShapeError(f"coords must be [N, 3], got {self.coords.shape}")
        if not np.all(np.isfinite(self.coords)) or np.any(np.abs(self.coords) > 1.0):
            raise ValueError("voxel coords must be finite and inside [-1, 1]^3")
        if self.roi_label.shape != (self.n_voxels,):
            raise ShapeError("one ROI label per voxel required")
        present = np.unique(self.roi_label)
        if present.size and not np.array_equal(present, np.arange(present.size)):
            raise ValueError(f"ROI ids must be dense 0..R-1, got {present.tolist()}")

    @property
    def n_voxels(self) -> int:
        return self.coords.shape[0]

    def subset(self, idx) -> "VoxelSet":
        idx = np.asarray(idx)
        labels = self.roi_label[idx]
        kept = np.unique(labels)
        remap = {old: new for new, old in enumerate(kept)}
        return VoxelSet(self.coords[idx], np.array([remap[v] for v in labels], dtype=np.int64),
                        [self.roi_names[k] for k in kept], self.subject_id)


def positional_encode(p, octaves: int = 6) -> np.ndarray:
    """Sinusoidal encoding: per axis ``[sin(2^k pi p), cos(2^k pi p)]`` for k < octaves.

    Layout is axis-major, sin block before cos block: [N, 3 * 2 * octaves].
    """
    p = np.asarray(p.data if isinstance(p, Tensor) else p, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 3:
        raise ShapeError(f"positional_encode expects [N, 3], got {p.shape}")
    if np.any(np.abs(p) > 1.0):
        raise ValueError("positional_encode: coordinates must lie in [-1, 1]")
    freqs = (2.0 ** np.arange(octaves)) * np.pi
    ang = p[:, :, None] * freqs[None, None, :]  # [N, 3, K]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=2).reshape(p.shape[0], -1)


class RetinaMapper(Module):
    """u = tanh(MLP(PE(p))), MLP 36 -> 64 -> 64 -> 2."""

    def __init__(self, pe_dim: int, hidden: int, rng: np.random.Generator):
        self.mlp = MLP([pe_dim, hidden, hidden, 2], rng)

    def __call__(self, pe) -> Tensor:
        return ad.tanh(self.mlp(pe if isinstance(pe, Tensor) else Tensor(pe)))


class LayerSelector(Module):
    """eta = softmax(MLP(PE(p))), MLP 36 -> 64 -> 4."""

    def __init__(self, pe_dim: int, hidden: int, rng: np.random.Generator, n_layers: int = 4):
        self.mlp = MLP([pe_dim, hidden, n_layers], rng)

    def __call__(self, pe) -> Tensor:
        return ad.softmax(self.mlp(pe if isinstance(pe, Tensor) else Tensor(pe)), axis=-1)


def entropy_reg(eta: Tensor) -> Tensor:
    """Mean over voxels of sum_j eta_j ln eta_j (negative entropy, minimum -ln 4)."""
    return ad.xlogx(eta).sum(axis=-1).mean()


def entropy(eta) -> np.ndarray:
    """Per-voxel Shannon entropy in nats (plain numpy, for reporting)."""
    e = np.asarray(eta.data if isinstance(eta, Tensor) else eta)
    safe = np.where(e > 0, e, 1.0)
    return -np.sum(np.where(e > 0, e * np.log(safe), 0.0), axis=-1)


@dataclass
class RoutingState:
    u: Tensor  # [N, 2]
    eta: Tensor  # [N, 4]
    sigma: float = 0.01

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")


def jitter(u: Tensor, sigma: float, train_mode: bool, rng: np.random.Generator | None) -> Tensor:
    """clamp(u + eps, -1, 1) with eps ~ N(0, sigma^2) in training; identity otherwise."""
    if not train_mode or sigma == 0.0:
        return u
    if rng is None:
        raise ValueError("train_mode jitter needs an rng")
    eps = rng.normal(0.0, sigma, size=u.shape)
    return ad.clip(u + Tensor(eps), -1.0, 1.0)


class TapProjection(Module):
    """Per-tap linear map D' -> d shared by the sampled and pooled features."""

    def __init__(self, width: int, d: int, rng: np.random.Generator):
        self.lin = Linear(width, d, rng, bias=False)

    def grid(self, m: Tensor) -> Tensor:
        return self.lin(m)

    def pooled(self, m: Tensor) -> Tensor:
        # avg and max halves go through the same projection and are summed
        pooled = ad.avgmaxpool(m)  # [B, 2D']
        b, w2 = pooled.shape
        return self.lin(pooled.reshape(b, 2, w2 // 2)).sum(axis=1)


def fuse_features(maps: list[Tensor], projections: list[TapProjection], routing: RoutingState,
                  train_mode: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """h~_i = sum_j eta_ij (INTP(P_j M^j, u_i + eps) + P_j AvgMaxPool(M^j)) -> [B, N, d].

    The same jittered location is used for every tap.
    """
    if len(maps) != routing.eta.shape[1] or len(maps) != len(projections):
        raise ShapeError(f"{len(maps)} tap maps vs eta {routing.eta.shape} / {len(projections)} projections")
    u = jitter(routing.u, routing.sigma, train_mode, rng)
    n = u.shape[0]
    out = None
    for j, (m, proj) in enumerate(zip(maps, projections)):
        if m.ndim == 3:
            m = m.reshape(1, *m.shape)
        b = m.shape[0]
        sampled = ad.bilinear_sample(proj.grid(m), u)  # [B, N, d]
        d = sampled.shape[-1]
        pooled = ad.expand(proj.pooled(m).reshape(b, 1, d), (b, n, d))
        weight = ad.expand(routing.eta[:, j].reshape(1, n, 1), (b, n, d))
        term = weight * (sampled + pooled)
        out = term if out is None else out + term
    return out


class VoxelReadout(Module):
    """y_i = w_i . [h~_i ; h_mem] + b_i, no weight sharing between voxels."""

    def __init__(self, n_voxels: int, d: int, d_mem: int, rng: np.random.Generator, init_std: float = 0.05):
        self.d, self.d_mem = d, d_mem
        self.w = Parameter(rng.normal(0.0, init_std, size=(n_voxels, d + d_mem)))
        self.b = Parameter(np.zeros(n_voxels))

    def __call__(self, h: Tensor, h_mem: Tensor | None = None) -> Tensor:
        return readout(h, h_mem, self.w, self.b, self.d)


def readout(h: Tensor, h_mem: Tensor | None, w: Tensor, b: Tensor, d: int | None = None) -> Tensor:
    if h.ndim == 2:
        h = h.reshape(1, *h.shape)
    bsz, n, dh = h.shape
    d = dh if d is None else d
    d_total = w.shape[1]
    d_mem = 0 if h_mem is None else h_mem.shape[-1]
    if w.shape[0] != n or dh != d or d_total != d + d_mem:
        raise ShapeError(f"readout: weights {w.shape} vs features {h.shape} and memory "
                         f"{None if h_mem is None else h_mem.shape}")
    w_img = w[:, :d] if d_total != d else w
    y = (h * ad.expand(w_img.reshape(1, n, d), (bsz, n, d))).sum(axis=-1)
    if h_mem is not None:
        if h_mem.ndim == 1:
            h_mem = h_mem.reshape(1, d_mem)
        y = y + ad.matmul(h_mem, w[:, d:].T)
    return y + b
