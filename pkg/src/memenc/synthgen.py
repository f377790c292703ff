"""Seeded synthetic experiments with planted, recoverable voxel structure.

A dataset is a sequence of runs; every trial shows one procedural image
(colored Gaussian blobs over a faint grating) and carries a condition vector.
Voxel coordinates are laid out in slabs along x, one slab per archetype, and
each voxel's clean response is the archetype function evaluated at a planted
2D location that varies smoothly with (y, z).

All random draws come from a counter-based generator keyed by
``(seed, stream, entity ids)`` so any single record can be regenerated in
isolation and the result does not depend on generation order.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
import scipy.linalg

from . import autodiff as ad
from .backbone import Backbone, BackboneConfig
from .blobio import canonical_json, manifest_hash, read_blob, write_blob
from .heads import VoxelSet
from .memory import MemoryWindow

ARCHETYPES = ("retinotopic", "depth", "behavior", "time", "memory", "noise")
IMAGE_DRIVEN = ("retinotopic", "depth")

# condition vector slot layout
COND_SLOTS = ("is_old", "lag", "button", "rt", "session_time", "run_time")
COND_GROUPS = {"condM": (0, 1), "condB": (2, 3), "condT": (4, 5)}
COND_DIM = len(COND_SLOTS)

SPLIT_NAMES = ("train", "val", "test")
PRF_SIGMA = 0.1
RT_MEAN, RT_STD = 0.9, 0.25


class ConfigError(ValueError):
    """Generator spec is inconsistent or infeasible."""


def counter_rng(seed: int, stream: str, *ids: int) -> np.random.Generator:
    """Philox generator keyed by a hash of ``(seed, stream, ids)``."""
    text = f"{int(seed)}|{stream}|" + ",".join(str(int(i)) for i in ids)
    digest = hashlib.sha256(text.encode()).digest()
    key = np.frombuffer(digest[:16], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class GeneratorSpec:
    n_voxels: int = 512
    n_runs: int = 20
    trials_per_run: int = 60
    runs_per_session: int = 10
    n_subjects: int = 1
    repeat_fraction: float = 0.05
    noise_std: float = 0.1
    voxel_mix: dict = field(default_factory=lambda: {
        "retinotopic": 0.3, "depth": 0.2, "behavior": 0.1, "time": 0.1, "memory": 0.2, "noise": 0.1})
    replay_enabled: bool = True
    replay_period: int = 6
    replay_lags: tuple[int, ...] | None = None
    memory_lag: int | None = None
    t_mem: int = 32
    depth_rank: int = 4  # planted directions per tap for depth voxels
    image_size: int = 32
    n_blobs: tuple[int, int] = (2, 4)
    seed: int = 0
    backbone: dict = field(default_factory=dict)
    n_trials: int | None = None

    def __post_init__(self):
        mix = {k: float(v) for k, v in dict(self.voxel_mix).items()}
        unknown = set(mix) - set(ARCHETYPES)
        if unknown:
            raise ConfigError(f"unknown voxel archetypes {sorted(unknown)}")
        if any(v < 0 for v in mix.values()) or abs(sum(mix.values()) - 1.0) > 1e-9:
            raise ConfigError(f"voxel_mix proportions must be >= 0 and sum to 1, got {mix}")
        object.__setattr__(self, "voxel_mix", {k: mix.get(k, 0.0) for k in ARCHETYPES})
        if self.n_trials is not None and self.n_trials != self.n_runs * self.trials_per_run:
            raise ConfigError(f"n_trials {self.n_trials} != n_runs * trials_per_run")
        if not 0.0 <= self.repeat_fraction <= 1.0:
            raise ConfigError("repeat_fraction must lie in [0, 1]")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if self.n_voxels < 1 or self.n_runs < 1 or self.trials_per_run < 2 or self.runs_per_session < 1:
            raise ConfigError("n_voxels, n_runs, runs_per_session must be >= 1 and trials_per_run >= 2")
        if self.n_subjects < 1:
            raise ConfigError("n_subjects must be >= 1")
        if self.depth_rank < 1:
            raise ConfigError("depth_rank must be >= 1")
        if self.replay_period < 1:
            raise ConfigError("replay_period must be >= 1")
        lag = self.planted_lag
        if not 1 <= lag < self.t_mem:
            raise ConfigError(f"memory lag {lag} must be in [1, t_mem={self.t_mem})")
        if self.replay_lags is not None:
            lags = tuple(int(v) for v in self.replay_lags)
            if any(not 1 <= v < self.t_mem for v in lags):
                raise ConfigError(f"replay lags {lags} must be in [1, t_mem={self.t_mem})")
            object.__setattr__(self, "replay_lags", lags)
        lo, hi = self.n_blobs
        object.__setattr__(self, "n_blobs", (int(lo), int(hi)))
        if not 1 <= lo <= hi:
            raise ConfigError("n_blobs must be (lo, hi) with 1 <= lo <= hi")
        BackboneConfig(**self.backbone_config_dict())

    @property
    def total_trials(self) -> int:
        return self.n_runs * self.trials_per_run

    @property
    def planted_lag(self) -> int:
        return self.replay_period if self.memory_lag is None else int(self.memory_lag)

    @property
    def active_lags(self) -> tuple[int, ...]:
        """Lags whose frames drive memory voxels."""
        if not self.replay_enabled:
            return (self.planted_lag,)
        if self.replay_lags is not None:
            return self.replay_lags
        k = self.planted_lag
        return tuple(range(k, self.t_mem, self.replay_period))

    def backbone_config_dict(self) -> dict:
        d = dict(self.backbone)
        d.setdefault("image_size", self.image_size)
        return d

    def to_dict(self) -> dict:
        d = asdict(self)
        d["n_blobs"] = list(self.n_blobs)
        d["replay_lags"] = None if self.replay_lags is None else list(self.replay_lags)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        d = dict(d)
        for key in ("n_blobs", "replay_lags"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown generator keys {sorted(unknown)}")
        return cls(**d)


PRESETS: dict[str, dict[str, Any]] = {
    "retinotopy": dict(voxel_mix={"retinotopic": 1.0}, noise_std=0.1),
    # diffuse random attention leaves the taps near-collinear; sharpen it so depth is identifiable
    "layer": dict(voxel_mix={"depth": 0.8, "retinotopic": 0.2}, noise_std=0.1,
                  backbone={"attn_gain": 3.0, "tap_norm": True}),
    "memory": dict(voxel_mix={"retinotopic": 0.3, "memory": 0.5, "noise": 0.2}, noise_std=0.3),
    "tracker": dict(n_voxels=128, voxel_mix={"retinotopic": 0.25, "memory": 0.5, "noise": 0.25},
                    noise_std=0.3),
    "full": {},
}


def preset(name: str, **overrides) -> GeneratorSpec:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return GeneratorSpec(**{**PRESETS[name], **overrides})


# ------------------------------------------------------------------ images
@dataclass
class BlobParams:
    centers: np.ndarray  # [k, 2] u-space, u[0] along columns
    widths: np.ndarray  # [k] u-space std
    amps: np.ndarray  # [k]
    colors: np.ndarray  # [k, 3]
    grating: np.ndarray  # [4]: frequency (cycles / image), orientation, phase, contrast


def pixel_centers(size: int, patch: int = 4) -> np.ndarray:
    """u coordinate of each pixel center; patch centers land on the align-corners token nodes."""
    lo = (patch - 1) / 2.0
    return (np.arange(size, dtype=np.float64) - lo) / (size - patch) * 2.0 - 1.0


def draw_blobs(spec: GeneratorSpec, image_id: int) -> BlobParams:
    rng = counter_rng(spec.seed, "image", image_id)
    lo, hi = spec.n_blobs
    k = int(rng.integers(lo, hi + 1))
    colors = rng.uniform(0.1, 1.0, size=(k, 3))
    colors /= colors.max(axis=1, keepdims=True)
    grating = np.array([rng.uniform(1.0, 6.0), rng.uniform(0.0, np.pi), rng.uniform(0.0, 2 * np.pi),
                        rng.uniform(0.0, 0.05)])
    return BlobParams(centers=rng.uniform(-0.9, 0.9, size=(k, 2)), widths=rng.uniform(0.12, 0.3, size=k),
                      amps=rng.uniform(0.5, 1.0, size=k), colors=colors, grating=grating)


def render(params: BlobParams, size: int, patch: int = 4) -> np.ndarray:
    """Image [size, size, 3] in [0, 1]."""
    uc = pixel_centers(size, patch)
    ux, uy = np.meshgrid(uc, uc)  # ux varies along columns
    img = np.full((size, size, 3), 0.1)
    for c, s, a, col in zip(params.centers, params.widths, params.amps, params.colors):
        g = np.exp(-((ux - c[0]) ** 2 + (uy - c[1]) ** 2) / (2 * s * s))
        img += 0.35 * a * g[:, :, None] * col[None, None, :]
    f, theta, phase, contrast = params.grating
    wave = np.sin(np.pi * f * (ux * np.cos(theta) + uy * np.sin(theta)) + phase)
    img += (contrast * (1.0 + wave))[:, :, None]
    return np.clip(img, 0.0, 1.0)


def blob_intensity(params: BlobParams | None, loc: np.ndarray, sigma: float = PRF_SIGMA) -> np.ndarray:
    """Luminance of the blob layer seen through a Gaussian pRF at each ``loc`` [N, 2]."""
    if params is None:
        return np.zeros(loc.shape[0])
    out = np.zeros(loc.shape[0])
    lum = params.colors.mean(axis=1)
    for c, s, a, l in zip(params.centers, params.widths, params.amps, lum):
        v = s * s + sigma * sigma
        d2 = np.sum((loc - c[None, :]) ** 2, axis=1)
        out += 0.35 * a * l * (s * s / v) * np.exp(-d2 / (2 * v))
    return out


# ------------------------------------------------------------------ dataset
@dataclass
class Dataset:
    spec: GeneratorSpec
    images: np.ndarray  # [n_images, H, W, 3]
    trial_image: np.ndarray  # [n_trials]
    run: np.ndarray
    pos: np.ndarray  # position in run
    subject: np.ndarray
    conditions: np.ndarray  # [n_trials, COND_DIM]
    responses: np.ndarray  # [n_trials, N]
    clean: np.ndarray  # [n_trials, N]
    split: np.ndarray  # 0 train, 1 val, 2 test
    repeat_group: np.ndarray  # -1 when the image is shown once
    voxels: VoxelSet
    archetype: np.ndarray  # [N] index into ARCHETYPES
    planted_loc: np.ndarray  # [N, 2]
    planted_tap: np.ndarray  # [N], -1 unless depth-selective
    weights: np.ndarray  # [N, 2] archetype coefficients (behavior / time)
    blobs: list[BlobParams] = field(repr=False, default_factory=list)

    @property
    def n_trials(self) -> int:
        return len(self.trial_image)

    @property
    def n_voxels(self) -> int:
        return self.voxels.n_voxels

    def split_index(self, name: str) -> np.ndarray:
        return np.flatnonzero(self.split == SPLIT_NAMES.index(name))

    def archetype_index(self, name: str) -> np.ndarray:
        return np.flatnonzero(self.archetype == ARCHETYPES.index(name))

    def windows(self, t_mem: int | None = None) -> np.ndarray:
        return window_indices(self.run, self.pos, t_mem or self.spec.t_mem)

    def frame_images(self, frames: np.ndarray) -> np.ndarray:
        """Image row for trial indices, with -1 mapped to the blank image (last row)."""
        frames = np.asarray(frames)
        return np.where(frames >= 0, self.trial_image[np.maximum(frames, 0)], len(self.images) - 1)


def _layout_voxels(spec: GeneratorSpec):
    n = spec.n_voxels
    counts = _apportion(n, [spec.voxel_mix[a] for a in ARCHETYPES])
    edges = np.concatenate([[0.0], np.cumsum([spec.voxel_mix[a] for a in ARCHETYPES])])
    coords = np.zeros((n, 3))
    arche = np.zeros(n, dtype=np.int64)
    i = 0
    for a, cnt in enumerate(counts):
        for _ in range(cnt):
            rng = counter_rng(spec.seed, "voxel", i)
            lo, hi = edges[a], edges[a + 1]
            x = -0.95 + 1.9 * rng.uniform(lo, hi)
            coords[i] = [x, rng.uniform(-0.95, 0.95), rng.uniform(-0.95, 0.95)]
            arche[i] = a
            i += 1
    return coords, arche, edges


def _apportion(n: int, props: list[float]) -> list[int]:
    raw = np.array(props) * n
    counts = np.floor(raw).astype(int)
    for k in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[k] += 1
    return counts.tolist()


def planted_location(spec: GeneratorSpec, coords: np.ndarray) -> np.ndarray:
    """Smooth rotated/scaled map (y, z) -> planted 2D location inside (-0.85, 0.85)^2."""
    theta = counter_rng(spec.seed, "retinotopy").uniform(0, 2 * np.pi)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    return 0.6 * coords[:, 1:3] @ rot.T


def _depth_tap(coords: np.ndarray, edges: np.ndarray) -> np.ndarray:
    a = ARCHETYPES.index("depth")
    lo, hi = -0.95 + 1.9 * edges[a], -0.95 + 1.9 * edges[a + 1]
    frac = (coords[:, 0] - lo) / max(hi - lo, 1e-12)
    return np.clip(np.floor(frac * 4), 0, 3).astype(np.int64)


def _schedule(spec: GeneratorSpec):
    """Image order, repeat groups and condition vectors."""
    n = spec.total_trials
    rng = counter_rng(spec.seed, "schedule")
    n_rep = int(round(spec.repeat_fraction * n / (1.0 + spec.repeat_fraction)))
    n_images = n - n_rep
    # first presentations in random order, second presentations inserted later
    trial_image = -np.ones(n, dtype=np.int64)
    repeat_group = -np.ones(n, dtype=np.int64)
    rep_ids = rng.choice(n_images, size=n_rep, replace=False) if n_rep else np.zeros(0, dtype=np.int64)
    sequence = list(rng.permutation(n_images))
    for g, img in enumerate(sorted(rep_ids.tolist())):
        first = sequence.index(img)
        gap = int(rng.integers(1, max(2, min(n - first - 1, 4 * spec.trials_per_run))))
        sequence.insert(min(first + gap, len(sequence)), img)
    trial_image[:] = sequence
    group_of = {int(img): g for g, img in enumerate(sorted(rep_ids.tolist()))}
    for t, img in enumerate(trial_image):
        repeat_group[t] = group_of.get(int(img), -1)

    run = np.arange(n) // spec.trials_per_run
    pos = np.arange(n) % spec.trials_per_run
    conditions = np.zeros((n, COND_DIM))
    last_seen: dict[int, int] = {}
    per_session = spec.runs_per_session * spec.trials_per_run
    for t in range(n):
        img = int(trial_image[t])
        trng = counter_rng(spec.seed, "behavior", t)
        old = img in last_seen
        lag = t - last_seen[img] if old else 0
        last_seen[img] = t
        pressed = trng.uniform() > 0.1
        p_old = 0.75 if old else 0.25
        button = (1.0 if trng.uniform() < p_old else -1.0) if pressed else 0.0
        rt = float(np.clip(RT_MEAN + RT_STD * trng.standard_normal(), 0.3, 2.0)) if pressed else 0.0
        session_time = ((run[t] % spec.runs_per_session) * spec.trials_per_run + pos[t]) / max(per_session - 1, 1)
        run_time = pos[t] / (spec.trials_per_run - 1)
        conditions[t] = [float(old), np.log1p(lag) / np.log1p(n), button, rt, session_time, run_time]
    subject = run % spec.n_subjects
    return trial_image, repeat_group, run, pos, subject, conditions, n_images


def _assign_split(spec: GeneratorSpec, repeat_group: np.ndarray) -> np.ndarray:
    n = len(repeat_group)
    rng = counter_rng(spec.seed, "split")
    split = np.zeros(n, dtype=np.int64)
    n_test = int(round(0.1 * n))
    n_val = int(round(0.1 * n))
    rep = np.flatnonzero(repeat_group >= 0)
    single = rng.permutation(np.flatnonzero(repeat_group < 0))
    split[rep] = 2
    fill = max(n_test - len(rep), 0)
    split[single[:fill]] = 2
    split[single[fill:fill + n_val]] = 1
    return split


def window_indices(run: np.ndarray, pos: np.ndarray, t_mem: int) -> np.ndarray:
    """[n_trials, t_mem] previous-trial indices (oldest first), -1 for left padding."""
    n = len(run)
    lags = np.arange(t_mem, 0, -1)  # slot s holds lag t_mem - s
    idx = np.arange(n)[:, None] - lags[None, :]
    valid = pos[:, None] - lags[None, :] >= 0
    return np.where(valid, idx, -1)


def build_windows(ds: Dataset, t_mem: int | None = None) -> list[MemoryWindow]:
    t_mem = t_mem or ds.spec.t_mem
    win = ds.windows(t_mem)
    out = []
    for row in win:
        blank = row < 0
        cond = np.where(blank[:, None], 0.0, ds.conditions[np.maximum(row, 0)])
        out.append(MemoryWindow(frames=row.copy(), conditions=cond, blank_mask=blank))
    return out


def tap_features(images: np.ndarray, backbone_cfg: BackboneConfig, batch: int = 64) -> np.ndarray:
    """Raw tap token grids of the reference backbone: [n, 4, g, g, D']."""
    bb = Backbone(backbone_cfg)
    out = []
    with ad.no_grad():
        for lo in range(0, len(images), batch):
            taps, _ = bb.encode(images[lo:lo + batch])
            out.append(np.stack([t.data for t in taps], axis=1))
    return np.concatenate(out) if out else np.zeros((0, 4, backbone_cfg.grid, backbone_cfg.grid, backbone_cfg.width))


def selective_directions(feats: np.ndarray, k: int = 4) -> np.ndarray:
    """Per tap, ``k`` directions that the other taps explain least: [4, D', k].

    Tap grids of a residual network are collinear, so a random direction is
    largely predicted from neighbouring taps.  For tap j we regress it on all
    other taps jointly and solve the generalized eigenproblem of the residual
    covariance against tap j's own covariance, keeping the top ``k``
    eigenvectors (unit variance under tap j).
    """
    n, n_taps = feats.shape[:2]
    width = feats.shape[-1]
    flat = feats - feats.mean(axis=0)
    flat = flat.reshape(n, n_taps, -1, width).transpose(1, 0, 2, 3).reshape(n_taps, -1, width)
    out = np.zeros((n_taps, width, k))
    for j in range(n_taps):
        cov = flat[j].T @ flat[j] / len(flat[j])
        others = np.concatenate([flat[o] for o in range(n_taps) if o != j], axis=1)
        beta = np.linalg.lstsq(others, flat[j], rcond=None)[0]
        e = flat[j] - others @ beta
        resid = e.T @ e / len(e)
        _, vecs = scipy.linalg.eigh(resid, cov + 1e-9 * np.trace(cov) / width * np.eye(width))
        out[j] = vecs[:, ::-1][:, :k]
    return out


def generate(spec: GeneratorSpec) -> Dataset:
    trial_image, repeat_group, run, pos, subject, cond, n_images = _schedule(spec)
    blobs = [draw_blobs(spec, i) for i in range(n_images)]
    patch = BackboneConfig(**spec.backbone_config_dict()).patch_size
    images = np.stack([render(b, spec.image_size, patch) for b in blobs] + [np.zeros((spec.image_size,) * 2 + (3,))])

    coords, arche, edges = _layout_voxels(spec)
    n_vox = spec.n_voxels
    loc = planted_location(spec, coords)
    tap = np.where(arche == ARCHETYPES.index("depth"), _depth_tap(coords, edges), -1)
    weights = np.zeros((n_vox, 2))
    for i in range(n_vox):
        wr = counter_rng(spec.seed, "weights", i)
        if arche[i] == ARCHETYPES.index("behavior"):
            w = wr.standard_normal(2)
            weights[i] = w / np.linalg.norm(w)
        elif arche[i] == ARCHETYPES.index("time"):
            weights[i] = [1.0, wr.uniform(-0.3, 0.3)]

    n = spec.total_trials
    clean = np.zeros((n, n_vox))
    # image-driven intensity per image at every voxel location
    intensity = np.stack([blob_intensity(b, loc) for b in blobs] + [np.zeros(n_vox)])  # [n_images+1, N]
    a_of = {name: np.flatnonzero(arche == k) for k, name in enumerate(ARCHETYPES)}

    if a_of["retinotopic"].size:
        v = a_of["retinotopic"]
        clean[:, v] = intensity[trial_image][:, v]
    if a_of["depth"].size:
        v = a_of["depth"]
        bcfg = BackboneConfig(**spec.backbone_config_dict())
        feats = tap_features(images[:-1], bcfg)  # [n_images, 4, g, g, D']
        basis = selective_directions(feats, min(spec.depth_rank, bcfg.width))
        dirs = np.zeros((v.size, bcfg.width))
        for n_, i in enumerate(v):
            g = counter_rng(spec.seed, "depthdir", int(i)).standard_normal(basis.shape[2])
            dirs[n_] = basis[tap[i]] @ g
        resp = np.zeros((n_images, v.size))
        for j in range(4):
            sel = np.flatnonzero(tap[v] == j)
            if sel.size == 0:
                continue
            sampled = ad.bilinear_sample(ad.Tensor(feats[:, j]), ad.Tensor(loc[v[sel]])).data  # [n_img, m, D']
            resp[:, sel] = np.einsum("imd,md->im", sampled, dirs[sel])
        clean[:, v] = resp[trial_image]
    if a_of["behavior"].size:
        v = a_of["behavior"]
        rt_z = np.where(cond[:, 2] != 0, (cond[:, 3] - RT_MEAN) / RT_STD, 0.0)
        clean[:, v] = cond[:, 2:3] * weights[v, 0] + rt_z[:, None] * weights[v, 1]
    if a_of["time"].size:
        v = a_of["time"]
        clean[:, v] = cond[:, 4:5] * weights[v, 0] + cond[:, 5:6] * weights[v, 1]
    if a_of["memory"].size:
        v = a_of["memory"]
        win = window_indices(run, pos, spec.t_mem)
        img_rows = np.where(win >= 0, trial_image[np.maximum(win, 0)], n_images)  # blank row
        # centred so that lags falling before the run start (blank) add nothing on average;
        # otherwise a single blank frame reveals the trial's position in the run
        centred = intensity - intensity[:-1].mean(axis=0)
        centred[-1] = 0.0
        for lag in spec.active_lags:
            clean[:, v] += centred[img_rows[:, spec.t_mem - lag]][:, v]

    # unit variance per voxel (noise voxels stay at zero)
    std = clean.std(axis=0)
    mean = clean.mean(axis=0)
    ok = std > 1e-12
    clean[:, ok] = (clean[:, ok] - mean[ok]) / std[ok]
    clean[:, ~ok] = 0.0

    noise = np.stack([counter_rng(spec.seed, "noise", t).standard_normal(n_vox) for t in range(n)])
    responses = clean + spec.noise_std * noise

    present = [a for a in ARCHETYPES if a_of[a].size]
    label_of = {ARCHETYPES.index(a): k for k, a in enumerate(present)}
    voxels = VoxelSet(coords, np.array([label_of[a] for a in arche], dtype=np.int64), present, 0)
    split = _assign_split(spec, repeat_group)
    return Dataset(spec=spec, images=images, trial_image=trial_image, run=run, pos=pos, subject=subject,
                   conditions=cond, responses=responses, clean=clean, split=split, repeat_group=repeat_group,
                   voxels=voxels, archetype=arche, planted_loc=loc, planted_tap=tap, weights=weights, blobs=blobs)


# ------------------------------------------------------------------ disk
_ARRAYS = ("images", "trial_image", "run", "pos", "subject", "conditions", "responses", "clean", "split",
           "repeat_group", "archetype", "planted_loc", "planted_tap", "weights")


def save_dataset(ds: Dataset, out_dir: str | Path) -> str:
    """Write ``dataset.{bin,json}`` and return the manifest hash."""
    out_dir = Path(out_dir)
    arrays = {name: getattr(ds, name) for name in _ARRAYS}
    arrays["voxel_coords"] = ds.voxels.coords
    arrays["voxel_roi"] = ds.voxels.roi_label
    for i, b in enumerate(ds.blobs):
        arrays[f"blob.{i}"] = np.concatenate([b.centers.ravel(), b.widths, b.amps, b.colors.ravel(), b.grating])
    split_counts = {name: int(np.sum(ds.split == k)) for k, name in enumerate(SPLIT_NAMES)}
    meta = {
        "spec": ds.spec.to_dict(),
        "slot_layout": list(COND_SLOTS),
        "cond_groups": {k: list(v) for k, v in COND_GROUPS.items()},
        "roi_names": ds.voxels.roi_names,
        "archetypes": list(ARCHETYPES),
        "split_counts": split_counts,
        "n_repeat_groups": int(ds.repeat_group.max() + 1),
        "active_lags": list(ds.spec.active_lags),
        "blob_counts": [int(len(b.amps)) for b in ds.blobs],
    }
    write_blob(out_dir / "dataset", arrays, meta=meta)
    return manifest_hash(out_dir / "dataset")


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    stem = path / "dataset" if path.is_dir() else path.with_suffix("")
    arrays, manifest = read_blob(stem)
    meta = manifest["meta"]
    spec = GeneratorSpec.from_dict(meta["spec"])
    ints = {"trial_image", "run", "pos", "subject", "split", "repeat_group", "archetype", "planted_tap"}
    kw = {name: arrays[name].astype(np.int64) if name in ints else arrays[name] for name in _ARRAYS}
    blobs = []
    for i, k in enumerate(meta["blob_counts"]):
        flat = arrays[f"blob.{i}"]
        o = 0
        centers = flat[o:o + 2 * k].reshape(k, 2); o += 2 * k
        widths = flat[o:o + k]; o += k
        amps = flat[o:o + k]; o += k
        colors = flat[o:o + 3 * k].reshape(k, 3); o += 3 * k
        blobs.append(BlobParams(centers, widths, amps, colors, flat[o:o + 4]))
    voxels = VoxelSet(arrays["voxel_coords"], arrays["voxel_roi"].astype(np.int64), meta["roi_names"], 0)
    return Dataset(spec=spec, voxels=voxels, blobs=blobs, **kw)


def dataset_hash(ds: Dataset) -> str:
    h = hashlib.sha256(canonical_json(ds.spec.to_dict()).encode())
    for name in ("responses", "conditions", "split"):
        h.update(np.ascontiguousarray(getattr(ds, name), dtype=np.float64).tobytes())
    return h.hexdigest()


# ------------------------------------------------------------------ oracle
class OracleFeatures:
    """Ground-truth feature matrices per voxel, computed independently of any model."""

    def __init__(self, ds: Dataset):
        self.ds = ds
        self.intensity = np.stack([blob_intensity(b, ds.planted_loc) for b in ds.blobs] + [np.zeros(ds.n_voxels)])
        self._taps = None

    def taps(self) -> np.ndarray:
        if self._taps is None:
            bcfg = BackboneConfig(**self.ds.spec.backbone_config_dict())
            self._taps = tap_features(self.ds.images[:-1], bcfg)
        return self._taps

    def __call__(self, voxel: int) -> np.ndarray:
        ds = self.ds
        name = ARCHETYPES[ds.archetype[voxel]]
        if name == "retinotopic":
            return self.intensity[ds.trial_image, voxel][:, None]
        if name == "depth":
            feats = self.taps()[:, ds.planted_tap[voxel]]
            loc = ds.planted_loc[voxel:voxel + 1]
            return ad.bilinear_sample(ad.Tensor(feats), ad.Tensor(loc)).data[:, 0, :][ds.trial_image]
        if name == "behavior":
            rt_z = np.where(ds.conditions[:, 2] != 0, (ds.conditions[:, 3] - RT_MEAN) / RT_STD, 0.0)
            return np.stack([ds.conditions[:, 2], rt_z], axis=1)
        if name == "time":
            return ds.conditions[:, 4:6]
        if name == "memory":
            # centred like the generator, blank frames contribute exactly zero
            centred = self.intensity[:, voxel] - self.intensity[:-1, voxel].mean()
            centred[-1] = 0.0
            return centred[ds.frame_images(ds.windows())]  # one column per lag
        return np.zeros((ds.n_trials, 1))


def ridge_oracle(ds: Dataset, voxels=None, alpha: float = 1e-3) -> np.ndarray:
    """Test-split r of a closed-form ridge fit on each voxel's ground-truth features."""
    from .metrics import pearson

    feats = OracleFeatures(ds)
    voxels = np.arange(ds.n_voxels) if voxels is None else np.asarray(voxels)
    tr, te = ds.split_index("train"), ds.split_index("test")
    out = np.zeros(len(voxels))
    for n, v in enumerate(voxels):
        x = feats(int(v))
        x = np.concatenate([x, np.ones((len(x), 1))], axis=1)
        xt = x[tr]
        beta = np.linalg.solve(xt.T @ xt + alpha * np.eye(x.shape[1]), xt.T @ ds.responses[tr, v])
        out[n] = pearson(x[te] @ beta, ds.responses[te, v])[0]
    return out


def with_overrides(spec: GeneratorSpec, **kw) -> GeneratorSpec:
    return replace(spec, **kw)
