"""The assembled encoding model: backbone, voxel routing, memory and readout."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .backbone import Backbone, BackboneConfig
from .blobio import canonical_json, read_blob, write_blob
from .heads import (HeadsConfig, LayerSelector, RetinaMapper, RoutingState, TapProjection, VoxelReadout, VoxelSet,
                    fuse_features, positional_encode)
from .memory import MemoryCompressor, MemoryConfig, TokenCache, default_cache_dir
from .nn import Module


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    heads: HeadsConfig = field(default_factory=HeadsConfig)
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        return {"backbone": self.backbone.to_dict(), "heads": self.heads.to_dict(),
                "memory": self.memory.to_dict(), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - {"backbone", "heads", "memory", "seed"}
        if unknown:
            raise ValueError(f"unknown model config keys {sorted(unknown)}")
        bb = dict(d.get("backbone", {}))
        if "tap_layers" in bb:
            bb["tap_layers"] = tuple(bb["tap_layers"])
        return cls(backbone=BackboneConfig(**bb), heads=HeadsConfig(**d.get("heads", {})),
                   memory=MemoryConfig(**d.get("memory", {})), seed=int(d.get("seed", 0)))

    def hash(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()


@dataclass
class Inputs:
    """One batch of model inputs, all as image-row indices into a FeatureBank."""

    frame: np.ndarray  # [B] image routed through the spatial path
    cond: np.ndarray  # [B, d_c] current condition vector (masked)
    subject: np.ndarray  # [B]
    window: np.ndarray | None = None  # [B, T] memory image rows; None masks memory
    window_cond: np.ndarray | None = None  # [B, T, d_c]

    def __len__(self) -> int:
        return len(self.frame)


class FeatureBank:
    """Images plus cached backbone outputs (raw taps, class tokens) for every image row.

    Rows are a dataset's images; callers append the blank frame as the last row.
    Taps are only cached when the backbone has no trainable or conditioned ViT
    path; class tokens are always cached and refreshed on demand.  With a
    ``cache_dir`` (default: $MEMENC_CACHE_DIR) entries persist across processes.
    """

    def __init__(self, images: np.ndarray, backbone: Backbone, need_taps: bool = True, batch_size: int = 64,
                 cache_dir: str | Path | None = None):
        self.images = np.asarray(images, dtype=np.float64)
        self.cache = TokenCache(backbone, batch_size)
        self.cache_dir = Path(cache_dir) if cache_dir is not None else default_cache_dir()
        self._digest = hashlib.sha256(self.images.tobytes()).hexdigest()
        self.taps: np.ndarray | None = None
        self.cls: np.ndarray | None = None
        self._need_taps = need_taps
        self.refresh()

    def refresh(self) -> bool:
        """Recompute entries if the backbone weights changed. Returns True when recomputed."""
        old = self.cache.weight_hash if self.cls is not None else None
        self.cache.refresh()
        if old == self.cache.weight_hash:
            return False
        stem = None
        if self.cache_dir is not None:
            stem = self.cache_dir / f"tokens-{self.cache.weight_hash[:16]}-{self._digest[:16]}"
            if stem.with_suffix(".json").exists():
                self.cache.load(stem)
        before = self.cache.forwards
        taps, cls = self.cache.lookup(self.images)
        if stem is not None and self.cache.forwards > before:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
            self.cache.save(stem)
        self.cls = cls
        self.taps = taps if self._need_taps else None
        self.cache._store.clear()  # arrays above are the working copy
        return True

    @property
    def weight_hash(self) -> str:
        return self.cache.weight_hash


class EncodingModel(Module):
    """y = readout(sum_j eta_j (INTP(P_j M^j, u) + P_j pool(M^j)), h_mem) for every voxel."""

    def __init__(self, config: ModelConfig, voxels: VoxelSet):
        self.config = config
        self.voxels = voxels
        hc, mc, bc = config.heads, config.memory, config.backbone
        self.backbone = Backbone(bc)
        self.backbone.reset_convblocks(np.random.default_rng([config.seed, 0xC0]))
        rng = np.random.default_rng([config.seed, 0x4EAD])
        self._pe = positional_encode(voxels.coords, hc.pe_octaves)
        pe_dim = self._pe.shape[1]
        self.retina = RetinaMapper(pe_dim, hc.retina_hidden, rng)
        self.selector = LayerSelector(pe_dim, hc.selector_hidden, rng, n_layers=len(bc.tap_layers))
        self.projections = [TapProjection(bc.width, hc.d, rng) for _ in bc.tap_layers]
        d_mem = mc.d_m if mc.enabled else 0
        self.readout = VoxelReadout(voxels.n_voxels, hc.d, d_mem, np.random.default_rng([config.seed, 0x0E]))
        self.memory = (MemoryCompressor(mc, bc.width, bc.cond_dim, bc.n_subjects,
                                        np.random.default_rng([config.seed, 0x3E3])) if mc.enabled else None)

    @property
    def n_voxels(self) -> int:
        return self.voxels.n_voxels

    def routing(self) -> tuple[Tensor, Tensor]:
        pe = Tensor(self._pe)
        return self.retina(pe), self.selector(pe)

    def feature_maps(self, inputs: Inputs, bank: FeatureBank) -> list[Tensor]:
        bb = self.backbone
        if bb.live_required or bank.taps is None:
            images = Tensor(bank.images[inputs.frame])
            e = None
            if self.config.backbone.adaln_enabled:
                e = bb.condition_embed(Tensor(inputs.cond), inputs.subject)
            maps, _ = bb.forward(images, e)
            return maps
        taps = bank.taps[inputs.frame]
        return [bb.convblock(j, Tensor(taps[:, j])) for j in range(taps.shape[1])]

    def memory_feature(self, inputs: Inputs, bank: FeatureBank) -> Tensor | None:
        if self.memory is None:
            return None
        b = len(inputs)
        if inputs.window is None:
            return Tensor(np.zeros((b, self.config.memory.d_m)))
        if inputs.window.shape[1] != self.config.memory.t_mem:
            raise ShapeError(f"window length {inputs.window.shape[1]} != t_mem {self.config.memory.t_mem}")
        tokens = bank.cls[inputs.window]  # [B, T, D']
        return self.memory(tokens, inputs.window_cond, inputs.subject)

    def forward(self, inputs: Inputs, bank: FeatureBank, train_mode: bool = False,
                rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor, Tensor]:
        """Returns (y [B, N], eta [N, 4], u [N, 2])."""
        u, eta = self.routing()
        maps = self.feature_maps(inputs, bank)
        routing = RoutingState(u, eta, self.config.heads.sigma)
        h = fuse_features(maps, self.projections, routing, train_mode, rng)
        y = self.readout(h, self.memory_feature(inputs, bank))
        return y, eta, u

    __call__ = forward

    def fit_memory_stats(self, bank: FeatureBank, force: bool = False) -> bool:
        """Fit the memory token standardization on the bank's images (blank row excluded)."""
        if self.memory is None or (self.memory.stats_fitted and not force):
            return False
        self.memory.fit_token_stats(bank.cls[:-1])
        return True

    def make_bank(self, images: np.ndarray) -> FeatureBank:
        return FeatureBank(images, self.backbone, need_taps=not self.backbone.live_required)

    # ------------------------------------------------------------ persistence
    def save(self, stem: str | Path, meta: dict | None = None) -> str:
        info = {"config": self.config.to_dict(), "n_voxels": self.n_voxels,
                "roi_names": self.voxels.roi_names, "subject_id": self.voxels.subject_id,
                "lora_rank": self.config.backbone.lora_rank}
        info.update(meta or {})
        arrays = self.state_dict()
        arrays["__voxel_coords"] = self.voxels.coords
        arrays["__voxel_roi"] = self.voxels.roi_label.astype(np.float64)
        return write_blob(stem, arrays, frozen=self.frozen_flags(), meta=info)


def load_model(stem: str | Path) -> tuple[EncodingModel, dict]:
    arrays, manifest = read_blob(stem)
    meta = manifest["meta"]
    voxels = VoxelSet(arrays.pop("__voxel_coords"), arrays.pop("__voxel_roi").astype(np.int64),
                      meta["roi_names"], meta.get("subject_id", 0))
    model = EncodingModel(ModelConfig.from_dict(meta["config"]), voxels)
    model.load_state_dict(arrays)
    for name, prm in model.named_parameters():
        entry = manifest["entries"][name]
        if entry["frozen"]:
            prm.freeze()
        else:
            prm.unfreeze()
    return model, meta
