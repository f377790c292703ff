"""Toy ViT backbone with per-tap ConvBlocks, LoRA adapters and subject-aware AdaLN."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .nn import MLP, LayerNorm, Linear, Module, Parameter


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 32
    patch_size: int = 4
    depth: int = 8
    width: int = 64
    heads: int = 4
    tap_layers: tuple[int, ...] = (2, 4, 6, 8)
    mlp_ratio: int = 2
    lora_rank: int = 0
    adaln_enabled: bool = False
    frozen: bool = True
    seed: int = 0
    # query/key init gain; >1 sharpens attention so the random stand-in's taps are less collinear
    attn_gain: float = 1.0
    tap_norm: bool = False  # read taps through the final LayerNorm
    # condition embedding e = MLP(GeLU(c w_s))
    cond_dim: int = 6
    cond_hidden: int = 32
    embed_dim: int = 32
    n_subjects: int = 1

    def __post_init__(self):
        object.__setattr__(self, "tap_layers", tuple(int(t) for t in self.tap_layers))
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        taps = self.tap_layers
        if len(taps) != 4 or any(b <= a for a, b in zip(taps, taps[1:])) or taps[0] < 1 or taps[-1] > self.depth:
            raise ValueError(f"tap_layers must be 4 strictly increasing layers in [1, {self.depth}], got {taps}")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if self.attn_gain <= 0:
            raise ValueError("attn_gain must be > 0")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @classmethod
    def evenly_spaced(cls, depth: int, **kw) -> "BackboneConfig":
        taps = tuple(int(round(depth * (i + 1) / 4)) for i in range(4))
        return cls(depth=depth, tap_layers=taps, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tap_layers"] = list(self.tap_layers)
        return d


class ConditionEmbedder(Module):
    """``e = MLP(GeLU(c @ w_s))``: one linear map per subject, MLP shared."""

    def __init__(self, cond_dim: int, hidden: int, embed_dim: int, n_subjects: int, rng: np.random.Generator):
        self.n_subjects = n_subjects
        self.w_subject = Parameter(rng.normal(0.0, 1.0 / np.sqrt(cond_dim), size=(n_subjects, cond_dim, hidden)))
        self.mlp = MLP([hidden, hidden, embed_dim], rng)

    def __call__(self, c: Tensor, subject) -> Tensor:
        subject = np.atleast_1d(np.asarray(subject, dtype=np.int64))
        if subject.size and (subject.min() < 0 or subject.max() >= self.n_subjects):
            raise KeyError(f"unknown subject id in {sorted(set(subject.tolist()))}; registered 0..{self.n_subjects - 1}")
        single = c.ndim == 1
        if single:
            c = c.reshape(1, c.shape[0])
        b, dc = c.shape
        if subject.size == 1 and b > 1:
            subject = np.repeat(subject, b)
        w = ad.take_rows(self.w_subject, subject)  # [B, dc, hidden]
        z = ad.matmul(c.reshape(b, 1, dc), w).reshape(b, w.shape[-1])
        e = self.mlp(ad.gelu(z))
        return e.reshape(e.shape[-1]) if single else e


class Block(Module):
    def __init__(self, width: int, heads: int, mlp_ratio: int, adaln: bool, embed_dim: int,
                 rng: np.random.Generator):
        self.heads = heads
        self.ln1 = LayerNorm(width)
        self.qkv = Linear(width, 3 * width, rng)
        self.proj = Linear(width, width, rng)
        self.ln2 = LayerNorm(width)
        self.fc1 = Linear(width, mlp_ratio * width, rng)
        self.fc2 = Linear(mlp_ratio * width, width, rng)
        # shift/scale start at exactly zero so modulation is the identity
        self.adaln = Linear(embed_dim, 4 * width, rng, init_std=0.0) if adaln else None

    def modulation(self, e: Tensor) -> list[Tensor]:
        """[shift1, scale1, shift2, scale2], each [B, width]."""
        if self.adaln is None:
            raise RuntimeError("AdaLN is disabled for this backbone")
        m = self.adaln(e)
        w = m.shape[-1] // 4
        return [m[:, i * w:(i + 1) * w] for i in range(4)]

    def modulate(self, normed: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
        b, n, w = normed.shape
        scale = ad.expand(scale.reshape(b, 1, w), (b, n, w))
        shift = ad.expand(shift.reshape(b, 1, w), (b, n, w))
        return normed * (scale + 1.0) + shift

    def attention(self, x: Tensor) -> Tensor:
        b, n, w = x.shape
        h = self.heads
        qkv = self.qkv(x).reshape(b, n, 3, h, w // h).transpose(2, 0, 3, 1, 4)
        out = ad.scaled_dot_product_attention(qkv[0], qkv[1], qkv[2])
        return self.proj(out.transpose(0, 2, 1, 3).reshape(b, n, w))

    def __call__(self, x: Tensor, mods: list[Tensor] | None = None) -> Tensor:
        a = self.ln1(x)
        if mods is not None:
            a = self.modulate(a, mods[0], mods[1])
        x = x + self.attention(a)
        m = self.ln2(x)
        if mods is not None:
            m = self.modulate(m, mods[2], mods[3])
        return x + self.fc2(ad.gelu(self.fc1(m)))


class Backbone(Module):
    """Patch embedding, transformer blocks, tap ConvBlocks and final class token.

    The ViT weights are a fixed-seed random stand-in for a pretrained network.
    ConvBlocks (1x1 projection + GELU, one per tap) are always trainable.
    """

    def __init__(self, config: BackboneConfig):
        self.config = config
        rng = np.random.default_rng([config.seed, 0xB0])
        w, g, p = config.width, config.grid, config.patch_size
        self.patch = Linear(3 * p * p, w, rng)
        self.cls = Parameter(rng.normal(0.0, 0.5, size=(w,)))
        self.pos = Parameter(rng.normal(0.0, 0.5, size=(g * g + 1, w)))
        self.blocks = [
            Block(w, config.heads, config.mlp_ratio, config.adaln_enabled, config.embed_dim, rng)
            for _ in range(config.depth)
        ]
        for blk in self.blocks:
            blk.qkv.weight.data[:, :2 * w] *= config.attn_gain
        self.norm = LayerNorm(w)
        conv_rng = np.random.default_rng([config.seed, 0xC0])
        self.convblocks = [Linear(w, w, conv_rng) for _ in config.tap_layers]
        self.cond = (
            ConditionEmbedder(config.cond_dim, config.cond_hidden, config.embed_dim, config.n_subjects,
                              np.random.default_rng([config.seed, 0xCE]))
            if config.adaln_enabled else None
        )
        self.lora_params = 0
        if config.frozen:
            self.freeze_vit()
        if config.lora_rank:
            self.apply_lora(config.lora_rank)

    def reset_convblocks(self, rng: np.random.Generator) -> None:
        """Re-draw the (always trainable) ConvBlocks, e.g. from a model-level seed."""
        w = self.config.width
        self.convblocks = [Linear(w, w, rng) for _ in self.config.tap_layers]

    # ------------------------------------------------------------- plumbing
    def vit_modules(self) -> list[Module]:
        return [self.patch, self.norm, *self.blocks]

    def vit_parameters(self) -> list[Parameter]:
        params = [self.cls, self.pos]
        for mod in self.vit_modules():
            for name, prm in mod.named_parameters():
                if ".adaln." in f".{name}" or "lora_" in name:
                    continue
                params.append(prm)
        return params

    def freeze_vit(self) -> None:
        for prm in self.vit_parameters():
            prm.freeze()

    def apply_lora(self, rank: int) -> int:
        """Freeze base attention/MLP weights and attach zero-start low-rank deltas."""
        rng = np.random.default_rng([self.config.seed, 0x10A, rank])
        added = 0
        for blk in self.blocks:
            for lin in (blk.qkv, blk.proj, blk.fc1, blk.fc2):
                added += lin.add_lora(rank, rng)
        self.lora_params += added
        return added

    @property
    def live_required(self) -> bool:
        """True when ViT outputs change with training or conditioning (no caching)."""
        return (not self.config.frozen) or self.config.lora_rank > 0 or self.config.adaln_enabled

    def vit_hash(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for prm in self.vit_parameters():
            h.update(prm.data.tobytes())
        for blk in self.blocks:
            for lin in (blk.qkv, blk.proj, blk.fc1, blk.fc2):
                if lin.lora_a is not None:
                    h.update(lin.lora_a.data.tobytes())
                    h.update(lin.lora_b.data.tobytes())
        return h.hexdigest()

    # -------------------------------------------------------------- forward
    def condition_embed(self, c: Tensor, subject) -> Tensor:
        if self.cond is None:
            raise RuntimeError("condition embedding requires adaln_enabled")
        return self.cond(c, subject)

    def adaln_modulate(self, tokens: Tensor, e: Tensor, layer: int = 0, slot: int = 0) -> Tensor:
        """Return ``layernorm(tokens) * (1 + scale(e)) + shift(e)`` for one block norm.

        ``tokens`` is [n, D'] (or [B, n, D']); ``slot`` 0 is the pre-attention norm, 1 pre-MLP.
        """
        if not self.config.adaln_enabled:
            raise RuntimeError("adaln_modulate called on a backbone with AdaLN disabled")
        blk = self.blocks[layer]
        single = tokens.ndim == 2
        if single:
            tokens = tokens.reshape(1, *tokens.shape)
        if e.ndim == 1:
            e = e.reshape(1, e.shape[0])
        mods = blk.modulation(e)
        norm = blk.ln1 if slot == 0 else blk.ln2
        out = blk.modulate(norm(tokens), mods[2 * slot], mods[2 * slot + 1])
        return out.reshape(*out.shape[1:]) if single else out

    def _check_images(self, x: Tensor) -> Tensor:
        s = self.config.image_size
        if x.ndim == 3:
            x = x.reshape(1, *x.shape)
        if x.ndim != 4 or x.shape[1:] != (s, s, 3):
            raise ShapeError(f"backbone expects images [B, {s}, {s}, 3], got {x.shape}")
        return x

    def encode(self, x, e: Tensor | None = None) -> tuple[list[Tensor], Tensor]:
        """ViT part only: raw tap token grids [B, g, g, D'] and the final class token [B, D']."""
        x = self._check_images(x if isinstance(x, Tensor) else Tensor(x))
        cfg = self.config
        b, g, p, w = x.shape[0], cfg.grid, cfg.patch_size, cfg.width
        patches = x.reshape(b, g, p, g, p, 3).transpose(0, 1, 3, 2, 4, 5).reshape(b, g * g, p * p * 3)
        tok = self.patch(patches)
        cls = ad.expand(self.cls.reshape(1, 1, w), (b, 1, w))
        h = ad.concat([cls, tok], axis=1) + self.pos
        taps = []
        tap_set = set(cfg.tap_layers)
        for i, blk in enumerate(self.blocks, start=1):
            mods = blk.modulation(e) if (blk.adaln is not None and e is not None) else None
            h = blk(h, mods)
            if i in tap_set:
                t = self.norm(h[:, 1:, :]) if cfg.tap_norm else h[:, 1:, :]
                taps.append(t.reshape(b, g, g, w))
        q = self.norm(h)[:, 0, :]
        return taps, q

    def convblock(self, j: int, tokens: Tensor) -> Tensor:
        return ad.gelu(self.convblocks[j](tokens))

    def forward(self, x, e: Tensor | None = None) -> tuple[list[Tensor], Tensor]:
        """Feature maps M^1..M^4 (after ConvBlocks) and the final class token q."""
        single = (x.ndim if isinstance(x, Tensor) else np.ndim(x)) == 3
        taps, q = self.encode(x, e)
        maps = [self.convblock(j, t) for j, t in enumerate(taps)]
        if single:
            maps = [m.reshape(*m.shape[1:]) for m in maps]
            q = q.reshape(q.shape[-1])
        return maps, q

    __call__ = forward
