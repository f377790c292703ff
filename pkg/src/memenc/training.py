"""Training loop, input masking, greedy checkpoint soup, atlas ensembles and distillation."""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .heads import VoxelSet, entropy, entropy_reg
from .metrics import pearson_columns
from .model import EncodingModel, FeatureBank, Inputs, ModelConfig
from .nn import Adam
from .synthgen import COND_DIM, COND_GROUPS, Dataset, counter_rng


class DivergenceError(FloatingPointError):
    """Training loss became non-finite."""


class CoverageError(ValueError):
    """Some voxel is not covered by any zoo member."""


# ------------------------------------------------------------------ masking
FRAME_MODES = ("all", "current", "lag", "rand")


@dataclass(frozen=True)
class InputMask:
    """Which inputs the model sees; everything else is replaced by zeros.

    ``frames``: ``all`` (current frame + memory window), ``current`` (T=0 only),
    ``lag`` (frame T=-lag routed through the spatial path, memory masked) or
    ``rand`` (frame of a random other trial, memory masked).
    """

    frames: str = "all"
    lag: int = 0
    condM: bool = True
    condB: bool = True
    condT: bool = True

    def __post_init__(self):
        if self.frames not in FRAME_MODES:
            raise ValueError(f"frames must be one of {FRAME_MODES}, got {self.frames!r}")
        if self.lag < 0:
            raise ValueError("lag must be >= 0")

    @classmethod
    def parse(cls, spec: str | None) -> "InputMask":
        """Allow-list syntax: ``frames=MODE`` plus the enabled condition groups.

        ``full`` (or an empty spec) enables everything.  Examples:
        ``"frames=current"`` is the current-frame-only baseline with every
        condition slot zeroed; ``"frames=all,condB"`` adds the memory window and
        the behavior slots; ``"frames=lag:6"`` is the single-lag tracker input.
        """
        if spec is None or spec.strip() in ("", "full"):
            return cls()
        frames, lag, groups = "all", 0, set()
        for tok in (t.strip() for t in spec.split(",")):
            if not tok:
                continue
            if tok.startswith("frames="):
                val = tok.split("=", 1)[1]
                if val.startswith("lag:"):
                    frames, lag = "lag", int(val[4:])
                elif val.lstrip("-").isdigit():
                    frames, lag = "lag", abs(int(val))
                else:
                    frames = val
            elif tok in COND_GROUPS:
                groups.add(tok)
            elif tok == "cond=all":
                groups.update(COND_GROUPS)
            elif tok == "cond=none":
                groups.clear()
            else:
                raise ValueError(f"unknown mask token {tok!r}")
        return cls(frames=frames, lag=lag, **{g: g in groups for g in COND_GROUPS})

    def to_spec(self) -> str:
        frames = f"lag:{self.lag}" if self.frames == "lag" else self.frames
        return ",".join([f"frames={frames}"] + [g for g in COND_GROUPS if getattr(self, g)])

    def cond_keep(self) -> np.ndarray:
        keep = np.zeros(COND_DIM)
        for g, slots in COND_GROUPS.items():
            if getattr(self, g):
                keep[list(slots)] = 1.0
        return keep

    @property
    def uses_memory(self) -> bool:
        return self.frames == "all"


def derangement(n: int, seed: int) -> np.ndarray:
    """Seeded permutation with no fixed points."""
    rng = counter_rng(seed, "derangement", n)
    perm = rng.permutation(n)
    fixed = np.flatnonzero(perm == np.arange(n))
    while fixed.size:
        for i in fixed:
            j = int(rng.integers(n))
            perm[i], perm[j] = perm[j], perm[i]
        fixed = np.flatnonzero(perm == np.arange(n))
    return perm


class InputBuilder:
    """Maps trial indices to masked model inputs for one dataset."""

    def __init__(self, ds: Dataset, mask: InputMask, t_mem: int, rand_seed: int = 0):
        self.ds, self.mask, self.t_mem = ds, mask, t_mem
        self.keep = mask.cond_keep()
        self.blank = len(ds.images) - 1
        self.windows = ds.windows(t_mem)
        self.perm = derangement(ds.n_trials, rand_seed) if mask.frames == "rand" else None

    def frame_rows(self, idx: np.ndarray) -> np.ndarray:
        ds, m = self.ds, self.mask
        if m.frames in ("all", "current"):
            return ds.trial_image[idx]
        if m.frames == "lag":
            if m.lag == 0:
                return ds.trial_image[idx]
            ok = ds.pos[idx] >= m.lag
            return np.where(ok, ds.trial_image[np.maximum(idx - m.lag, 0)], self.blank)
        return ds.trial_image[self.perm[idx]]

    def __call__(self, idx: np.ndarray, memory: bool = True) -> Inputs:
        ds = self.ds
        idx = np.asarray(idx)
        cond = ds.conditions[idx] * self.keep
        inp = Inputs(frame=self.frame_rows(idx), cond=cond, subject=ds.subject[idx])
        if self.mask.uses_memory and memory:
            win = self.windows[idx]
            blank = win < 0
            inp.window = ds.frame_images(win)
            wc = ds.conditions[np.maximum(win, 0)] * self.keep
            wc[blank] = 0.0
            inp.window_cond = wc
        return inp


# ------------------------------------------------------------------ recipe
@dataclass(frozen=True)
class RecipeConfig:
    mode: str = "naive"  # naive | ensemble | fixed
    a: int = 1
    b: int = 1
    steps: int = 2000
    member_steps: int | None = 1000
    lr: float = 3e-4
    batch_size: int = 16
    lambda_ent: float = 0.01
    ent_schedule: str = "early"  # early | constant
    ent_fraction: float = 0.25
    eval_every: int = 100
    soup_k: int = 10
    input_mask: str = "full"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("naive", "ensemble", "fixed"):
            raise ValueError(f"unknown recipe mode {self.mode!r}")
        if self.mode == "naive" and (self.a, self.b) != (1, 1):
            raise ValueError("naive recipe requires a = b = 1")
        if self.a < 1 or self.b < 1:
            raise ValueError("a and b must be >= 1")
        if self.steps < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("steps, batch_size and eval_every must be >= 1")
        if self.soup_k < 0:
            raise ValueError("soup_k must be >= 0 (0 keeps the final weights)")
        if self.lr <= 0 or self.lambda_ent < 0:
            raise ValueError("lr must be > 0 and lambda_ent >= 0")
        if self.ent_schedule not in ("early", "constant"):
            raise ValueError("ent_schedule must be 'early' or 'constant'")
        InputMask.parse(self.input_mask)

    @property
    def mask(self) -> InputMask:
        return InputMask.parse(self.input_mask)

    @property
    def n_members(self) -> int:
        return self.a * self.b

    def steps_per_member(self) -> int:
        if self.mode == "naive" or self.member_steps is None:
            return self.steps
        return self.member_steps

    def lambda_at(self, step: int, total: int) -> float:
        if self.ent_schedule == "constant":
            return self.lambda_ent
        return self.lambda_ent if step < self.ent_fraction * total else 0.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Checkpoint:
    state: dict[str, np.ndarray]
    score: float
    step: int


@dataclass
class TrainResult:
    model: EncodingModel
    history: list[dict]
    checkpoints: list[Checkpoint]
    soup_score: float
    soup_members: list[int]
    best_score: float

    def history_jsonl(self) -> str:
        return "".join(json.dumps(row, sort_keys=True) + "\n" for row in self.history)


def trainable_state(model: EncodingModel) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in model.named_parameters() if not p.frozen}


def load_trainable(model: EncodingModel, state: dict[str, np.ndarray]) -> None:
    params = dict(model.named_parameters())
    for name, arr in state.items():
        params[name].data = arr.copy()


def predict(model: EncodingModel, builder: InputBuilder, bank: FeatureBank, idx: np.ndarray,
            batch: int = 64) -> np.ndarray:
    """Eval-mode predictions [len(idx), N]."""
    out = np.zeros((len(idx), model.n_voxels))
    with ad.no_grad():
        for lo in range(0, len(idx), batch):
            sel = idx[lo:lo + batch]
            y, _, _ = model.forward(builder(sel), bank, train_mode=False)
            out[lo:lo + len(sel)] = y.data
    return out


def mean_r(pred: np.ndarray, truth: np.ndarray) -> float:
    return float(np.mean(pearson_columns(pred, truth)))


def train_one(model: EncodingModel, ds: Dataset, recipe: RecipeConfig, bank: FeatureBank | None = None,
              voxel_idx: np.ndarray | None = None, targets: np.ndarray | None = None,
              steps: int | None = None, exact_cache: bool = False, log: Callable[[dict], None] | None = None
              ) -> TrainResult:
    """Adam on MSE + lambda_ent * L_ent, periodic val checkpoints, greedy soup at the end.

    ``targets`` [n_trials, N] replaces the recorded responses (distillation);
    ``voxel_idx`` picks the dataset voxels this model predicts.
    """
    voxel_idx = np.arange(ds.n_voxels) if voxel_idx is None else np.asarray(voxel_idx)
    if len(voxel_idx) != model.n_voxels:
        raise ValueError(f"model has {model.n_voxels} voxels, data slice has {len(voxel_idx)}")
    y_all = (ds.responses if targets is None else targets)[:, voxel_idx]
    if targets is not None and targets.shape[0] != ds.n_trials:
        raise ValueError("targets must cover every trial")
    bank = bank if bank is not None else model.make_bank(ds.images)
    if bank.weight_hash != model.backbone.vit_hash():
        bank.refresh()
    model.fit_memory_stats(bank)
    mask = recipe.mask
    builder = InputBuilder(ds, mask, model.config.memory.t_mem, rand_seed=recipe.seed)
    total = steps if steps is not None else recipe.steps_per_member()
    train_idx, val_idx = ds.split_index("train"), ds.split_index("val")
    rng = np.random.default_rng([recipe.seed, model.config.seed, 0x7A])
    opt = Adam(model.trainable_parameters(), lr=recipe.lr)
    live_tokens = model.backbone.live_required and model.memory is not None and mask.uses_memory

    history: list[dict] = []
    ckpts: list[Checkpoint] = []
    order = rng.permutation(train_idx)
    cursor = 0
    losses = []
    for step in range(total):
        if cursor + recipe.batch_size > len(order):
            order, cursor = rng.permutation(train_idx), 0
            if live_tokens:
                bank.refresh()  # per-epoch refresh of cached memory tokens
        idx = order[cursor:cursor + recipe.batch_size]
        cursor += recipe.batch_size
        if live_tokens and exact_cache:
            bank.refresh()
        y, eta, _ = model.forward(builder(idx), bank, train_mode=True, rng=rng)
        loss = ad.mse_loss(y, y_all[idx])
        lam = recipe.lambda_at(step, total)
        if lam > 0:
            loss = loss + entropy_reg(eta) * lam
        if not math.isfinite(loss.item()):
            raise DivergenceError(f"non-finite loss {loss.item()} at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if (step + 1) % recipe.eval_every == 0 or step + 1 == total:
            if live_tokens:
                bank.refresh()
            score = mean_r(predict(model, builder, bank, val_idx), y_all[val_idx])
            with ad.no_grad():
                _, eta_now = model.routing()
            row = {"step": step + 1, "train_loss": float(np.mean(losses)), "val_r": score,
                   "entropy": float(np.mean(entropy(eta_now))), "lambda_ent": lam}
            losses = []
            history.append(row)
            ckpts.append(Checkpoint(trainable_state(model), score, step + 1))
            if log is not None:
                log(row)

    def score_state(state):
        load_trainable(model, state)
        if live_tokens:
            bank.refresh()
        return mean_r(predict(model, builder, bank, val_idx), y_all[val_idx])

    if recipe.soup_k == 0:
        state, soup_score, members = ckpts[-1].state, ckpts[-1].score, [len(ckpts) - 1]
    else:
        state, soup_score, members = greedy_soup(ckpts, recipe.soup_k, score_state)
    load_trainable(model, state)
    if live_tokens:
        bank.refresh()
    return TrainResult(model, history, ckpts, soup_score, members, max(c.score for c in ckpts))


# ------------------------------------------------------------------ soup
def average_states(states: Sequence[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    keys = list(states[0])
    for s in states[1:]:
        if list(s) != keys or any(s[k].shape != states[0][k].shape for k in keys):
            raise ValueError("soup: checkpoints have different parameter sets or shapes")
    out = {}
    for k in keys:
        acc = np.zeros_like(states[0][k])
        for s in states:  # fixed summation order
            acc = acc + s[k]
        out[k] = acc / len(states)
    return out


def greedy_soup(ckpts: Sequence[Checkpoint], k: int, score_fn: Callable[[dict], float]
                ) -> tuple[dict[str, np.ndarray], float, list[int]]:
    """Sort by val score, keep top k, add each next candidate iff the uniform average improves.

    Returns (averaged state, its val score, indices of accepted checkpoints).
    """
    if not ckpts:
        raise ValueError("soup needs at least one checkpoint")
    average_states([c.state for c in ckpts])  # shape check
    ranked = sorted(range(len(ckpts)), key=lambda i: (-ckpts[i].score, i))[:k]
    members = [ranked[0]]
    best = ckpts[ranked[0]].score
    for i in ranked[1:]:
        cand = average_states([ckpts[j].state for j in members + [i]])
        s = score_fn(cand)
        if s > best:
            members.append(i)
            best = s
    return average_states([ckpts[j].state for j in members]), best, members


# ------------------------------------------------------------------ atlases
def make_atlases(voxels: VoxelSet, a: int, b: int, seed: int = 0, fixed: bool = False,
                 max_retries: int = 10) -> list[np.ndarray]:
    """``a`` partitions of the voxels into ``b`` ROIs by k-means on coordinates.

    ``fixed`` reuses the first atlas for every member group (fixed-atlas ensemble).
    """
    from sklearn.cluster import KMeans

    n = voxels.n_voxels
    if b > n:
        raise ValueError(f"b={b} ROIs exceeds {n} voxels")
    atlases = []
    for i in range(a):
        if b == 1:
            atlases.append(np.zeros(n, dtype=np.int64))
            continue
        if fixed and atlases:
            atlases.append(atlases[0].copy())
            continue
        for attempt in range(max_retries + 1):
            km = KMeans(n_clusters=b, n_init=1, random_state=int(seed) * 1000 + i * 17 + attempt)
            labels = km.fit_predict(voxels.coords).astype(np.int64)
            if np.unique(labels).size == b:
                break
        else:
            raise RuntimeError(f"k-means produced an empty ROI after {max_retries} retries")
        atlases.append(labels)
    return atlases


@dataclass
class ZooMember:
    atlas: int
    roi: int
    voxel_idx: np.ndarray
    model: EncodingModel
    result: TrainResult | None = None


@dataclass
class Zoo:
    members: list[ZooMember]
    n_voxels: int
    atlases: list[np.ndarray] = field(default_factory=list)

    def coverage(self) -> np.ndarray:
        count = np.zeros(self.n_voxels, dtype=np.int64)
        for m in self.members:
            count[m.voxel_idx] += 1
        return count


def member_config(base: ModelConfig, recipe_seed: int, atlas: int, roi: int) -> ModelConfig:
    return replace(base, seed=int(base.seed) * 7919 + recipe_seed * 104729 + atlas * 131 + roi)


def _train_member(args):
    cfg, voxels, voxel_idx, ds, recipe, atlas, roi = args
    model = EncodingModel(cfg, voxels)
    bank = _worker_bank(model, ds)
    res = train_one(model, ds, replace(recipe, seed=recipe.seed * 1000 + atlas * 31 + roi), bank=bank,
                    voxel_idx=voxel_idx)
    return atlas, roi, res.model.state_dict(), res.history, res.soup_score, res.best_score


_BANKS: dict[str, FeatureBank] = {}


def _worker_bank(model: EncodingModel, ds: Dataset) -> FeatureBank:
    key = f"{id(ds)}:{model.backbone.vit_hash()}:{model.backbone.live_required}"
    if model.backbone.live_required:
        return model.make_bank(ds.images)
    if key not in _BANKS:
        _BANKS.clear()
        _BANKS[key] = model.make_bank(ds.images)
    return _BANKS[key]


def train_zoo(base: ModelConfig, ds: Dataset, recipe: RecipeConfig, jobs: int = 1,
              bank: FeatureBank | None = None) -> Zoo:
    """Train one model per (atlas, ROI); members are independent and may run in parallel."""
    atlases = make_atlases(ds.voxels, recipe.a, recipe.b, recipe.seed, fixed=recipe.mode == "fixed")
    tasks = []
    for i, labels in enumerate(atlases):
        for r in range(recipe.b):
            vidx = np.flatnonzero(labels == r)
            cfg = member_config(base, recipe.seed, i, r)
            tasks.append((cfg, ds.voxels.subset(vidx), vidx, ds, recipe, i, r))
    members = []
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_train_member, tasks))
    else:
        if bank is not None:
            _BANKS.clear()
            _BANKS[f"{id(ds)}:{bank.weight_hash}:False"] = bank
        results = [_train_member(t) for t in tasks]
    for (cfg, vox, vidx, *_), (atlas, roi, state, hist, soup_score, best) in zip(tasks, results):
        model = EncodingModel(cfg, vox)
        model.load_state_dict(state)
        tr = TrainResult(model, hist, [], soup_score, [], best)
        members.append(ZooMember(atlas, roi, vidx, model, tr))
    return Zoo(members, ds.n_voxels, atlases)


def ensemble_predict(zoo: Zoo, ds: Dataset, idx: np.ndarray, mask: InputMask,
                     bank: FeatureBank | None = None) -> np.ndarray:
    """Per-voxel uniform mean over every member whose ROI contains the voxel."""
    count = zoo.coverage()
    if np.any(count == 0):
        raise CoverageError(f"{int(np.sum(count == 0))} voxels are not covered by any zoo member")
    total = np.zeros((len(idx), zoo.n_voxels))
    for m in zoo.members:  # fixed order
        b = bank if bank is not None and not m.model.backbone.live_required else _worker_bank(m.model, ds)
        builder = InputBuilder(ds, mask, m.model.config.memory.t_mem)
        total[:, m.voxel_idx] += predict(m.model, builder, b, idx)
    return total / count[None, :]


# ------------------------------------------------------------------ distillation
def distill(student: EncodingModel, teacher_predictions: np.ndarray, ds: Dataset, recipe: RecipeConfig,
            bank: FeatureBank | None = None, teacher_voxels: VoxelSet | None = None) -> TrainResult:
    """Train ``student`` on teacher outputs only (train split loss, teacher-output val selection)."""
    if teacher_predictions.shape != (ds.n_trials, student.n_voxels):
        raise ValueError(f"teacher predictions {teacher_predictions.shape} do not match "
                         f"({ds.n_trials}, {student.n_voxels})")
    if teacher_voxels is not None and not np.array_equal(teacher_voxels.coords, student.voxels.coords):
        raise ValueError("student and teacher voxel sets differ")
    return train_one(student, ds, recipe, bank=bank, targets=teacher_predictions,
                     steps=recipe.steps)


def write_history(path: str | Path, history: Sequence[dict]) -> None:
    Path(path).write_text("".join(json.dumps(row, sort_keys=True) + "\n" for row in history))
