"""Information tracker: one restricted model per lag, score-vs-lag curves, periodicity detection."""

from __future__ import annotations

import json
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import curve_fit

from .backbone import BackboneConfig
from .blobio import canonical_json
from .heads import HeadsConfig
from .memory import MemoryConfig
from .metrics import pearson_columns, roi_aggregate, svg_lines, write_csv
from .model import EncodingModel, FeatureBank, ModelConfig
from .synthgen import Dataset
from .training import InputBuilder, InputMask, RecipeConfig, predict, train_one

RAND = "rand"


@dataclass(frozen=True)
class TrackerConfig:
    depth: int = 4
    width: int = 32
    heads: int = 4
    d: int = 32
    t_mem: int = 32
    steps: int = 300
    lr: float = 2e-3
    batch_size: int = 16
    eval_every: int = 50
    lambda_ent: float = 0.01
    seed: int = 0
    backbone_seed: int = 0
    lag_min: int = 2
    threshold: float = 0.3
    memory_roi: str = "memory"

    def model_config(self) -> ModelConfig:
        bb = BackboneConfig.evenly_spaced(self.depth, width=self.width, heads=self.heads, seed=self.backbone_seed)
        return ModelConfig(backbone=bb, heads=HeadsConfig(d=self.d),
                           memory=MemoryConfig(enabled=False, t_mem=self.t_mem), seed=self.seed)

    def recipe(self, mask: InputMask) -> RecipeConfig:
        # restricted: no soup, the final weights are used
        return RecipeConfig(steps=self.steps, lr=self.lr, batch_size=self.batch_size, eval_every=self.eval_every,
                            lambda_ent=self.lambda_ent, soup_k=0, input_mask=mask.to_spec(), seed=self.seed)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LagSweepResult:
    lags: np.ndarray  # [T]
    roi_names: list[str]
    roi_label: np.ndarray  # [N]
    voxel_r: np.ndarray  # [T, N]
    rand_r: np.ndarray  # [N]
    config_hashes: list[str]
    complete: bool = True

    @property
    def roi_r(self) -> np.ndarray:
        """[T, R] mean r per lag and ROI."""
        return np.stack([[self.voxel_r[t, self.roi_label == k].mean() if np.any(self.roi_label == k) else np.nan
                          for k in range(len(self.roi_names))] for t in range(len(self.lags))])

    @property
    def rand_roi_r(self) -> np.ndarray:
        return np.array([self.rand_r[self.roi_label == k].mean() for k in range(len(self.roi_names))])

    def curve(self, roi: str) -> np.ndarray:
        return self.roi_r[:, self.roi_names.index(roi)]


def _lag_hash(cfg: TrackerConfig, mask: InputMask) -> str:
    import hashlib

    doc = {"model": cfg.model_config().to_dict(), "recipe": cfg.recipe(mask).to_dict()}
    return hashlib.sha256(canonical_json(doc).encode()).hexdigest()


_STATE: dict = {}


def _init_worker(ds: Dataset, cfg: TrackerConfig) -> None:
    model = EncodingModel(cfg.model_config(), ds.voxels)
    _STATE["ds"], _STATE["cfg"] = ds, cfg
    _STATE["bank"] = model.make_bank(ds.images)


def _run_lag(lag) -> np.ndarray:
    ds, cfg, bank = _STATE["ds"], _STATE["cfg"], _STATE["bank"]
    mask = InputMask(frames="rand", condM=False, condB=False, condT=False) if lag == RAND else \
        InputMask(frames="lag", lag=int(lag), condM=False, condB=False, condT=False)
    model = EncodingModel(cfg.model_config(), ds.voxels)
    res = train_one(model, ds, cfg.recipe(mask), bank=bank)
    test = ds.split_index("test")
    builder = InputBuilder(ds, mask, cfg.t_mem, rand_seed=cfg.seed)
    return pearson_columns(predict(res.model, builder, bank, test), ds.responses[test])


def lag_sweep(ds: Dataset, cfg: TrackerConfig = TrackerConfig(), jobs: int = 1,
              out_dir: str | Path | None = None) -> LagSweepResult:
    """Train one single-lag model per n in 0..t_mem-1 plus the T=rand control."""
    tasks: list = list(range(cfg.t_mem)) + [RAND]
    hashes = [_lag_hash(cfg, InputMask(frames="lag", lag=n, condM=False, condB=False, condT=False))
              for n in range(cfg.t_mem)]
    results: dict = {}
    try:
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=(ds, cfg)) as pool:
                for lag, r in zip(tasks, pool.map(_run_lag, tasks)):
                    results[lag] = r
        else:
            _init_worker(ds, cfg)
            for lag in tasks:
                results[lag] = _run_lag(lag)
    finally:
        _STATE.clear()
        if len(results) < len(tasks) and out_dir is not None:
            _save_partial(results, out_dir)
    voxel_r = np.stack([results[n] for n in range(cfg.t_mem)])
    res = LagSweepResult(np.arange(cfg.t_mem), list(ds.voxels.roi_names), ds.voxels.roi_label.copy(), voxel_r,
                         results[RAND], hashes)
    if out_dir is not None:
        write_sweep(res, out_dir, cfg)
    return res


def _save_partial(results: dict, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    done = {str(k): [float(v) for v in r] for k, r in results.items()}
    (out / "partial.json").write_text(canonical_json(done))


# ------------------------------------------------------------------ periodicity
@dataclass
class PeriodResult:
    period: int | None  # None means "none"
    strength: float
    autocorr: np.ndarray = field(repr=False)  # index L -> autocorrelation at lag L (NaN below 2)

    def to_dict(self) -> dict:
        return {"period": "none" if self.period is None else int(self.period), "strength": float(f"{self.strength:.6g}"),
                "autocorr": [None if np.isnan(v) else float(f"{v:.6g}") for v in self.autocorr]}


def _exp_decay(x, a, tau, c):
    return a * np.exp(-x / tau) + c


def detrend(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Subtract the best-fit exponential decay (falls back to a linear fit)."""
    span = float(x.max() - x.min()) or 1.0
    p0 = (float(y[0] - y[-1]), span / 3.0, float(y[-1]))
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            popt, _ = curve_fit(_exp_decay, x - x.min(), y, p0=p0,
                                bounds=([-np.inf, 0.3, -np.inf], [np.inf, 50.0 * span, np.inf]), maxfev=5000)
        return y - _exp_decay(x - x.min(), *popt)
    except (RuntimeError, ValueError):
        coef = np.polyfit(x, y, 1)
        return y - np.polyval(coef, x)


def autocorrelation(r: np.ndarray, max_lag: int) -> np.ndarray:
    """Mean lagged product over the n - L overlapping pairs, divided by the series variance.

    A noiseless periodic series scores 1 at its period whatever the overlap.
    """
    r = r - r.mean()
    n = len(r)
    var = np.dot(r, r) / n
    out = np.full(max_lag + 1, np.nan)
    if var <= 0:
        out[:] = 0.0
        return out
    for lag in range(min(max_lag + 1, n)):
        out[lag] = np.dot(r[: n - lag], r[lag:]) / (n - lag) / var
    return out


def detect_period(curve, lag_min: int = 2, threshold: float = 0.3, max_lag: int | None = None,
                  expected_period: int | None = None) -> PeriodResult:
    """Periodicity of a score-vs-lag curve after exponential detrending.

    Lags below ``lag_min`` are dropped.  The period is the smallest local
    maximum of the autocorrelation (over lags 2..max_lag, default len/2) whose
    value reaches 90% of the largest peak, so a harmonic never outranks the
    fundamental.  Strength below ``threshold`` reports no period.
    """
    curve = np.asarray(curve, dtype=np.float64)
    need = max(3 * (expected_period or 3), lag_min + 6)
    if curve.ndim != 1 or len(curve) < need:
        raise ValueError(f"curve too short for period detection: {len(curve)} < {need}")
    max_lag = len(curve) // 2 if max_lag is None else max_lag
    x = np.arange(len(curve), dtype=np.float64)[lag_min:]
    y = curve[lag_min:]
    resid = detrend(x, y)
    if np.std(resid) <= 1e-6 * max(float(np.ptp(y)), 1e-12):
        # the decay model explains the curve exactly: nothing periodic left
        return PeriodResult(None, 0.0, np.full(max_lag + 1, np.nan))
    ac = autocorrelation(resid, max_lag)
    ac[:2] = np.nan
    peaks = []
    for L in range(2, max_lag + 1):
        left = ac[L - 1] if L - 1 >= 2 else -np.inf
        right = ac[L + 1] if L + 1 <= max_lag else -np.inf
        if ac[L] > left and ac[L] >= right:
            peaks.append(L)
    if not peaks:
        return PeriodResult(None, 0.0, ac)
    top = max(ac[L] for L in peaks)
    period = min(L for L in peaks if ac[L] >= top - 0.1 * abs(top))
    strength = float(ac[period])
    if strength < threshold:
        return PeriodResult(None, strength, ac)
    return PeriodResult(int(period), strength, ac)


def null_strengths(n_curves: int, length: int = 32, seed: int = 0, lag_min: int = 2, noise: float = 0.015,
                   spike: float = 0.35) -> np.ndarray:
    """Detection strengths on simulated replay-free curves.

    Each curve is a decaying T=0 peak, one delayed-response spike at a random
    lag (the replay-disabled generator's memory voxels) and white noise.
    ``spike=0`` gives pure decay plus noise.
    """
    rng = np.random.default_rng(seed)
    x = np.arange(length)
    out = np.zeros(n_curves)
    for i in range(n_curves):
        curve = 0.8 * np.exp(-x / rng.uniform(0.3, 2.0)) + noise * rng.standard_normal(length)
        if spike:
            curve[rng.integers(lag_min, length)] += spike * rng.uniform(0.5, 1.5)
        out[i] = detect_period(curve, lag_min=lag_min, threshold=-np.inf).strength
    return out


def calibrate_threshold(strengths: np.ndarray, target_fpr: float = 0.05) -> float:
    """Smallest threshold whose false-positive rate on null strengths is <= target_fpr."""
    s = np.sort(np.asarray(strengths, dtype=np.float64))
    return float(np.quantile(s, 1.0 - target_fpr, method="higher"))


def false_positive_rate(strengths: np.ndarray, threshold: float) -> float:
    return float(np.mean(np.asarray(strengths) >= threshold))


# ------------------------------------------------------------------ outputs
CURVE_COLUMNS = ("lag", "roi", "mean_r")


def roi_curve_rows(res: LagSweepResult) -> list[dict]:
    roi_r = res.roi_r
    return [{"lag": int(-lag), "roi": name, "mean_r": f"{roi_r[t, k]:.10g}"}
            for t, lag in enumerate(res.lags) for k, name in enumerate(res.roi_names)]


def period_report(res: LagSweepResult, cfg: TrackerConfig = TrackerConfig()) -> dict:
    rois = {}
    for k, name in enumerate(res.roi_names):
        rois[name] = detect_period(res.roi_r[:, k], lag_min=cfg.lag_min, threshold=cfg.threshold).to_dict()
    report = {"rois": rois, "rand_mean_r": float(f"{res.rand_r.mean():.6g}"),
              "rand_roi_mean_r": {n: float(f"{v:.6g}") for n, v in zip(res.roi_names, res.rand_roi_r)},
              "complete": res.complete}
    if cfg.memory_roi in res.roi_names:
        k = res.roi_names.index(cfg.memory_roi)
        curve = res.roi_r[:, k]
        peak = int(np.argmax(curve[1:]) + 1)
        report["memory_roi"] = {"name": cfg.memory_roi, "period": rois[cfg.memory_roi]["period"],
                                "peak_lag": peak, "peak_exceeds_T0": bool(curve[peak] > curve[0])}
    return report


def write_sweep(res: LagSweepResult, out_dir: str | Path, cfg: TrackerConfig = TrackerConfig(),
                svg: bool = True) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for t, lag in enumerate(res.lags):
        rows = [{"voxel": i, "roi": res.roi_names[res.roi_label[i]], "r": f"{res.voxel_r[t, i]:.10g}"}
                for i in range(res.voxel_r.shape[1])]
        write_csv(out / f"lag_{int(lag):02d}.csv", rows, ("voxel", "roi", "r"))
    write_csv(out / "lag_rand.csv", [{"voxel": i, "roi": res.roi_names[res.roi_label[i]], "r": f"{v:.10g}"}
                                     for i, v in enumerate(res.rand_r)], ("voxel", "roi", "r"))
    write_csv(out / "curves.csv", roi_curve_rows(res), CURVE_COLUMNS)
    report = period_report(res, cfg)
    report["config_hashes"] = res.config_hashes
    report["tracker"] = cfg.to_dict()
    (out / "period_report.json").write_text(canonical_json(report))
    if svg:
        series = {name: res.roi_r[:, k] for k, name in enumerate(res.roi_names)}
        (out / "curves.svg").write_text(svg_lines(series, -res.lags, title="score vs lag", xlabel="T",
                                                  ylabel="mean r"))
    return report
