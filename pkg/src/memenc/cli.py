"""Command-line front end: ``memenc generate | train | distill | track | report``.

Every command takes a JSON run config.  Missing fields are filled with their
defaults and the resolved document is written into the run directory, whose
name is derived from the SHA-256 of that document.

Exit codes: 0 ok, 2 config or user error, 3 numeric failure, 4 internal
invariant violation.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import shutil
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .autodiff import ShapeError
from .backbone import BackboneConfig
from .blobio import canonical_json, manifest_hash, read_blob, write_blob
from .heads import HeadsConfig
from .memory import MemoryConfig
from .metrics import dump_json, score_table, svg_bars, svg_lines, write_scores
from .model import EncodingModel, ModelConfig
from .synthgen import SPLIT_NAMES, ConfigError, Dataset, GeneratorSpec, generate, load_dataset, preset, save_dataset
from .tracker import TrackerConfig, lag_sweep
from .training import (DivergenceError, InputBuilder, InputMask, RecipeConfig, distill, ensemble_predict, predict,
                       train_one, train_zoo, write_history)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_INVARIANT = 0, 2, 3, 4

SECTIONS = ("generator", "backbone", "heads", "memory", "recipe", "metrics", "tracker", "output_dir", "seed")
METRICS_DEFAULTS = {"split": "test", "nc_seed": 0, "nc_splits": 20}
DONE = "DONE"


class InvariantError(AssertionError):
    pass


# ------------------------------------------------------------------ config
def _build(cls, fields: dict, section: str):
    try:
        return cls(**fields)
    except TypeError as exc:
        raise ConfigError(f"[{section}] {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def _section(raw: dict, name: str) -> dict:
    val = raw.get(name, {})
    if not isinstance(val, dict):
        raise ConfigError(f"section {name!r} must be an object")
    return dict(val)


def resolve_config(raw: dict, seed: int | None = None) -> dict:
    """Materialize every default; reject unknown keys. ``seed`` overrides the top-level seed."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    seed = int(raw.get("seed", 0) if seed is None else seed)

    gen = _section(raw, "generator")
    name = gen.pop("preset", None)
    gen.setdefault("seed", seed)
    try:
        spec = preset(name, **gen) if name else GeneratorSpec(**gen)
    except TypeError as exc:
        raise ConfigError(f"[generator] {exc}") from None

    bb = {**spec.backbone_config_dict(), **_section(raw, "backbone")}
    backbone = _build(BackboneConfig, bb, "backbone")
    heads = _build(HeadsConfig, _section(raw, "heads"), "heads")
    memory = _build(MemoryConfig, _section(raw, "memory"), "memory")
    rec = _section(raw, "recipe")
    rec.setdefault("seed", seed)
    recipe = _build(RecipeConfig, rec, "recipe")

    metrics = _section(raw, "metrics")
    bad = set(metrics) - set(METRICS_DEFAULTS)
    if bad:
        raise ConfigError(f"[metrics] unknown keys {sorted(bad)}")
    metrics = {**METRICS_DEFAULTS, **metrics}
    if metrics["split"] not in SPLIT_NAMES:
        raise ConfigError(f"[metrics] split must be one of {SPLIT_NAMES}")

    trk = _section(raw, "tracker")
    trk.setdefault("seed", seed)
    tracker = _build(TrackerConfig, trk, "tracker")

    return {"generator": spec.to_dict(), "backbone": backbone.to_dict(), "heads": heads.to_dict(),
            "memory": memory.to_dict(), "recipe": asdict(recipe), "metrics": metrics,
            "tracker": asdict(tracker), "output_dir": str(raw.get("output_dir", "runs")), "seed": seed}


def load_config(path: str | Path, seed: int | None = None) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return resolve_config(raw, seed)


def config_hash(resolved: dict, **extra) -> str:
    doc = {k: v for k, v in resolved.items() if k != "output_dir"}
    doc.update(extra)
    return hashlib.sha256(canonical_json(doc).encode()).hexdigest()


def model_config(resolved: dict) -> ModelConfig:
    return ModelConfig.from_dict({k: resolved[k] for k in ("backbone", "heads", "memory", "seed")})


def recipe_config(resolved: dict) -> RecipeConfig:
    return RecipeConfig(**resolved["recipe"])


def _load_data(path: str | Path) -> tuple[Dataset, str]:
    path = Path(path)
    stem = path / "dataset" if path.is_dir() else path.with_suffix("")
    if not stem.with_suffix(".json").exists():
        raise ConfigError(f"no dataset at {path}")
    return load_dataset(stem), manifest_hash(stem)


def _prepare_run(resolved: dict, kind: str, digest: str, force: bool) -> Path:
    run = Path(resolved["output_dir"]) / f"{kind}-{digest[:16]}"
    if run.exists():
        if (run / DONE).exists() and not force:
            raise ConfigError(f"run {run} already exists (same config hash); pass --force to overwrite")
        shutil.rmtree(run)
    run.mkdir(parents=True)
    return run


def _finish(run: Path) -> None:
    (run / DONE).write_text("")


# ------------------------------------------------------------------ report
def score_run(run: Path, ds: Dataset, svg: bool = False) -> dict:
    """Score saved predictions of ``run`` on the configured split and write the tables."""
    info = json.loads((run / "run.json").read_text())
    resolved = info["config"]
    arrays, _ = read_blob(run / "predictions")
    pred = arrays["pred"]
    if pred.shape != ds.responses.shape:
        raise InvariantError(f"predictions {pred.shape} do not match responses {ds.responses.shape}")
    m = resolved["metrics"]
    idx = ds.split_index(m["split"])
    prov = {"model_id": info["run_id"], "input_mask": resolved["recipe"]["input_mask"],
            "recipe": resolved["recipe"]["mode"], "lag": None, "split": m["split"]}
    if "teacher_id" in info:
        prov["teacher_id"] = info["teacher_id"]
    table = score_table(pred[idx], ds.responses[idx], ds.repeat_group[idx], ds.voxels.roi_label,
                        ds.voxels.roi_names, provenance=prov, nc_seed=m["nc_seed"], nc_splits=m["nc_splits"])
    summary = write_scores(run, table)
    if not (-1.0 - 1e-12 <= table.r.min() and table.r.max() <= 1.0 + 1e-12):
        raise InvariantError("correlation outside [-1, 1]")
    if svg:
        bars = {row["roi"]: (row["mean_r"] or 0.0) for row in summary["rois"]}
        (run / "scores_roi.svg").write_text(svg_bars(bars, title="mean r per ROI", ylabel="mean r"))
        hist = run / "history.jsonl"
        if hist.exists():
            rows = [json.loads(line) for line in hist.read_text().splitlines() if line]
            if rows:
                (run / "history.svg").write_text(svg_lines({"val_r": [r["val_r"] for r in rows]},
                                                           [r["step"] for r in rows], title="validation r",
                                                           xlabel="step", ylabel="mean r"))
    return summary


def _save_predictions(run: Path, pred: np.ndarray, meta: dict) -> None:
    write_blob(run / "predictions", {"pred": pred}, meta=meta)


def _write_run_info(run: Path, resolved: dict, run_id: str, data: str, data_hash: str, **extra) -> None:
    info = {"config": resolved, "run_id": run_id, "data": str(Path(data).resolve()), "data_hash": data_hash}
    info.update(extra)
    (run / "run.json").write_text(canonical_json(info))
    (run / "config.json").write_text(canonical_json(resolved))


# ------------------------------------------------------------------ commands
def cmd_generate(args) -> int:
    resolved = load_config(args.config, args.seed)
    ds = generate(GeneratorSpec.from_dict(resolved["generator"]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    digest = save_dataset(ds, out)
    (out / "config.json").write_text(canonical_json(resolved))
    print(digest)
    return EXIT_OK


def _train_single(model: EncodingModel, ds: Dataset, recipe: RecipeConfig, run: Path, targets=None):
    bank = model.make_bank(ds.images)
    if targets is None:
        res = train_one(model, ds, recipe, bank=bank)
    else:
        res = distill(model, targets, ds, recipe, bank=bank)
    builder = InputBuilder(ds, recipe.mask, model.config.memory.t_mem, rand_seed=recipe.seed)
    pred = predict(model, builder, bank, np.arange(ds.n_trials))
    write_history(run / "history.jsonl", res.history)
    dump_json(run / "soup.json", {"members": res.soup_members, "soup_val_r": res.soup_score,
                                  "best_val_r": res.best_score,
                                  "checkpoint_steps": [c.step for c in res.checkpoints]})
    if res.soup_score < res.best_score - 1e-9 and recipe.soup_k > 0:
        raise InvariantError(f"soup val r {res.soup_score} below best checkpoint {res.best_score}")
    for c in res.checkpoints:
        write_blob(run / "checkpoints" / f"step_{c.step:06d}", c.state, meta={"val_r": c.score, "step": c.step})
    return res, pred


def cmd_train(args) -> int:
    resolved = load_config(args.config, args.seed)
    rec = dict(resolved["recipe"])
    if args.mask is not None:
        try:
            rec["input_mask"] = InputMask.parse(args.mask).to_spec()
        except ValueError as exc:
            raise ConfigError(f"--mask: {exc}") from None
    if args.recipe is not None:
        rec["mode"] = args.recipe
        if args.recipe == "naive":
            rec["a"] = rec["b"] = 1
    resolved["recipe"] = asdict(_build(RecipeConfig, rec, "recipe"))
    ds, data_hash = _load_data(args.data)
    digest = config_hash(resolved, data_hash=data_hash, command="train")
    run = _prepare_run(resolved, "train", digest, args.force)
    _write_run_info(run, resolved, digest[:16], args.data, data_hash)
    recipe, mcfg = recipe_config(resolved), model_config(resolved)
    if recipe.mode == "naive":
        model = EncodingModel(mcfg, ds.voxels)
        _, pred = _train_single(model, ds, recipe, run)
        model.save(run / "model", meta={"run_id": digest[:16]})
    else:
        zoo = train_zoo(mcfg, ds, recipe, jobs=args.jobs)
        pred = ensemble_predict(zoo, ds, np.arange(ds.n_trials), recipe.mask)
        for m in zoo.members:
            stem = run / "members" / f"atlas{m.atlas}_roi{m.roi}"
            m.model.save(stem, meta={"voxel_idx": m.voxel_idx.tolist(), "atlas": m.atlas, "roi": m.roi})
            write_history(stem.with_suffix(".history.jsonl"), m.result.history)
        dump_json(run / "atlases.json", {"labels": [a.tolist() for a in zoo.atlases]})
    _save_predictions(run, pred, {"run_id": digest[:16]})
    summary = score_run(run, ds, svg=args.svg)
    _finish(run)
    print(run)
    print(f"single_trial_mean_r={summary['single_trial_mean_r']} challenge_score={summary['challenge_score']}")
    return EXIT_OK


def cmd_distill(args) -> int:
    teacher = Path(args.teacher)
    if not (teacher / DONE).exists() or not (teacher / "predictions.json").exists():
        raise ConfigError(f"teacher run not found or incomplete: {teacher}")
    tinfo = json.loads((teacher / "run.json").read_text())
    resolved = load_config(args.student_config, args.seed)
    rec = dict(resolved["recipe"], mode="naive", a=1, b=1)
    resolved["recipe"] = asdict(_build(RecipeConfig, rec, "recipe"))
    data = args.data if args.data is not None else tinfo["data"]
    ds, data_hash = _load_data(data)
    if data_hash != tinfo["data_hash"]:
        raise ConfigError("student data differs from the teacher's training data")
    targets = read_blob(teacher / "predictions")[0]["pred"]
    digest = config_hash(resolved, data_hash=data_hash, command="distill", teacher=tinfo["run_id"])
    run = _prepare_run(resolved, "distill", digest, args.force)
    _write_run_info(run, resolved, digest[:16], data, data_hash, teacher_id=tinfo["run_id"])
    model = EncodingModel(model_config(resolved), ds.voxels)
    _, pred = _train_single(model, ds, recipe_config(resolved), run, targets=targets)
    model.save(run / "model", meta={"run_id": digest[:16], "teacher_id": tinfo["run_id"]})
    _save_predictions(run, pred, {"run_id": digest[:16], "teacher_id": tinfo["run_id"]})
    summary = score_run(run, ds, svg=args.svg)
    teacher_summary = json.loads((teacher / "scores_summary.json").read_text())
    dump_json(run / "distill.json", {"teacher_id": tinfo["run_id"],
                                     "teacher_mean_r": teacher_summary["single_trial_mean_r"],
                                     "student_mean_r": summary["single_trial_mean_r"]})
    _finish(run)
    print(run)
    return EXIT_OK


def cmd_track(args) -> int:
    resolved = load_config(args.config, args.seed)
    ds, data_hash = _load_data(args.data)
    digest = config_hash({"tracker": resolved["tracker"], "output_dir": ""}, data_hash=data_hash, command="track")
    run = _prepare_run(resolved, "track", digest, args.force)
    _write_run_info(run, resolved, digest[:16], args.data, data_hash)
    cfg = TrackerConfig(**resolved["tracker"])
    lag_sweep(ds, cfg, jobs=args.jobs, out_dir=run / "lagsweep")
    report = json.loads((run / "lagsweep" / "period_report.json").read_text())
    _finish(run)
    print(run)
    print(json.dumps({name: r["period"] for name, r in report["rois"].items()}, sort_keys=True))
    return EXIT_OK


def cmd_report(args) -> int:
    run = Path(args.run)
    if not (run / "run.json").exists():
        raise ConfigError(f"not a run directory: {run}")
    info = json.loads((run / "run.json").read_text())
    ds, data_hash = _load_data(info["data"])
    if data_hash != info["data_hash"]:
        raise InvariantError("dataset changed since the run was trained")
    summary = score_run(run, ds, svg=args.svg)
    print(json.dumps({"single_trial_mean_r": summary["single_trial_mean_r"],
                      "challenge_score": summary["challenge_score"]}, sort_keys=True))
    return EXIT_OK


# ------------------------------------------------------------------ entry point
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="memenc", description="Memory encoding model on synthetic data.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a synthetic dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a naive model or a random-ROI ensemble")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--mask", help='input mask, e.g. "frames=current" or "frames=all,condM"')
    t.add_argument("--recipe", choices=("naive", "ensemble", "fixed"))
    t.add_argument("--seed", type=int)
    t.add_argument("--jobs", type=int, default=1)
    t.add_argument("--force", action="store_true")
    t.add_argument("--svg", action="store_true")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("distill", help="train a student on a teacher run's outputs")
    d.add_argument("--teacher", required=True)
    d.add_argument("--student-config", required=True)
    d.add_argument("--data")
    d.add_argument("--seed", type=int)
    d.add_argument("--force", action="store_true")
    d.add_argument("--svg", action="store_true")
    d.set_defaults(func=cmd_distill)

    k = sub.add_parser("track", help="per-lag sweep and periodicity report")
    k.add_argument("--config", required=True)
    k.add_argument("--data", required=True)
    k.add_argument("--seed", type=int)
    k.add_argument("--jobs", type=int, default=1)
    k.add_argument("--force", action="store_true")
    k.set_defaults(func=cmd_track)

    r = sub.add_parser("report", help="rewrite score tables of a finished run")
    r.add_argument("--run", required=True)
    r.add_argument("--svg", action="store_true")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"memenc: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, FloatingPointError) as exc:
        print(f"memenc: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InvariantError, ShapeError) as exc:
        print(f"memenc: invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
