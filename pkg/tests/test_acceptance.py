"""End-to-end acceptance checks; each test prints one PASS/FAIL line with its measured values.

The training-based criteria run the real pipeline on the synthetic presets and
take most of an hour on one CPU.
"""

import time
from dataclasses import replace

import numpy as np
import pytest
from scipy.linalg import orthogonal_procrustes

import gradcases
import oracles
from conftest import TINY_BACKBONE, tiny_spec
from memenc import autodiff as ad
from memenc import cli
from memenc import synthgen as sg
from memenc.autodiff import Tensor
from memenc.backbone import Backbone, BackboneConfig
from memenc.heads import HeadsConfig
from memenc.memory import MemoryConfig
from memenc.metrics import noise_ceiling, pearson, pearson_columns, repeat_groups
from memenc.model import EncodingModel, ModelConfig
from memenc.tracker import TrackerConfig, detect_period, lag_sweep
from memenc.training import InputBuilder, RecipeConfig, distill, ensemble_predict, predict, train_one, train_zoo

RESULTS: list[str] = []


def verdict(number: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def ds_model_config(ds, seed=0, memory=True):
    return ModelConfig(backbone=BackboneConfig(**ds.spec.backbone_config_dict()),
                       memory=MemoryConfig() if memory else MemoryConfig(enabled=False), seed=seed)


def test_gradient_suite():
    t0 = time.process_time()
    worst = max(gradcases.worst_error(name, seed) for name in gradcases.CASES for seed in range(20))
    spent = time.process_time() - t0
    verdict(1, worst <= 1e-4 and spent < 60,
            f"{len(gradcases.CASES)} ops x 20 seeds, max rel err {worst:.2e} (<= 1e-4), {spent:.1f} s CPU (< 60 s)")


def test_exactness_oracles():
    rng = np.random.default_rng(2024)
    errs = {"bilinear_sample": 0.0, "avgmaxpool": 0.0, "pearson": 0.0, "softmax": 0.0}
    for _ in range(100):
        h, w, c = rng.integers(2, 6, size=3)
        grid, u = rng.normal(size=(h, w, c)), rng.uniform(-1, 1, size=2)
        got = ad.bilinear_sample(Tensor(grid), Tensor(u)).data
        errs["bilinear_sample"] = max(errs["bilinear_sample"], np.abs(got - oracles.bilinear_tent(grid, u)).max())
        m = rng.normal(size=tuple(rng.integers(1, 5, size=3)))
        errs["avgmaxpool"] = max(errs["avgmaxpool"],
                                 np.abs(ad.avgmaxpool(Tensor(m)).data - oracles.avgmaxpool_loops(m)).max())
        x, y = rng.normal(size=(2, int(rng.integers(2, 40))))
        errs["pearson"] = max(errs["pearson"], abs(pearson(x, y)[0] - oracles.pearson_loops(x, y)))
        row = rng.normal(scale=rng.uniform(0.1, 50), size=int(rng.integers(1, 10)))
        errs["softmax"] = max(errs["softmax"], np.abs(ad.softmax(Tensor(row)).data - oracles.softmax_loops(row)).max())
    worst = max(errs.values())
    verdict(2, worst <= 1e-12, ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + " (100 instances each, <= 1e-12)")


def test_adaln_lora_noop():
    cfg = BackboneConfig(image_size=16, patch_size=4, depth=4, width=16, heads=2, tap_layers=(1, 2, 3, 4))
    x = Tensor(np.random.default_rng(7).uniform(size=(3, 16, 16, 3)))

    def outputs(bb, e=None):
        maps, q = bb.forward(x, e)
        return [m.data for m in maps] + [q.data]

    plain = outputs(Backbone(cfg))
    adaln = Backbone(replace(cfg, adaln_enabled=True, n_subjects=2))
    e = adaln.condition_embed(Tensor(np.random.default_rng(8).normal(size=(3, cfg.cond_dim))), np.array([0, 1, 0]))
    lora = Backbone(cfg)
    lora.apply_lora(4)
    same_adaln = all(np.array_equal(a, b) for a, b in zip(plain, outputs(adaln, e)))
    same_lora = all(np.array_equal(a, b) for a, b in zip(plain, outputs(lora)))
    verdict(3, same_adaln and same_lora, f"AdaLN bit-exact {same_adaln}, LoRA bit-exact {same_lora}")


def test_planted_retinotopy():
    t0 = time.process_time()
    ds = sg.generate(sg.preset("retinotopy"))
    model = EncodingModel(ModelConfig(memory=MemoryConfig(enabled=False)), ds.voxels)
    rec = RecipeConfig(steps=300, lr=1e-3, input_mask="frames=current", eval_every=30)
    train_one(model, ds, rec, bank=model.make_bank(ds.images))
    with ad.no_grad():
        u = model.routing()[0].data
    a, b = u - u.mean(0), ds.planted_loc - ds.planted_loc.mean(0)
    rot, _ = orthogonal_procrustes(a, b)
    r = [pearson((a @ rot)[:, k], b[:, k])[0] for k in range(2)]
    spent = time.process_time() - t0
    verdict(4, ds.n_voxels == 512 and min(r) >= 0.8 and spent < 600,
            f"N={ds.n_voxels}, Procrustes r x {r[0]:.3f} y {r[1]:.3f} (>= 0.8), {spent:.0f} s CPU (< 600 s)")


def test_planted_layer_selectivity():
    ds = sg.generate(sg.preset("layer"))
    model = EncodingModel(ds_model_config(ds, memory=False), ds.voxels)
    steps = 1000
    rec = RecipeConfig(steps=steps, lr=2e-3, input_mask="frames=current", eval_every=steps // 10)
    res = train_one(model, ds, rec, bank=model.make_bank(ds.images))
    with ad.no_grad():
        eta = model.routing()[1].data
    depth = ds.archetype_index("depth")
    acc = float(np.mean(eta[depth].argmax(1) == ds.planted_tap[depth]))
    early = [row["entropy"] for row in res.history if row["step"] <= rec.ent_fraction * steps]
    final = res.history[-1]["entropy"]
    reg_on = all(row["lambda_ent"] > 0 for row in res.history if row["step"] <= rec.ent_fraction * steps)
    ok = acc >= 0.9 and min(early) > final and reg_on
    verdict(5, ok, f"tap recovery {acc:.1%} of {len(depth)} depth voxels (>= 90%), entropy first 25% "
                   f"min {min(early):.3f} > final {final:.3f}")


def test_memory_direction():
    t0 = time.process_time()
    gains = []
    for seed in range(3):
        ds = sg.generate(sg.preset("memory", seed=seed))
        mem, test = ds.archetype_index("memory"), ds.split_index("test")
        score = {}
        for mask in ("full", "frames=current"):
            model = EncodingModel(ds_model_config(ds, seed=seed), ds.voxels)
            bank = model.make_bank(ds.images)
            rec = RecipeConfig(steps=400, lr=1e-3, input_mask=mask, eval_every=80, seed=seed)
            train_one(model, ds, rec, bank=bank)
            pred = predict(model, InputBuilder(ds, rec.mask, model.config.memory.t_mem, rand_seed=seed), bank, test)
            score[mask] = float(pearson_columns(pred, ds.responses[test])[mem].mean())
        gains.append(score["full"] - score["frames=current"])
    spent = time.process_time() - t0
    verdict(6, min(gains) >= 0.1 and spent < 900,
            f"memory-voxel gain full vs current-frame {', '.join(f'{g:.3f}' for g in gains)} (>= 0.1), "
            f"{spent:.0f} s CPU (< 900 s)")


def test_ensemble_direction():
    s, m, lr = 300, 300, 1e-3
    rows, ok = [], True
    for seed in range(5):
        ds = sg.generate(sg.preset("full", seed=seed, n_voxels=256))
        test, all_idx = ds.split_index("test"), np.arange(ds.n_trials)
        base = ds_model_config(ds, seed=seed)
        naive = EncodingModel(base, ds.voxels)
        bank = naive.make_bank(ds.images)
        rec = RecipeConfig(steps=s, lr=lr, eval_every=s // 5, seed=seed)
        train_one(naive, ds, rec, bank=bank)
        builder = InputBuilder(ds, rec.mask, base.memory.t_mem)
        r_naive = float(pearson_columns(predict(naive, builder, bank, test), ds.responses[test]).mean())
        erec = RecipeConfig(mode="ensemble", a=4, b=4, steps=s, member_steps=m, lr=lr, eval_every=m // 5, seed=seed)
        zoo = train_zoo(base, ds, erec, bank=bank)
        teacher = ensemble_predict(zoo, ds, all_idx, erec.mask, bank=bank)
        r_ens = float(pearson_columns(teacher[test], ds.responses[test]).mean())
        student = EncodingModel(replace(base, seed=seed + 100), ds.voxels)
        distill(student, teacher, ds, replace(rec, steps=2 * s, eval_every=2 * s // 5), bank=bank)
        r_student = float(pearson_columns(predict(student, builder, bank, test), ds.responses[test]).mean())
        ok = ok and len(zoo.members) == 16 and r_naive <= r_student <= r_ens
        rows.append(f"seed {seed} naive {r_naive:.3f} <= student {r_student:.3f} <= ensemble {r_ens:.3f}")
    verdict(7, ok, "; ".join(rows))


@pytest.fixture(scope="module")
def sweeps():
    out = {}
    for replay in (True, False):
        for seed in range(5):
            ds = sg.generate(sg.preset("tracker", seed=seed, replay_enabled=replay))
            t0 = time.process_time()
            res = lag_sweep(ds, TrackerConfig(seed=seed))
            out[replay, seed] = (res, time.process_time() - t0)
    return out


def test_tracker_period_recovery(sweeps):
    found = {replay: [detect_period(sweeps[replay, s][0].curve("memory")).period for s in range(5)]
             for replay in (True, False)}
    hits = sum(p == 6 for p in found[True])
    nulls = sum(p is None for p in found[False])
    slowest = max(t for _, t in sweeps.values())
    label = lambda ps: [("none" if p is None else p) for p in ps]
    verdict(8, hits >= 4 and nulls >= 4 and slowest < 1800,
            f"replay_period=6 detected {label(found[True])} ({hits}/5 exact, >= 4), replay disabled "
            f"{label(found[False])} ({nulls}/5 none, >= 4), slowest 32-lag sweep {slowest:.0f} s CPU on one "
            f"process (< 1800 s)")


def test_planted_lag_peak(sweeps):
    curves = [sweeps[True, s][0].curve("memory") for s in range(5)]
    peaks = [bool(c[6] > c[5] and c[6] > c[7]) for c in curves]
    assert sum(peaks) >= 4, peaks


def test_shuffled_control(sweeps):
    # one sweep's control is scored on 120 test trials, so its mean r has sampling sd ~0.015;
    # the criterion statistic is the mean over all ten sweeps
    means = [float(res.rand_r.mean()) for res, _ in sweeps.values()]
    pooled = float(np.mean(means))
    verdict(9, abs(pooled) <= 0.02, f"T=rand mean r over {len(means)} sweeps {pooled:.4f} (|r| <= 0.02); "
                                    f"per-sweep range [{min(means):.4f}, {max(means):.4f}]")


def test_noise_ceiling_limits():
    ds = sg.generate(tiny_spec(noise_std=0.0))
    live = np.isin(ds.archetype, [sg.ARCHETYPES.index(a) for a in sg.IMAGE_DRIVEN])
    nc_clean = noise_ceiling(ds.responses[:, live], repeat_groups(ds.repeat_group))
    dev = float(np.max(np.abs(nc_clean - 1.0)))
    noise_spec = sg.GeneratorSpec(n_voxels=500, n_runs=10, trials_per_run=40, repeat_fraction=0.34, t_mem=12,
                                  voxel_mix={"noise": 1.0}, backbone=TINY_BACKBONE, seed=5)
    noisy = sg.generate(noise_spec)
    groups = repeat_groups(noisy.repeat_group)[:100]
    nc_noise = float(np.mean(noise_ceiling(noisy.responses, groups)))
    verdict(10, dev <= 1e-9 and nc_noise <= 0.1 and len(groups) == 100,
            f"noise_std=0 NC max |NC-1| {dev:.1e} over {int(live.sum())} image-driven voxels (<= 1e-9); "
            f"pure-noise mean NC {nc_noise:.3f} over {noisy.n_voxels} voxels, {len(groups)} repeat groups (<= 0.1)")


def test_determinism(tmp_path):
    import json

    spec = dict(n_voxels=48, n_runs=6, trials_per_run=40, runs_per_session=3, repeat_fraction=0.1, t_mem=12,
                replay_period=4, backbone=TINY_BACKBONE)
    scores = []
    for attempt in ("a", "b"):
        root = tmp_path / attempt
        root.mkdir()
        cfg = root / "cfg.json"
        cfg.write_text(json.dumps({"generator": spec, "heads": {"d": 8}, "memory": {"t_mem": 12, "d_m": 8},
                                   "recipe": {"steps": 20, "batch_size": 8, "eval_every": 5, "soup_k": 3},
                                   "output_dir": str(root / "runs"), "seed": 11}))
        assert cli.main(["generate", "--config", str(cfg), "--out", str(root / "data")]) == 0
        assert cli.main(["train", "--config", str(cfg), "--data", str(root / "data")]) == 0
        run = next((root / "runs").glob("train-*"))
        assert cli.main(["report", "--run", str(run)]) == 0
        scores.append((run.name, (run / "scores.csv").read_bytes(), (run / "scores_roi.csv").read_bytes()))
    same = scores[0] == scores[1]
    verdict(11, same, f"two generate->train->report runs: run id {scores[0][0]} vs {scores[1][0]}, "
                      f"scores.csv {len(scores[0][1])} bytes, byte-identical {same}")
