"""Acceptance criteria A1-A8.

Each test records one ``A<n> PASS|FAIL`` line, repeated in the terminal
summary. A3-A5 train real models and are marked ``slow``; on one core A4/A5
take most of the suite's runtime.
"""
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from crm.activity_map import BBox, Person, Scene, build_activity_map, decode_group_by_pooling, decode_individual_by_pooling
from crm.cli import GRADCHECK_TOLERANCE, TINY_GRADCHECK, gradcheck_run, main
from crm.config import run_config_from_dict
from crm.data import Dataset, SyntheticConfig, generate_synthetic, split_dataset
from crm.model import CrmConfig
from crm.tensor import Tensor
from crm.training import (
    Phase,
    TrainConfig,
    evaluate,
    evaluate_predictions,
    fuse_predictions,
    loss_group,
    onehot,
    train_two_step,
)

from oracles import render_brute_force

# Narrow layers keep single-core training within the runtime budgets; the
# depth, kernel sizes and wiring are the full architecture.
WIDTH = 16


def narrow(**kw):
    w = WIDTH
    return CrmConfig(phi_widths=(w, w, w, 2 * w), psi_widths=(w, w, w, 2 * w), zeta_widths=(w, w, w), **kw)


def random_scene(r, grid, n_i, n_g):
    H, W = grid
    persons = []
    for _ in range(int(r.integers(0, 13))):
        w, h = r.uniform(0.3, W / 4), r.uniform(0.3, H / 2)
        x1, y1 = r.uniform(0, W - w), r.uniform(0, H - h)
        persons.append(Person(BBox(x1, y1, x1 + w, y1 + h), int(r.integers(n_i))))
    return Scene(persons, int(r.integers(n_g)), image_size=grid)


def test_a1_rasterizer_oracle(acceptance_line):
    t = time.perf_counter()
    r = np.random.default_rng(2024)
    grid, n_i, n_g = (43, 78), 9, 8
    worst = 0.0
    max_persons = 0
    for _ in range(50):
        s = random_scene(r, grid, n_i, n_g)
        max_persons = max(max_persons, len(s.persons))
        got = build_activity_map(s, grid, n_i, n_g)
        ref = render_brute_force([(p.box.as_tuple(), p.action) for p in s.persons], s.group, grid, n_i, n_g)
        worst = max(worst, float(np.max(np.abs(got - ref))))
    elapsed = time.perf_counter() - t
    ok = worst <= 1e-12 and elapsed < 30
    acceptance_line("A1", ok, f"50 scenes (M <= {max_persons}), max |diff| {worst:.1e} (< 1e-12), {elapsed:.1f} s (< 30 s)")
    assert ok


def test_a2_gradient_integrity(acceptance_line):
    t = time.perf_counter()
    run = run_config_from_dict(TINY_GRADCHECK)
    m = run.model
    assert (m.grid, m.feature_dim, m.stages) == ((12, 16), 8, 2)
    groups = gradcheck_run(run, coords_per_tensor=8, seed=0)
    elapsed = time.perf_counter() - t
    coords = sum(u for _, u in groups.values())
    worst = max(w for w, _ in groups.values())
    every_group = set(groups) == {"backbone", "phi", "psi2", "zeta"} and all(u > 0 for _, u in groups.values())
    ok = coords >= 200 and worst < GRADCHECK_TOLERANCE and every_group and elapsed < 300
    acceptance_line("A2", ok, f"{coords} coordinates over {len(groups)} layer groups, max rel err {worst:.1e} "
                              f"(< 1e-4), {elapsed:.1f} s (< 300 s)")
    assert ok


@pytest.mark.slow
def test_a3_overfit_capacity(acceptance_line):
    t = time.perf_counter()
    ds = generate_synthetic(SyntheticConfig(scenes=64, seed=0))
    cfg = narrow(stages=2)
    tc = TrainConfig(phase1=Phase([(25, 1e-3)], 1.0, 0.0), phase2=Phase([(50, 1e-3)], 1e-4, 1.0), batch_size=2)
    params, _, _ = train_two_step(ds, cfg, tc)
    mca = evaluate(params, cfg, ds).mca
    elapsed = time.perf_counter() - t
    ok = mca >= 0.95 and elapsed < 900
    acceptance_line("A3", ok, f"training-set MCA {100 * mca:.1f}% (>= 95%), {elapsed:.0f} s (< 900 s)")
    assert ok


A4_SEEDS = (0, 1, 2)
# Half-scale scenes: 48x80 images on a 12x20 grid, boxes and gaps halved.
# Epochs are 4x cheaper and every refinement stage can see the whole scene.
A4_SCENES = dict(image_size=(48, 80), grid=(12, 20), box_width=(6, 10), box_height=(10, 16), min_gap=2, jitter=1)
A4_PHASE1 = [(40, 1e-3), (10, 1e-4)]
A4_PHASE2 = [(10, 1e-3), (5, 1e-4)]


@pytest.fixture(scope="session")
def ablation_runs():
    """Full (T = 4) and feature-only models per seed on 400/100 scenes."""
    runs = {}
    for seed in A4_SEEDS:
        train, test = split_dataset(generate_synthetic(SyntheticConfig(scenes=500, seed=seed, **A4_SCENES)), 0.8, seed)
        assert (len(train), len(test)) == (400, 100)
        tc = TrainConfig(phase1=Phase(A4_PHASE1, 1.0, 0.0), phase2=Phase(A4_PHASE2, 1e-4, 1.0), batch_size=4, seed=seed)
        for mode in ("full", "feature-only"):
            cfg = narrow(stages=4, mode=mode, seed=seed, grid=A4_SCENES["grid"])
            params, recs, _ = train_two_step(train, cfg, tc, held_out=test)
            runs[seed, mode] = {"mca": evaluate(params, cfg, test).mca, "records": recs}
    return runs


@pytest.mark.slow
def test_a4_relational_ablation_gap(ablation_runs, acceptance_line):
    gaps = [ablation_runs[s, "full"]["mca"] - ablation_runs[s, "feature-only"]["mca"] for s in A4_SEEDS]
    med = float(np.median(gaps))
    per_seed = ", ".join(
        f"{100 * ablation_runs[s, 'full']['mca']:.0f} vs {100 * ablation_runs[s, 'feature-only']['mca']:.0f}"
        for s in A4_SEEDS
    )
    ok = med >= 0.10
    acceptance_line("A4", ok, f"held-out MCA full vs feature-only per seed: {per_seed}; median gap "
                              f"{100 * med:.1f} pp (>= 10 pp)")
    assert ok


@pytest.mark.slow
def test_a5_refinement_benefit(ablation_runs, acceptance_line):
    rows = []
    ok = True
    for s in A4_SEEDS:
        last_phase1 = [r for r in ablation_runs[s, "full"]["records"] if r["phase"] == 1][-1]
        la = last_phase1["heldout_stage_losses"]
        ok &= la[3] <= la[0] and la[1] <= 1.02 * la[0]
        rows.append("/".join(f"{v:.1f}" for v in la))
    acceptance_line("A5", ok, f"held-out L_A1..L_A4 after phase 1 per seed: {'; '.join(rows)} "
                              f"(need L_A4 <= L_A1 and L_A2 <= 1.02 L_A1)")
    assert ok


def test_a6_decoder_round_trip(acceptance_line):
    cfg = SyntheticConfig(scenes=100, seed=6)
    ds = generate_synthetic(cfg)
    group_ok = person_ok = persons = 0
    for s in ds.scenes:
        boxes = s.grid_boxes(cfg.grid)
        # boxes are pairwise disjoint by construction; confirm it in grid units
        for i, a in enumerate(boxes):
            for b in boxes[i + 1:]:
                assert a.x2 <= b.x1 or b.x2 <= a.x1 or a.y2 <= b.y1 or b.y2 <= a.y1
        amap = build_activity_map(s, cfg.grid, cfg.n_individual, cfg.n_group)
        group_ok += decode_group_by_pooling(amap, boxes, cfg.n_group)[0] == s.group
        for p, b in zip(s.persons, boxes):
            persons += 1
            person_ok += decode_individual_by_pooling(amap, b, cfg.n_individual) == p.action
    ok = group_ok == 100 and person_ok == persons
    acceptance_line("A6", ok, f"group labels {group_ok}/100, individual labels {person_ok}/{persons}")
    assert ok


def test_a7_metric_fusion_algebra(acceptance_line):
    checks = {}
    # hand-computed report: truth/prediction pairs over 4 classes
    y = [0, 0, 0, 1, 1, 2, 3, 3]
    p = [0, 1, 0, 1, 2, 2, 3, 0]
    r = evaluate_predictions(y, p, 4)
    checks["confusion"] = r.confusion.tolist() == [[2, 1, 0, 0], [0, 1, 1, 0], [0, 0, 1, 0], [1, 0, 0, 1]]
    checks["MCA"] = r.mca == 5 / 8
    checks["MPCA"] = r.mpca == (2 / 3 + 1 / 2 + 1 + 1 / 2) / 4
    # merging classes 3 and 4 (1-based) into 3
    m = evaluate_predictions(y, p, 4, merge={3: 2})
    checks["merged"] = m.confusion.tolist() == [[2, 1, 0], [0, 1, 1], [1, 0, 2]] and m.mca == 5 / 8
    checks["merged MPCA"] = m.mpca == (2 / 3 + 1 / 2 + 2 / 3) / 3
    # evaluate() on precomputed probabilities agrees with the label-level report
    scenes = [Scene([Person(BBox(0, 0, 4, 4), 0)], g, (8, 8)) for g in y]
    ds = Dataset(scenes, {}, SyntheticConfig(image_size=(8, 8), grid=(8, 8), box_width=(3, 4), box_height=(3, 4)))
    probs = onehot(p, 4) * 0.7 + 0.075
    checks["evaluate"] = np.array_equal(evaluate(None, CrmConfig(grid=(8, 8)), ds, probs=probs).confusion, r.confusion)
    rng = np.random.default_rng(7)
    pr = rng.dirichlet(np.ones(6), size=20)
    checks["fuse(p, p) = p"] = fuse_predictions(pr, pr).tobytes() == pr.tobytes()
    for n in (2, 5, 8):
        got = loss_group(Tensor(np.full(n, 1 / n)), onehot(0, n)).item()
        checks[f"uniform L_G, N_G={n}"] = abs(got - math.log(n) / n) <= 1e-12
    failed = [k for k, v in checks.items() if not v]
    ok = not failed
    acceptance_line("A7", ok, f"{len(checks) - len(failed)}/{len(checks)} algebra checks" +
                    (f"; failed: {', '.join(failed)}" if failed else ""))
    assert ok


def test_a8_determinism(tmp_path, acceptance_line):
    doc = json.loads((Path(__file__).resolve().parent.parent / "configs" / "smoke.json").read_text())
    doc["paths"] = {"dataset": "data.json"}
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps(doc))
    assert main(["generate", str(cfg)]) == 0
    for name in ("a", "b"):
        assert main(["train", str(cfg), "--out", str(tmp_path / name), "--seed", "3"]) == 0
    same = {
        f: (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        for f in ("epochs.jsonl", "checkpoint.ckpt")
    }
    ok = all(same.values())
    acceptance_line("A8", ok, "two identical train runs: " + ", ".join(
        f"{f} {'identical' if v else 'DIFFERENT'}" for f, v in same.items()))
    assert ok
