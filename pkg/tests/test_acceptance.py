"""Acceptance criteria 1-10, each at its stated tolerance.

Every test records one PASS/FAIL line; the lines are printed in the
terminal summary (and immediately with ``-s``).
"""

import functools
import time

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES
from oracles import nbnn_oracle, omega_oracle

from fcnbnl import bench, checkpoint, fcn, gradcheck, nbnl
from fcnbnl.cli import CHECKPOINT_NAME, main
from fcnbnl.data import (
    PerturbationKind,
    SynthConfig,
    apply_perturbation,
    generate_synthetic_dataset,
    split_dataset,
)
from fcnbnl.fcn import FcnModel
from fcnbnl.nbnl import NbnlConfig, PrototypeBank
from fcnbnl.nbnn import ClassDescriptorStore, classify_nbnn
from fcnbnl.training import TrainingConfig, evaluate, initial_bank, train


def record(number, title, ok, detail):
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# 1. gradient fidelity
# ---------------------------------------------------------------------------


def test_criterion_01_gradient_fidelity():
    t0 = time.perf_counter()
    errors = {c: gradcheck.grad_check(c, trials=20, seed=0) for c in ("omega", "surrogate", "full")}
    elapsed = time.perf_counter() - t0
    ok = errors["omega"] < 1e-5 and errors["surrogate"] < 1e-5 and errors["full"] < 1e-4 and elapsed < 60
    detail = ", ".join(f"{c} {e:.2e}" for c, e in errors.items()) + f" over 20 trials each; {elapsed:.1f}s"
    record(1, "gradient fidelity", ok, detail)


# ---------------------------------------------------------------------------
# 2. NBNN oracle equivalence
# ---------------------------------------------------------------------------


def test_criterion_02_nbnn_oracle():
    t0 = time.perf_counter()
    agree = 0
    for seed in range(50):
        r = np.random.default_rng(1000 + seed)
        d = int(r.integers(1, 9))
        k = int(r.integers(2, 6))
        pools = [r.standard_normal((int(r.integers(1, 31)), d)) for _ in range(k)]
        query = r.standard_normal((int(r.integers(1, 30)), d))
        got = classify_nbnn(query, ClassDescriptorStore.from_pools(pools))
        agree += got == nbnn_oracle(query.tolist(), [p.tolist() for p in pools])
    elapsed = time.perf_counter() - t0
    record(2, "NBNN oracle equivalence", agree == 50, f"{agree}/50 agree; {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 3. Jensen bound
# ---------------------------------------------------------------------------


def _random_bank(r, k, p, d, q):
    W = r.standard_normal((k, p, d))
    nbnl.project_unit_ball(W)
    return PrototypeBank(W, NbnlConfig(k=k, p=p, q=q))


def test_criterion_03_jensen_bound():
    worst_gap, worst_tight, n_tight = -np.inf, 0.0, 0
    for i in range(1000):
        r = np.random.default_rng(3000 + i)
        k, p, d = int(r.integers(2, 6)), int(r.integers(1, 4)), int(r.integers(2, 9))
        bank = _random_bank(r, k, p, d, float(r.choice([1.0, 2.0, 4.0, 10.0, r.uniform(1, 20)])))
        single = i % 4 == 0
        m = 1 if single else int(r.integers(1, 4))
        scales = [r.standard_normal((1 if single else int(r.integers(1, 10)), d)) for _ in range(m)]
        y = int(r.integers(0, k))
        exact = nbnl.image_loss(scales, bank, y)
        bound = nbnl.surrogate_loss(scales, bank, y)[0]
        worst_gap = max(worst_gap, exact - bound)
        if single:
            n_tight += 1
            worst_tight = max(worst_tight, abs(exact - bound))
    ok = worst_gap <= 1e-9 and worst_tight <= 1e-12
    detail = f"max(loss - surrogate) {worst_gap:.2e} over 1000; max |gap| {worst_tight:.1e} on {n_tight} m=1, eta=1 cases"
    record(3, "Jensen bound", ok, detail)


# ---------------------------------------------------------------------------
# 4. omega properties
# ---------------------------------------------------------------------------


def test_criterion_04_omega_properties():
    qs = (1.0, 2.0, 4.0, 10.0)
    bad = {"nonnegative": 0, "homogeneous": 0, "monotone_q": 0, "hinge_max": 0, "formula": 0}
    for i in range(1000):
        r = np.random.default_rng(4000 + i)
        d, p = int(r.integers(1, 9)), int(r.integers(1, 6))
        z, W = r.standard_normal(d), r.standard_normal((p, d))
        alpha = float(r.uniform(0, 10))
        values = [nbnl.omega(z, W, q) for q in qs]
        top = max(0.0, float((W @ z).max()))
        bad["nonnegative"] += any(v < 0 for v in values)
        scaled = nbnl.omega(alpha * z, W, 4.0)
        bad["homogeneous"] += abs(scaled - alpha * values[2]) > 1e-9 * max(1.0, alpha * values[2])
        bad["monotone_q"] += any(b > a + 1e-12 for a, b in zip(values, values[1:]))
        bad["hinge_max"] += any(v < top - 1e-12 for v in values)
        bad["formula"] += abs(values[3] - omega_oracle(z, W, 10.0)) > 1e-9 * max(1.0, values[3])
    ok = not any(bad.values())
    record(
        4,
        "omega properties",
        ok,
        "violations over 1000 instances: " + ", ".join(f"{k} {v}" for k, v in bad.items()),
    )


# ---------------------------------------------------------------------------
# 5. block pipeline equivalence
# ---------------------------------------------------------------------------


def test_criterion_05_block_pipeline():
    worst = 0.0
    for i in range(100):
        r = np.random.default_rng(5000 + i)
        k, p, d = int(r.integers(2, 6)), int(r.integers(1, 4)), int(r.integers(2, 17))
        h, w = int(r.integers(1, 6)), int(r.integers(1, 6))
        q = float(r.choice([1.0, 2.0, 10.0, r.uniform(1, 20)]))
        W = r.standard_normal((k, p, d))
        nbnl.project_unit_ball(W)
        grid = r.standard_normal((d, h, w))
        grid /= np.maximum(np.linalg.norm(grid, axis=0, keepdims=True), 1.0)
        pipeline = nbnl.block_pipeline_scores(grid, W, q)
        direct = np.array(
            [[[nbnl.omega(grid[:, a, b], W[c], q) for b in range(w)] for a in range(h)] for c in range(k)]
        )
        worst = max(worst, float(np.abs(pipeline - direct).max()))
    record(
        5, "block pipeline equivalence", worst <= 1e-6, f"max abs difference {worst:.2e} over 100 instances"
    )


# ---------------------------------------------------------------------------
# 6. patch / fully-convolutional equivalence
# ---------------------------------------------------------------------------


def test_criterion_06_patch_fc_equivalence():
    topo = fcn.default_topology(normalize_descriptors=False, batch_norm_before_head=False)
    rf, jump = fcn.receptive_field(topo)
    worst, cells = 0.0, 0
    for seed in range(3):
        r = np.random.default_rng(6000 + seed)
        model = FcnModel.init(topo, r, dtype=np.float64)
        x = r.uniform(size=(3, int(r.integers(rf, 45)), int(r.integers(rf, 45))))
        grid, _ = fcn.fcn_forward(model, x)
        for i in range(grid.shape[0]):
            for j in range(grid.shape[1]):
                cell, _ = fcn.fcn_forward(model, x[:, i * jump : i * jump + rf, j * jump : j * jump + rf])
                worst = max(worst, float(np.abs(cell[0, 0] - grid[i, j]).max()))
                cells += 1
    record(
        6, "patch/fc equivalence", worst <= 1e-6, f"max abs difference {worst:.2e} over {cells} grid cells"
    )


# ---------------------------------------------------------------------------
# 7. end-to-end beats frozen
# ---------------------------------------------------------------------------

SEEDS = range(5)


@functools.cache
def experiment(seed, frozen):
    """Train on the synthetic 4-class task (50 train / 25 test per class)."""
    ds = generate_synthetic_dataset(SynthConfig(k=4, images_per_class=75, seed=seed))
    train_set, test_set = split_dataset(ds, 50 / 75, seed)
    rng = np.random.default_rng(seed)
    model = FcnModel.init(fcn.default_topology(), rng)
    bank = initial_bank(model, train_set, NbnlConfig(k=4), rng)
    cfg = TrainingConfig(seed=seed, fine_tune_last_n_layers=0 if frozen else None)
    model, bank, _ = train(model, bank, train_set, cfg)
    return model, bank, test_set, evaluate(model, bank, test_set).accuracy


@pytest.mark.slow
def test_criterion_07_end_to_end_beats_frozen():
    t0 = time.perf_counter()
    e2e = [experiment(s, False)[3] for s in SEEDS]
    frozen = [experiment(s, True)[3] for s in SEEDS]
    elapsed = time.perf_counter() - t0
    for s, a, b in zip(SEEDS, e2e, frozen):
        print(f"  seed {s}: end-to-end {a:.3f}, frozen {b:.3f}")
    assert all(len(experiment(s, False)[2]) == 100 for s in SEEDS)
    mean_e2e, mean_frozen = float(np.mean(e2e)), float(np.mean(frozen))
    ok = mean_e2e >= 0.90 and mean_e2e > mean_frozen and elapsed <= 15 * 60
    detail = f"end-to-end mean {mean_e2e:.3f}, frozen mean {mean_frozen:.3f}, 5 seeds, {elapsed:.0f}s"
    record(7, "end-to-end beats frozen", ok, detail)


# ---------------------------------------------------------------------------
# 8. timing shape
# ---------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_08_timing_shape():
    rng = np.random.default_rng(8)
    model = FcnModel.init(fcn.default_topology(), rng)
    images = [
        np.clip(rng.uniform(size=(200, 200, 3)), 0, 1),
        np.clip(rng.uniform(size=(150, 200, 3)), 0, 1),
    ]
    rows = bench.run_timing_sweep(images, [16, 52, 110], model, repetitions=7)
    per = [r.fc_per_descriptor for r in rows]
    at110 = rows[-1]
    ratio = at110.fc_median / at110.patch_median
    ok = (
        [r.fc_count for r in rows] == [16, 52, 110]
        and ratio <= 0.5
        and all(b <= a for a, b in zip(per, per[1:]))
        and all(r.repetitions >= 5 for r in rows)
    )
    detail = (
        f"fc/patch at 110 = {ratio:.3f}; fc s/descriptor "
        + " >= ".join(f"{p:.2e}" for p in per)
        + f"; {at110.repetitions} reps, median"
    )
    record(8, "timing shape", ok, detail)


# ---------------------------------------------------------------------------
# 9. robustness sweep
# ---------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_09_robustness_sweep():
    model, bank, test_set, _ = experiment(0, False)
    acc = {}
    for kind in PerturbationKind:
        perturbed = test_set.subset(range(len(test_set)))
        perturbed.images = [apply_perturbation(img, kind) for img in test_set.images]
        acc[kind] = evaluate(model, bank, perturbed).accuracy
    chance = 1 / bank.config.k
    original = acc[PerturbationKind.ORIGINAL]
    must_beat_chance = (
        PerturbationKind.UPSIDE_DOWN,
        PerturbationKind.OCCLUDER_RIGHT,
        PerturbationKind.OCCLUDER_CENTRAL,
        PerturbationKind.TEXTURED_OCCLUDER_CENTRAL,
    )
    ok = (
        len(acc) == 8
        and all(original >= a - 0.02 for a in acc.values())
        and all(acc[k] >= chance for k in must_beat_chance)
    )
    record(9, "robustness sweep", ok, ", ".join(f"{k.value} {a:.2f}" for k, a in acc.items()))


# ---------------------------------------------------------------------------
# 10. determinism and persistence
# ---------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_10_determinism(tmp_path):
    args = ["train", "--seed", "7", "--train.epochs", "2"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    first = (tmp_path / "a" / CHECKPOINT_NAME).read_bytes()
    same_run = first == (tmp_path / "b" / CHECKPOINT_NAME).read_bytes()

    model, bank, meta = checkpoint.load_checkpoint(tmp_path / "a" / CHECKPOINT_NAME)
    checkpoint.save_checkpoint(tmp_path / "again", model, bank, meta["epoch"], meta["seed"])
    reloaded, rebank, _ = checkpoint.load_checkpoint(tmp_path / "again")
    round_trip = (
        (tmp_path / "again").read_bytes() == first
        and all(reloaded.parameters()[n].tobytes() == p.tobytes() for n, p in model.parameters().items())
        and rebank.W.tobytes() == bank.W.tobytes()
    )

    ds = generate_synthetic_dataset(SynthConfig(seed=7))
    _, test_set = split_dataset(ds, 2 / 3, 7)
    same_report = evaluate(model, bank, test_set) == evaluate(model, bank, test_set)

    ok = same_run and round_trip and same_report
    detail = f"identical checkpoints {same_run}, bit-exact round trip {round_trip}, identical reports {same_report}"
    record(10, "determinism and persistence", ok, detail)
