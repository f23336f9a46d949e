"""Release acceptance suite: one test per shipped guarantee.

Each test prints a single [criterion N] PASS or FAIL line so CI logs show
the whole contract at a glance. The imbalanced-benchmark constants below
were calibrated once against the grid-search oracle and then frozen; see
the module README for the recorded landscape.
"""

import re
import time

import numpy as np
import pytest

from unem import distributions, kernels, oracle, solver, storage, trainer
from unem.cli import main as cli_main
from unem.solver import HyperSchedule, default_schedule
from unem.tasks import (
    ProtocolConfig,
    dirichlet_world,
    gmm_world,
    make_synthetic_bundle,
    sample_task,
)

# Benchmark world: moderate separation so the untrained balance weight
# leaves partitions too uniform for alpha=0.5 query skew (grid optimum
# sits near balance 100, about 5.8pp above the default cell).
BENCH_CLASSES = 16
BENCH_DIM = 16
BENCH_SEP = 2.0
BENCH_NOISE = 1.0
BENCH_WORLD_SEED = 7
BENCH_PER_CLASS = 90
BENCH_EVAL_SEED = 123
BENCH_EVAL_TASKS = 200
BENCH_TRAIN = trainer.TrainConfig(
    epochs=40, learning_rate=0.1, tasks_per_split=400, batch_tasks=25, seed=0
)
BENCH_PROTOCOL = ProtocolConfig(
    k_eff=5, query_size=75, shots=5, imbalance="dirichlet", alpha=0.5
)


def _report(num: int, title: str, ok: bool, started: float) -> None:
    verdict = "PASS" if ok else "FAIL"
    print(f"[criterion {num}] {title}: {verdict} ({time.perf_counter() - started:.1f}s)")


def fixed_schedule(
    balance: float,
    temp: float = 1.0,
    layers: int = 10,
    mode: str = "vision_raw",
) -> HyperSchedule:
    """Constant (balance, temp) schedule with the feature map pinned to 1."""
    if temp == 1.0:
        b, temp_on = np.array([-745.0]), False
    else:
        b, temp_on = np.array([float(kernels.inv_softplus(temp - 1.0))]), True
    t_z_raw = kernels.inv_softplus(1.0) if mode == "vision_raw" else -745.0
    return HyperSchedule(
        layers=layers,
        a=np.array([float(kernels.inv_softplus(float(balance)))]),
        b=b,
        t_z_raw=float(t_z_raw),
        adaptive=False,
        temperature=temp_on,
        feature_mode=mode,
    )


def mean_accuracy(episodes, schedule, model="gaussian") -> float:
    accs = []
    for ep in episodes:
        state, _ = solver.run_gem(ep.task, model, schedule)
        pred = solver.predict(state, ep.task)
        accs.append(float(np.mean(pred == ep.query_labels)))
    return float(np.mean(accs))


@pytest.fixture(scope="module")
def benchmark():
    world = gmm_world(BENCH_CLASSES, BENCH_DIM, BENCH_SEP, BENCH_NOISE, BENCH_WORLD_SEED)
    bundle = make_synthetic_bundle(world, BENCH_PER_CLASS, {"base": 8, "test": 8})
    rng = np.random.default_rng(BENCH_EVAL_SEED)
    episodes = [
        sample_task(bundle, BENCH_PROTOCOL, rng, split="test", model="gaussian")
        for _ in range(BENCH_EVAL_TASKS)
    ]
    return bundle, episodes


@pytest.fixture(scope="module")
def trained_variants(benchmark):
    bundle, episodes = benchmark
    accs = {}
    for name, adaptive, temp_on in (
        ("adaptive+temp", True, True),
        ("fixed+temp", False, True),
        ("adaptive-temp", True, False),
    ):
        init = default_schedule(
            "gaussian", layers=10, query_size=75, k_total=8, k_eff=5,
            adaptive=adaptive, temperature=temp_on,
        )
        report = trainer.train(
            bundle, "gaussian", init, BENCH_PROTOCOL, BENCH_TRAIN, split="base"
        )
        accs[name] = mean_accuracy(episodes, report.schedule)
    return accs


def test_criterion_1_em_equivalence():
    started = time.perf_counter()
    world = gmm_world(20, 64, separation=3.0, noise=1.0, seed=11)
    bundle = make_synthetic_bundle(world, 90, {"all": 20})
    protocol = ProtocolConfig(k_eff=5, query_size=75, shots=5)
    rng = np.random.default_rng(42)
    schedule = fixed_schedule(75.0, layers=10)
    worst = 0.0
    for _ in range(100):
        ep = sample_task(bundle, protocol, rng, split="all", model="gaussian")
        snaps = oracle.reference_em(
            ep.task.features, ep.task.support_idx, ep.task.query_idx,
            ep.task.support_labels, iterations=10,
        )
        for it in range(1, 11):
            state, _ = solver.run_gem(ep.task, "gaussian", schedule, layers=it)
            diff = np.abs(
                state.u[ep.task.query_idx] - snaps[it - 1][0][ep.task.query_idx]
            ).max()
            worst = max(worst, float(diff))
    elapsed = time.perf_counter() - started
    ok = worst <= 1e-8 and elapsed < 60.0
    _report(1, "EM equivalence at unit temperature and balance |Q|", ok, started)
    assert worst <= 1e-8, f"max posterior deviation {worst:.3e}"
    assert elapsed < 60.0


def test_criterion_2_objective_descent():
    started = time.perf_counter()
    rng = np.random.default_rng(5)
    worst_rise = 0.0
    for model, world_seed in (("gaussian", 21), ("dirichlet", 22)):
        if model == "gaussian":
            bundle = make_synthetic_bundle(
                gmm_world(12, 8, 2.5, 1.0, world_seed), 40, {"all": 12}
            )
        else:
            bundle = make_synthetic_bundle(
                dirichlet_world(12, seed=world_seed), 40, {"all": 12}
            )
        protocol = ProtocolConfig(k_eff=3, query_size=21, shots=3)
        for _ in range(100):
            ep = sample_task(bundle, protocol, rng, split="all", model=model)
            balance = 10.0 ** rng.uniform(-1.0, 3.0)
            temp = rng.uniform(1.01, 3.0)
            mode = "vision_raw" if model == "gaussian" else "clip_probability"
            schedule = fixed_schedule(balance, temp, layers=8, mode=mode)
            _, trace = solver.run_gem(ep.task, model, schedule)
            objs = trace.objectives
            for prev, cur in zip(objs, objs[1:]):
                worst_rise = max(worst_rise, (cur - prev) / max(abs(prev), 1e-30))
    elapsed = time.perf_counter() - started
    ok = worst_rise <= 1e-9 and elapsed < 120.0
    _report(2, "composite objective non-increasing across layers", ok, started)
    assert worst_rise <= 1e-9, f"worst relative rise {worst_rise:.3e}"
    assert elapsed < 120.0


def test_criterion_3_gradient_correctness():
    started = time.perf_counter()
    failures = []
    rng = np.random.default_rng(77)
    bundles = {
        "gaussian": make_synthetic_bundle(gmm_world(12, 6, 3.0, 1.0, 31), 40, {"all": 12}),
        "dirichlet": make_synthetic_bundle(dirichlet_world(9, seed=32), 40, {"all": 9}),
    }
    protocol = ProtocolConfig(k_eff=3, query_size=21, shots=3)
    for model in ("gaussian", "dirichlet"):
        for layers in (1, 3, 10):
            for _ in range(50):
                ep = sample_task(bundles[model], protocol, rng, split="all", model=model)
                slots = layers
                if model == "gaussian":
                    center, tz = kernels.inv_softplus(21.0), rng.uniform(-0.5, 1.0)
                    mode = "vision_raw"
                else:
                    center, tz = kernels.inv_softplus(1.5), rng.uniform(-9.0, -6.0)
                    mode = "clip_probability"
                schedule = HyperSchedule(
                    layers=layers,
                    a=center + rng.uniform(-1.5, 1.5, size=slots),
                    b=rng.uniform(-9.0, 0.5, size=slots),
                    t_z_raw=float(tz),
                    adaptive=True,
                    temperature=True,
                    feature_mode=mode,
                )
                got = trainer.grad(ep, model, schedule)
                want = oracle.fd_gradient(
                    ep.task.features, ep.task.support_idx, ep.task.query_idx,
                    ep.task.support_labels,
                    np.eye(ep.task.k_total)[ep.query_labels],
                    model, schedule.a, schedule.b, schedule.t_z_raw, layers,
                    h=1e-4,
                )
                pairs = np.concatenate([
                    np.stack([got.d_a, want["d_a"]], axis=1),
                    np.stack([got.d_b, want["d_b"]], axis=1),
                    [[got.d_tz, want["d_tz"]]],
                ])
                for g, fd in pairs:
                    err = abs(g - fd)
                    if abs(fd) < 1e-3:
                        if err > 1e-7:
                            failures.append((model, layers, g, fd))
                    elif err / abs(fd) > 1e-4:
                        failures.append((model, layers, g, fd))
    elapsed = time.perf_counter() - started
    ok = not failures and elapsed < 300.0
    _report(3, "unrolled gradients match finite differences", ok, started)
    assert not failures, f"{len(failures)} components disagree, first: {failures[0]}"
    assert elapsed < 300.0


def test_criterion_4_dirichlet_estimation():
    started = time.perf_counter()
    true_theta = np.array([2.0, 5.0, 3.0])
    rng = np.random.default_rng(9)
    samples = rng.dirichlet(true_theta, 10000)
    weights = np.ones(len(samples))
    est = distributions.dirichlet_mm_update(
        samples, weights, np.ones(3), inner_steps=200
    )
    ref = oracle.dirichlet_mle_reference(samples, weights)
    rel_true = np.abs(est - true_theta) / true_theta
    rel_ref = np.abs(est - ref) / np.abs(ref)
    elapsed = time.perf_counter() - started
    ok = rel_true.max() <= 0.05 and rel_ref.max() <= 1e-4 and elapsed < 30.0
    _report(4, "Dirichlet concentration recovery and MLE agreement", ok, started)
    assert rel_true.max() <= 0.05, f"recovery off by {rel_true.max():.3%}"
    assert rel_ref.max() <= 1e-4, f"MLE mismatch {rel_ref.max():.3e}"
    assert elapsed < 30.0


def test_criterion_5_training_beats_misspecified_default(benchmark, trained_variants):
    started = time.perf_counter()
    _, episodes = benchmark
    default = default_schedule("gaussian", layers=10, query_size=75, k_total=8, k_eff=5)
    acc_default = mean_accuracy(episodes, default)
    grid_best = max(
        mean_accuracy(episodes, fixed_schedule(balance))
        for balance in np.logspace(0.0, 4.0, 25)
    )
    acc_trained = trained_variants["adaptive+temp"]
    elapsed = time.perf_counter() - started
    ok = (
        acc_trained >= acc_default + 0.02
        and acc_trained >= grid_best - 0.01
        and elapsed < 600.0
    )
    _report(5, "trained schedule beats default and matches grid search", ok, started)
    assert acc_trained >= acc_default + 0.02, (
        f"trained {acc_trained:.4f} vs default {acc_default:.4f}"
    )
    assert acc_trained >= grid_best - 0.01, (
        f"trained {acc_trained:.4f} vs grid best {grid_best:.4f}"
    )
    assert elapsed < 600.0


def test_criterion_6_ablation_directions(trained_variants):
    started = time.perf_counter()
    adaptive = trained_variants["adaptive+temp"]
    fixed = trained_variants["fixed+temp"]
    no_temp = trained_variants["adaptive-temp"]
    elapsed = time.perf_counter() - started
    ok = adaptive >= fixed - 0.005 and adaptive >= no_temp - 0.005 and elapsed < 600.0
    _report(6, "per-layer and temperature ablations point the right way", ok, started)
    assert adaptive >= fixed - 0.005, f"adaptive {adaptive:.4f} vs fixed {fixed:.4f}"
    assert adaptive >= no_temp - 0.005, (
        f"temperature on {adaptive:.4f} vs off {no_temp:.4f}"
    )
    assert elapsed < 600.0


def test_criterion_7_trainable_parameter_count():
    started = time.perf_counter()
    schedule = default_schedule("gaussian", layers=10, adaptive=True, temperature=True)
    count = schedule.n_trainable()
    ok = count == 21
    _report(7, "adaptive ten-layer schedule exposes 21 scalars", ok, started)
    assert count == 21


def test_criterion_8_determinism_and_formats(tmp_path):
    started = time.perf_counter()
    problems = []

    bundle_path = tmp_path / "bench.fb"
    cli_main([
        "synth", "--out", str(bundle_path), "--classes", "12", "--dim", "8",
        "--separation", "4.0", "--noise", "1.0", "--per-class", "30",
        "--splits", "base:4,val:4,test:4", "--seed", "6",
    ])
    cli_main([
        "synth", "--world", "dirichlet", "--out", str(tmp_path / "dir.fb"),
        "--classes", "9", "--per-class", "20", "--splits", "base:3,val:3,test:3",
        "--seed", "8",
    ])
    sched_path = tmp_path / "sched.json"
    storage.write_schedule(str(sched_path), fixed_schedule(36.0), "gaussian")

    reports = []
    for name in ("r1.csv", "r2.csv"):
        out = tmp_path / name
        cli_main([
            "eval", "--bundle", str(bundle_path), "--schedule", str(sched_path),
            "--count", "10", "--seed", "13", "--keff", "3", "--query", "15",
            "--shots", "3", "--out", str(out),
        ])
        reports.append(out.read_bytes())
    if reports[0] != reports[1]:
        problems.append("seeded eval reports differ")

    trained = []
    for name in ("t1.json", "t2.json"):
        out = tmp_path / name
        cli_main([
            "train", "--bundle", str(bundle_path), "--model", "gaussian",
            "--layers", "2", "--epochs", "2", "--tasks", "6", "--batch", "3",
            "--seed", "4", "--keff", "3", "--query", "15", "--shots", "3",
            "--out", str(out),
        ])
        trained.append(out.read_bytes())
    if trained[0] != trained[1]:
        problems.append("seeded training runs differ")

    bundle = storage.read_bundle(str(bundle_path))
    copy_path = tmp_path / "copy.fb"
    storage.write_bundle(bundle, str(copy_path))
    again = storage.read_bundle(str(copy_path))
    if not (
        np.array_equal(bundle.features, again.features)
        and np.array_equal(bundle.labels, again.labels)
        and bundle.class_names == again.class_names
        and {t: tuple(v) for t, v in bundle.splits.items()}
        == {t: tuple(v) for t, v in again.splits.items()}
    ):
        problems.append("bundle round trip lost data")

    sched = HyperSchedule(
        layers=3, a=np.array([0.1, 1e-15, -1e10]), b=np.array([2.0 / 3.0, np.pi, -7.5]),
        t_z_raw=0.3,
    )
    storage.write_schedule(str(tmp_path / "rt.json"), sched, "gaussian")
    back, _, _ = storage.read_schedule(str(tmp_path / "rt.json"))
    if not (
        np.array_equal(sched.a, back.a)
        and np.array_equal(sched.b, back.b)
        and sched.t_z_raw == back.t_z_raw
    ):
        problems.append("schedule round trip lost precision")

    blob = bundle_path.read_bytes()
    header_len = int.from_bytes(blob[8:12], "little")
    n, dim = bundle.features.shape
    labels_at = 12 + header_len + 4 * n * dim
    simplex_blob = (tmp_path / "dir.fb").read_bytes()
    simplex_header = int.from_bytes(simplex_blob[8:12], "little")
    corruptions = {
        "magic": b"Z" + blob[1:],
        "truncated": blob[:-3],
        "header": blob[:14] + b"\xff" + blob[15:],
        "label_range": (
            blob[:labels_at]
            + np.array([1000], dtype="<u4").tobytes()
            + blob[labels_at + 4:]
        ),
        "simplex": (
            simplex_blob[: 12 + simplex_header]
            + np.array([9.0], dtype="<f4").tobytes()
            + simplex_blob[12 + simplex_header + 4:]
        ),
    }
    for code, bad in corruptions.items():
        bad_path = tmp_path / f"{code}.fb"
        bad_path.write_bytes(bad)
        try:
            storage.read_bundle(str(bad_path))
            problems.append(f"bundle corruption {code} not caught")
        except storage.BundleFormatError as exc:
            if exc.code != code:
                problems.append(f"bundle corruption {code} miscoded as {exc.code}")

    sched_text = sched_path.read_text()
    bad_schedules = {
        "json": "{not json",
        "fields": sched_text.replace('"a"', '"q"', 1),
        "length": re.sub(r'"a": \[[^\]]*\]', '"a": [1.0, 2.0]', sched_text, count=1),
        "value": re.sub(r'"t_z_raw": [^,}]+', '"t_z_raw": 1e999', sched_text, count=1),
    }
    for code, text in bad_schedules.items():
        bad_path = tmp_path / f"s_{code}.json"
        bad_path.write_text(text)
        try:
            storage.read_schedule(str(bad_path))
            problems.append(f"schedule corruption {code} not caught")
        except storage.ScheduleFormatError as exc:
            if exc.code != code:
                problems.append(f"schedule corruption {code} miscoded as {exc.code}")

    ok = not problems
    _report(8, "determinism, lossless storage, corruption codes", ok, started)
    assert not problems, problems
