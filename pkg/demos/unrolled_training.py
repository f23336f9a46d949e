"""Learning the solver's hyperparameters beats hand-set defaults.

On a benchmark with skewed query class proportions (Dirichlet alpha 0.5)
and moderately overlapping clusters, the default class-balance weight
(equal to the query count) leaves predictions too uniform. Unrolling the
solver and training its per-layer balance and temperature schedule by
gradient descent recovers the accuracy a grid search finds, at a fraction
of the evaluation cost, and can exceed it by adapting per layer.

Scaled down from the calibrated acceptance benchmark to run in about a
minute; expect the same ordering with slightly noisier numbers.
"""

import time

import numpy as np

from unem import (
    ProtocolConfig,
    TrainConfig,
    default_schedule,
    gmm_world,
    make_synthetic_bundle,
    predict,
    run_gem,
    sample_task,
    train,
)
from unem.kernels import inv_softplus
from unem.solver import HyperSchedule


def mean_accuracy(episodes, schedule):
    accs = []
    for ep in episodes:
        state, _ = run_gem(ep.task, "gaussian", schedule)
        accs.append(float(np.mean(predict(state, ep.task) == ep.query_labels)))
    return float(np.mean(accs))


def fixed(balance: float) -> HyperSchedule:
    return HyperSchedule(
        layers=10,
        a=np.array([float(inv_softplus(balance))]),
        b=np.array([-745.0]),
        t_z_raw=float(inv_softplus(1.0)),
        adaptive=False,
        temperature=False,
        feature_mode="vision_raw",
    )


def main():
    world = gmm_world(n_classes=16, dim=16, separation=2.0, noise=1.0, seed=7)
    bundle = make_synthetic_bundle(world, 90, splits={"base": 8, "test": 8})
    protocol = ProtocolConfig(
        k_eff=5, query_size=75, shots=5, imbalance="dirichlet", alpha=0.5
    )
    rng = np.random.default_rng(123)
    episodes = [
        sample_task(bundle, protocol, rng, split="test", model="gaussian")
        for _ in range(200)
    ]

    default = default_schedule("gaussian", layers=10, query_size=75, k_total=8, k_eff=5)
    acc_default = mean_accuracy(episodes, default)
    print(f"default (balance 75, temp 1):    {acc_default:.4f}")

    t0 = time.perf_counter()
    grid = [(lam, mean_accuracy(episodes, fixed(lam))) for lam in np.logspace(0, 4, 13)]
    best_lam, best_acc = max(grid, key=lambda c: c[1])
    print(f"grid best (balance {best_lam:7.1f}):     {best_acc:.4f}  "
          f"[{time.perf_counter() - t0:.0f}s of grid evals]")

    t0 = time.perf_counter()
    cfg = TrainConfig(
        epochs=40, learning_rate=0.1, tasks_per_split=400, batch_tasks=25, seed=0
    )
    report = train(bundle, "gaussian", default, protocol, cfg, split="base")
    acc_trained = mean_accuracy(episodes, report.schedule)
    print(f"trained schedule:                {acc_trained:.4f}  "
          f"[{time.perf_counter() - t0:.0f}s of training]")

    sched = report.schedule
    print("\nlearned per-layer balance:", np.round(sched.balances(), 1))
    print("learned per-layer temp:   ", np.round(sched.temps(), 3))
    print(f"learned feature scale:     {sched.feature_scale():.3f}")
    print(f"\ngain over default: {100 * (acc_trained - acc_default):+.2f} points; "
          f"gap to grid best: {100 * (acc_trained - best_acc):+.2f} points")


if __name__ == "__main__":
    main()
