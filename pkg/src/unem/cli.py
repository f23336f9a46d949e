"""Command-line front end.

Subcommands: synth, sample, train, eval, gridsearch, compare, inspect.
Exit codes: 0 success, 2 usage or configuration problems, 3 numeric
failures, 4 file and format problems. The UNEM_THREADS environment
variable caps the evaluation worker count; results are aggregated in task
order so thread count never changes any output.
"""

import argparse
import hashlib
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import storage, trainer
from .kernels import ConvergenceError, KernelDomainError, inv_softplus
from .oracle import OracleConvergenceError
from .solver import HyperSchedule, default_schedule, predict, run_gem
from .tasks import (
    ProtocolConfig,
    dirichlet_world,
    gmm_world,
    make_synthetic_bundle,
    sample_task,
    score,
)
from .trainer import (
    LOSS_FLOOR,
    NonFiniteIntermediateError,
    TrainConfig,
    TrainingDivergedError,
)

USAGE_ERROR, NUMERIC_ERROR, IO_ERROR = 2, 3, 4


def _worker_count() -> int:
    limit = os.environ.get("UNEM_THREADS")
    default = min(4, os.cpu_count() or 1)
    if limit is None:
        return default
    return max(1, min(default, int(limit)))


def _episode_metrics(episode, model, schedule):
    state, _ = run_gem(episode.task, model, schedule)
    predicted = predict(state, episode.task)
    u = state.u[episode.task.query_idx]
    picked = u[np.arange(len(predicted)), episode.query_labels]
    loss = float(-np.mean(np.log(np.maximum(picked, LOSS_FLOOR))))
    accuracy = float(np.mean(predicted == episode.query_labels))
    return predicted, accuracy, loss


def _evaluate(episodes, model, schedule):
    """Fan evaluation out across workers, keeping task order."""
    workers = _worker_count()
    if workers == 1:
        results = [_episode_metrics(e, model, schedule) for e in episodes]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(
                pool.map(lambda e: _episode_metrics(e, model, schedule), episodes)
            )
    preds = [r[0] for r in results]
    accs = np.array([r[1] for r in results])
    losses = np.array([r[2] for r in results])
    return preds, accs, losses


def _protocol(args) -> ProtocolConfig:
    return ProtocolConfig(
        k_eff=args.keff,
        query_size=args.query,
        shots=args.shots,
        imbalance=args.imbalance,
        alpha=args.alpha,
    )


def _split_classes(bundle, split: str) -> int:
    if split not in bundle.splits:
        raise ValueError(f"bundle has no split {split!r}")
    return len(np.unique(bundle.labels[bundle.splits[split]]))


def cmd_synth(args) -> int:
    if args.splits:
        pieces = [part.split(":") for part in args.splits.split(",")]
        splits = {tag: int(count) for tag, count in pieces}
    else:
        base = round(0.64 * args.classes)
        val = round(0.16 * args.classes)
        splits = {"base": base, "val": val, "test": args.classes - base - val}
    if args.world == "gmm":
        world = gmm_world(args.classes, args.dim, args.separation, args.noise, args.seed)
    else:
        world = dirichlet_world(
            args.classes, (args.conc_low, args.conc_high), seed=args.seed
        )
    bundle = make_synthetic_bundle(world, args.per_class, splits)
    storage.write_bundle(bundle, args.out)
    print(
        f"wrote {args.out}: {bundle.features.shape[0]} samples, "
        f"dim {bundle.features.shape[1]}, splits "
        + ", ".join(f"{t}:{c}" for t, c in splits.items())
    )
    return 0


def cmd_sample(args) -> int:
    bundle = storage.read_bundle(args.bundle)
    cfg = _protocol(args)
    rng = np.random.default_rng(args.seed)
    rows = []
    for task_id in range(args.count):
        episode = sample_task(bundle, cfg, rng, split=args.split, model=args.model)
        counts = np.bincount(episode.query_labels, minlength=episode.task.k_total)
        rows.append(
            (
                task_id,
                len(episode.task.support_idx),
                len(episode.task.query_idx),
                float(counts.max() / counts.sum()),
            )
        )
    if args.out:
        storage.write_table(
            args.out, ("task_id", "n_support", "n_query", "max_class_share"), rows
        )
    shares = [r[3] for r in rows]
    print(
        f"sampled {args.count} tasks from split {args.split!r}; "
        f"max class share mean {np.mean(shares):.3f}"
    )
    return 0


def _initial_schedule(args, bundle, split: str) -> HyperSchedule:
    k_total = _split_classes(bundle, split)
    return default_schedule(
        args.model,
        layers=args.layers,
        query_size=args.query,
        k_total=k_total,
        k_eff=args.keff,
        adaptive=not args.fixed,
        temperature=not args.no_temperature,
        balance_preset=args.balance_preset,
    )


def cmd_train(args) -> int:
    bundle = storage.read_bundle(args.bundle)
    schedule = _initial_schedule(args, bundle, args.split)
    cfg = TrainConfig(
        epochs=args.epochs,
        learning_rate=args.lr,
        tasks_per_split=args.tasks,
        batch_tasks=args.batch,
        seed=args.seed,
    )
    report = trainer.train(
        bundle, args.model, schedule, _protocol(args), cfg, split=args.split
    )
    config_hash = hashlib.sha256(repr((cfg, args.model)).encode()).hexdigest()[:16]
    provenance = {"seed": args.seed, "config_hash": config_hash, "epochs": args.epochs}
    storage.write_schedule(args.out, report.schedule, args.model, provenance)
    if args.report:
        storage.write_table(
            args.report,
            ("epoch", "mean_loss", "mean_accuracy"),
            [
                (i, float(l), float(a))
                for i, (l, a) in enumerate(
                    zip(report.epoch_losses, report.epoch_accuracies)
                )
            ],
        )
    final = report.epoch_losses[-1] if len(report.epoch_losses) else float("nan")
    print(
        f"trained {report.schedule.n_trainable()} parameters over {args.epochs} epochs; "
        f"final loss {final:.4f}; wrote {args.out}"
    )
    return 0


def cmd_eval(args) -> int:
    bundle = storage.read_bundle(args.bundle)
    schedule, model, _ = storage.read_schedule(args.schedule)
    rng = np.random.default_rng(args.seed)
    cfg = _protocol(args)
    episodes = [
        sample_task(bundle, cfg, rng, split=args.split, model=model)
        for _ in range(args.count)
    ]
    preds, accs, losses = _evaluate(episodes, model, schedule)
    report = score([(p, e.query_labels) for p, e in zip(preds, episodes)])
    if args.out:
        storage.write_task_table(args.out, range(len(episodes)), accs, losses)
    print(
        f"evaluated {args.count} tasks: accuracy {report.mean:.4f} "
        f"+/- {report.stderr:.4f}"
    )
    return 0


def _grid_schedule(
    model: str, layers: int, balance: float, temp: float
) -> HyperSchedule:
    mode = "vision_raw" if model == "gaussian" else "clip_probability"
    t_z_raw = (
        float(inv_softplus(1.0)) if model == "gaussian" else -10.0
    )
    if temp > 1.0:
        b = float(inv_softplus(temp - 1.0))
        temperature = True
    else:
        b = -10.0
        temperature = False
    return HyperSchedule(
        layers=layers,
        a=np.array([float(inv_softplus(balance))]),
        b=np.array([b]),
        t_z_raw=t_z_raw,
        adaptive=False,
        temperature=temperature,
        feature_mode=mode,
    )


def cmd_gridsearch(args) -> int:
    bundle = storage.read_bundle(args.bundle)
    rng = np.random.default_rng(args.seed)
    cfg = _protocol(args)
    episodes = [
        sample_task(bundle, cfg, rng, split=args.split, model=args.model)
        for _ in range(args.count)
    ]
    lo, hi, points = (float(x) for x in args.balance_grid.split(":"))
    balances = np.logspace(np.log10(lo), np.log10(hi), int(points))
    temps = [float(t) for t in args.temp_grid.split(",")]
    rows, best = [], None
    for balance in balances:
        for temp in temps:
            schedule = _grid_schedule(args.model, args.layers, balance, temp)
            _, accs, _ = _evaluate(episodes, args.model, schedule)
            mean = float(accs.mean())
            stderr = float(accs.std(ddof=1) / np.sqrt(len(accs))) if len(accs) > 1 else 0.0
            rows.append((float(balance), float(temp), mean, stderr))
            if best is None or mean > best[2]:
                best = rows[-1]
    if args.out:
        storage.write_table(
            args.out, ("balance", "temperature", "accuracy", "stderr"), rows
        )
    print(
        f"best cell: balance {best[0]:.4g} temperature {best[1]:.4g} "
        f"accuracy {best[2]:.4f}"
    )
    return 0


def cmd_compare(args) -> int:
    bundle = storage.read_bundle(args.bundle)
    cfg = _protocol(args)
    train_cfg = TrainConfig(
        epochs=args.epochs,
        learning_rate=args.lr,
        tasks_per_split=args.tasks,
        batch_tasks=args.batch,
        seed=args.seed,
    )
    k_total = _split_classes(bundle, args.eval_split)
    variants = []
    base = default_schedule(
        args.model, layers=args.layers, query_size=args.query,
        k_total=k_total, k_eff=args.keff, balance_preset=args.balance_preset,
    )
    variants.append(("iterative_defaults", base))
    for adaptive in (False, True):
        for temperature in (False, True):
            name = ("adaptive" if adaptive else "fixed") + (
                "+temp" if temperature else "-temp"
            )
            init = default_schedule(
                args.model, layers=args.layers, query_size=args.query,
                k_total=k_total, k_eff=args.keff, adaptive=adaptive,
                temperature=temperature, balance_preset=args.balance_preset,
            )
            report = trainer.train(
                bundle, args.model, init, cfg, train_cfg, split=args.train_split
            )
            variants.append((name, report.schedule))
    rng = np.random.default_rng(args.eval_seed)
    episodes = [
        sample_task(bundle, cfg, rng, split=args.eval_split, model=args.model)
        for _ in range(args.count)
    ]
    rows = []
    for name, schedule in variants:
        _, accs, _ = _evaluate(episodes, args.model, schedule)
        stderr = float(accs.std(ddof=1) / np.sqrt(len(accs))) if len(accs) > 1 else 0.0
        rows.append(
            (
                name,
                float(accs.mean()),
                stderr,
                schedule.n_trainable(),
                args.eval_seed,
            )
        )
        print(f"{name:>20}: accuracy {accs.mean():.4f} +/- {stderr:.4f}")
    if args.out:
        storage.write_table(
            args.out,
            ("variant", "mean_accuracy", "stderr", "n_trainable", "eval_seed"),
            rows,
        )
    return 0


def cmd_inspect(args) -> int:
    if args.bundle:
        bundle = storage.read_bundle(args.bundle)
        print(
            f"bundle: {bundle.features.shape[0]} samples, dim "
            f"{bundle.features.shape[1]}, {len(bundle.class_names)} classes, "
            f"feature_kind {bundle.feature_kind}"
        )
        for tag, indices in bundle.splits.items():
            classes = np.unique(bundle.labels[indices])
            print(f"  split {tag}: {len(indices)} samples, {len(classes)} classes")
    if args.schedule:
        schedule, model, provenance = storage.read_schedule(args.schedule)
        print(
            f"schedule: model {model}, {schedule.layers} layers, "
            f"adaptive {schedule.adaptive}, temperature {schedule.temperature}, "
            f"{schedule.n_trainable()} trainable parameters"
        )
        print(f"  feature scale {schedule.feature_scale():.6g}")
        for layer in range(schedule.layers):
            print(
                f"  layer {layer}: balance {schedule.balance(layer):.6g} "
                f"temperature {schedule.temp(layer):.6g}"
            )
        if provenance:
            print(f"  provenance: {provenance}")
    if not args.bundle and not args.schedule:
        raise ValueError("inspect: pass --bundle and/or --schedule")
    return 0


def _add_protocol_flags(sub):
    sub.add_argument("--keff", type=int, default=5)
    sub.add_argument("--query", type=int, default=75)
    sub.add_argument("--shots", type=int, default=5)
    sub.add_argument("--imbalance", choices=("uniform", "dirichlet"), default="dirichlet")
    sub.add_argument("--alpha", type=float, default=2.0)


def _add_train_flags(sub):
    sub.add_argument("--epochs", type=int, default=80)
    sub.add_argument("--lr", type=float, default=0.1)
    sub.add_argument("--tasks", type=int, default=1000)
    sub.add_argument("--batch", type=int, default=50)
    sub.add_argument("--balance-preset", choices=("standard", "scaled_query"),
                     default="standard")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="unem", description="Transductive few-shot solvers with unrolled training"
    )
    subs = parser.add_subparsers(dest="command", required=True)

    synth = subs.add_parser("synth", help="generate a synthetic feature bundle")
    synth.add_argument("--world", choices=("gmm", "dirichlet"), default="gmm")
    synth.add_argument("--classes", type=int, default=20)
    synth.add_argument("--dim", type=int, default=64)
    synth.add_argument("--separation", type=float, default=4.0)
    synth.add_argument("--noise", type=float, default=1.0)
    synth.add_argument("--conc-low", type=float, default=2.0)
    synth.add_argument("--conc-high", type=float, default=50.0)
    synth.add_argument("--per-class", type=int, default=120)
    synth.add_argument("--splits", default=None)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--out", required=True)
    synth.set_defaults(func=cmd_synth)

    sample = subs.add_parser("sample", help="sample tasks and summarize them")
    sample.add_argument("--bundle", required=True)
    sample.add_argument("--model", choices=("gaussian", "dirichlet"), default="gaussian")
    sample.add_argument("--split", default="test")
    sample.add_argument("--count", type=int, default=100)
    sample.add_argument("--seed", type=int, default=0)
    sample.add_argument("--out", default=None)
    _add_protocol_flags(sample)
    sample.set_defaults(func=cmd_sample)

    tr = subs.add_parser("train", help="train a hyperparameter schedule")
    tr.add_argument("--bundle", required=True)
    tr.add_argument("--model", choices=("gaussian", "dirichlet"), required=True)
    tr.add_argument("--layers", type=int, default=10)
    tr.add_argument("--split", default="val")
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--fixed", action="store_true")
    tr.add_argument("--no-temperature", action="store_true")
    tr.add_argument("--out", required=True)
    tr.add_argument("--report", default=None)
    _add_protocol_flags(tr)
    _add_train_flags(tr)
    tr.set_defaults(func=cmd_train)

    ev = subs.add_parser("eval", help="evaluate a schedule on sampled tasks")
    ev.add_argument("--bundle", required=True)
    ev.add_argument("--schedule", required=True)
    ev.add_argument("--split", default="test")
    ev.add_argument("--count", type=int, default=200)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--out", default=None)
    _add_protocol_flags(ev)
    ev.set_defaults(func=cmd_eval)

    gs = subs.add_parser("gridsearch", help="accuracy over a fixed hyperparameter grid")
    gs.add_argument("--bundle", required=True)
    gs.add_argument("--model", choices=("gaussian", "dirichlet"), required=True)
    gs.add_argument("--layers", type=int, default=10)
    gs.add_argument("--split", default="val")
    gs.add_argument("--count", type=int, default=100)
    gs.add_argument("--seed", type=int, default=0)
    gs.add_argument("--balance-grid", default="1:10000:25")
    gs.add_argument("--temp-grid", default="1")
    gs.add_argument("--out", default=None)
    _add_protocol_flags(gs)
    gs.set_defaults(func=cmd_gridsearch)

    cp = subs.add_parser("compare", help="ablation matrix against the defaults")
    cp.add_argument("--bundle", required=True)
    cp.add_argument("--model", choices=("gaussian", "dirichlet"), required=True)
    cp.add_argument("--layers", type=int, default=10)
    cp.add_argument("--train-split", default="val")
    cp.add_argument("--eval-split", default="test")
    cp.add_argument("--count", type=int, default=200)
    cp.add_argument("--seed", type=int, default=0)
    cp.add_argument("--eval-seed", type=int, default=1)
    cp.add_argument("--out", default=None)
    _add_protocol_flags(cp)
    _add_train_flags(cp)
    cp.set_defaults(func=cmd_compare)

    ins = subs.add_parser("inspect", help="describe a bundle or schedule file")
    ins.add_argument("--bundle", default=None)
    ins.add_argument("--schedule", default=None)
    ins.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (storage.BundleFormatError, storage.ScheduleFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return IO_ERROR
    except (
        TrainingDivergedError,
        NonFiniteIntermediateError,
        ConvergenceError,
        KernelDomainError,
        OracleConvergenceError,
        FloatingPointError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return NUMERIC_ERROR
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR


if __name__ == "__main__":
    sys.exit(main())
