"""Synthetic worlds, feature bundles and few-shot task sampling.

A bundle is a labeled feature matrix carved into class-disjoint splits; a
task draws a support set with every class represented equally and a query
set whose class mix is either exactly uniform or drawn from a symmetric
Dirichlet, so benchmarks can dial class imbalance. The sampler keeps the
set of classes that actually appear in the query hidden from the solver:
TaskInstance carries no effective-class information, the ground truth rides
alongside it in the Episode.
"""

from dataclasses import dataclass

import numpy as np

from .distributions import SIMPLEX_FLOOR
from .solver import TaskInstance


@dataclass(frozen=True)
class ProtocolConfig:
    """How tasks are carved from a bundle split.

    k_total of None means every class of the split takes part in the
    support set. imbalance "uniform" stratifies the query set exactly;
    "dirichlet" draws class proportions from Dirichlet(alpha, ..., alpha)
    over the k_eff effective classes.
    """

    k_eff: int = 5
    query_size: int = 75
    shots: int = 5
    k_total: "int | None" = None
    imbalance: str = "dirichlet"
    alpha: float = 2.0

    def __post_init__(self):
        if self.imbalance not in ("uniform", "dirichlet"):
            raise ValueError(f"ProtocolConfig: unknown imbalance {self.imbalance!r}")
        if self.imbalance == "uniform" and self.query_size % self.k_eff != 0:
            raise ValueError(
                "ProtocolConfig: uniform mode needs query_size divisible by k_eff"
            )
        if self.k_eff < 1 or self.query_size < self.k_eff or self.shots < 1:
            raise ValueError("ProtocolConfig: degenerate protocol sizes")
        if self.alpha <= 0.0:
            raise ValueError("ProtocolConfig: alpha must be positive")


@dataclass(frozen=True)
class SyntheticWorld:
    """Ground-truth generator parameters for a synthetic dataset.

    kind "gmm" stores per-class means (n_classes x dim) with isotropic
    noise; kind "dirichlet_mixture" stores per-class concentration rows
    (n_classes x n_classes).
    """

    kind: str
    class_params: np.ndarray
    noise: float
    seed: int


@dataclass
class FeatureBundle:
    """A dataset of feature rows with labels, names and split tags."""

    features: np.ndarray
    labels: np.ndarray
    class_names: list
    splits: dict
    feature_kind: str

    def __post_init__(self):
        if self.feature_kind not in ("raw", "simplex"):
            raise ValueError(f"FeatureBundle: unknown feature_kind {self.feature_kind!r}")


@dataclass(frozen=True)
class Episode:
    """A solver-facing task plus the ground truth withheld from it."""

    task: TaskInstance
    query_labels: np.ndarray


def gmm_world(
    n_classes: int,
    dim: int,
    separation: float,
    noise: float,
    seed: int,
) -> SyntheticWorld:
    """Gaussian world; mean components scale with separation / sqrt(dim) so
    expected between-class distance stays near separation * sqrt(2)
    regardless of dimension."""
    rng = np.random.default_rng(seed)
    means = separation / np.sqrt(dim) * rng.normal(size=(n_classes, dim))
    return SyntheticWorld(kind="gmm", class_params=means, noise=noise, seed=seed)


def dirichlet_world(
    n_classes: int,
    concentration_range: tuple = (2.0, 50.0),
    seed: int = 0,
    own_boost: "float | None" = None,
) -> SyntheticWorld:
    """Dirichlet-mixture world; each class's own coordinate gets a boosted
    concentration so classes stay separable."""
    rng = np.random.default_rng(seed)
    lo, hi = concentration_range
    if not (0.0 < lo <= hi):
        raise ValueError("dirichlet_world: bad concentration range")
    conc = rng.uniform(lo, hi, size=(n_classes, n_classes))
    boost = hi if own_boost is None else own_boost
    conc[np.arange(n_classes), np.arange(n_classes)] += boost
    return SyntheticWorld(kind="dirichlet_mixture", class_params=conc, noise=0.0, seed=seed)


def make_synthetic_bundle(
    world: SyntheticWorld,
    n_per_class: int,
    splits: dict,
) -> FeatureBundle:
    """Sample a bundle from a world, assigning whole classes to splits.

    Args:
        world: generator parameters.
        n_per_class: samples drawn per class.
        splits: ordered mapping tag -> class count; counts must sum to the
            world's class count. Splits never share classes.

    Returns:
        FeatureBundle with float32 features, contiguous per-split rows, and
        feature_kind "raw" (gmm) or "simplex" (dirichlet_mixture).
    """
    n_classes = world.class_params.shape[0]
    if sum(splits.values()) != n_classes:
        raise ValueError("make_synthetic_bundle: split class counts must sum to total")
    rng = np.random.default_rng(world.seed + 1)
    rows, labels = [], []
    for c in range(n_classes):
        if world.kind == "gmm":
            block = world.class_params[c] + world.noise * rng.normal(
                size=(n_per_class, world.class_params.shape[1])
            )
        elif world.kind == "dirichlet_mixture":
            block = rng.dirichlet(world.class_params[c], size=n_per_class)
        else:
            raise ValueError(f"make_synthetic_bundle: unknown world kind {world.kind!r}")
        rows.append(block)
        labels.extend([c] * n_per_class)
    features = np.concatenate(rows, axis=0).astype(np.float32)
    labels = np.asarray(labels, dtype=np.int64)

    split_indices = {}
    start_class = 0
    for tag, count in splits.items():
        members = np.arange(start_class * n_per_class, (start_class + count) * n_per_class)
        split_indices[tag] = members
        start_class += count
    kind = "raw" if world.kind == "gmm" else "simplex"
    names = [f"class_{c:03d}" for c in range(n_classes)]
    return FeatureBundle(
        features=features,
        labels=labels,
        class_names=names,
        splits=split_indices,
        feature_kind=kind,
    )


def draw_query_counts(cfg: ProtocolConfig, rng: np.random.Generator) -> np.ndarray:
    """Per-effective-class query counts for one task."""
    if cfg.imbalance == "uniform":
        return np.full(cfg.k_eff, cfg.query_size // cfg.k_eff, dtype=np.int64)
    proportions = rng.dirichlet(np.full(cfg.k_eff, cfg.alpha))
    return rng.multinomial(cfg.query_size, proportions)


def _fit_counts(counts: np.ndarray, capacity: np.ndarray) -> np.ndarray:
    """Clamp counts to per-class capacity, pushing overflow to the classes
    with the most room (ties to the lowest index)."""
    counts = counts.copy()
    overflow = int(np.sum(np.maximum(counts - capacity, 0)))
    counts = np.minimum(counts, capacity)
    while overflow > 0:
        spare = capacity - counts
        if spare.sum() <= 0:
            raise ValueError("sample_task: split cannot host the requested query size")
        target = int(np.argmax(spare))
        counts[target] += 1
        overflow -= 1
    return counts


def sample_task(
    bundle: FeatureBundle,
    cfg: ProtocolConfig,
    rng: np.random.Generator,
    split: str = "test",
    model: str = "gaussian",
) -> Episode:
    """Draw one few-shot task from a bundle split.

    Support takes cfg.shots samples from each participating class. Query
    samples come only from cfg.k_eff secretly chosen classes, with counts
    from draw_query_counts, never reusing support rows. Rows are laid out
    support first, then query.

    For the dirichlet model the per-task features are the bundle columns of
    the participating classes, read as similarity logits (simplex bundles
    are sent through a log first so a unit feature temperature reproduces
    the stored rows exactly).
    """
    if split not in bundle.splits:
        raise ValueError(f"sample_task: bundle has no split {split!r}")
    pool = bundle.splits[split]
    pool_labels = bundle.labels[pool]
    classes = np.unique(pool_labels)
    k_total = len(classes) if cfg.k_total is None else cfg.k_total
    if k_total > len(classes):
        raise ValueError("sample_task: split has fewer classes than k_total")
    if k_total < len(classes):
        chosen = rng.choice(len(classes), size=k_total, replace=False)
        classes = np.sort(classes[chosen])
    if cfg.k_eff > k_total:
        raise ValueError("sample_task: k_eff exceeds the task's class count")

    by_class = {c: pool[pool_labels == c] for c in classes}
    support_rows, support_classes = [], []
    remaining = {}
    for c in classes:
        rows = by_class[c]
        if len(rows) < cfg.shots:
            raise ValueError("sample_task: not enough samples for the support set")
        picked = rng.choice(len(rows), size=cfg.shots, replace=False)
        mask = np.zeros(len(rows), dtype=bool)
        mask[picked] = True
        support_rows.extend(rows[mask])
        support_classes.extend([c] * cfg.shots)
        remaining[c] = rows[~mask]

    effective = rng.choice(k_total, size=cfg.k_eff, replace=False)
    counts = draw_query_counts(cfg, rng)
    capacity = np.array([len(remaining[classes[e]]) for e in effective])
    counts = _fit_counts(counts, capacity)
    query_rows, query_classes = [], []
    for e, count in zip(effective, counts):
        c = classes[e]
        picked = rng.choice(len(remaining[c]), size=int(count), replace=False)
        query_rows.extend(remaining[c][picked])
        query_classes.extend([c] * int(count))

    order = np.concatenate([support_rows, query_rows]).astype(np.int64)
    raw = np.asarray(bundle.features[order], dtype=np.float64)
    if model == "dirichlet":
        if bundle.feature_kind == "simplex":
            raw = np.log(np.maximum(raw, SIMPLEX_FLOOR))
        raw = raw[:, classes]
    class_to_task = {c: t for t, c in enumerate(classes)}
    n_support = len(support_rows)
    support_labels = np.zeros((n_support, k_total))
    for i, c in enumerate(support_classes):
        support_labels[i, class_to_task[c]] = 1.0
    task = TaskInstance(
        features=raw,
        support_idx=np.arange(n_support),
        query_idx=np.arange(n_support, n_support + len(query_rows)),
        support_labels=support_labels,
        k_total=k_total,
    )
    truth = np.array([class_to_task[c] for c in query_classes], dtype=np.int64)
    return Episode(task=task, query_labels=truth)


@dataclass
class EvalReport:
    """Per-task accuracies with summary statistics."""

    accuracies: np.ndarray

    @property
    def mean(self) -> float:
        return float(self.accuracies.mean())

    @property
    def std(self) -> float:
        return float(self.accuracies.std(ddof=1)) if len(self.accuracies) > 1 else 0.0

    @property
    def stderr(self) -> float:
        return self.std / np.sqrt(len(self.accuracies))


def score(results) -> EvalReport:
    """Per-task accuracy from (predicted, truth) pairs.

    Raises:
        ValueError: no tasks were given.
    """
    if len(results) == 0:
        raise ValueError("score: no tasks to score")
    accs = np.array(
        [float(np.mean(np.asarray(p) == np.asarray(t))) for p, t in results]
    )
    return EvalReport(accuracies=accs)
