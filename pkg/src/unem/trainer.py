"""Training the solver's hyperparameter schedule by unrolling.

The forward pass of run_gem is re-recorded here on the reverse-mode tape,
layer by layer, with the raw schedule parameters as leaves. The training
loss is the cross-entropy between the final query assignments and the
hidden ground truth, averaged per query sample. Gradients flow through
every layer, through the parameter and proportion updates, and through the
feature map, so the feature temperature is trained jointly with the
per-layer class-balance and temperature parameters.
"""

import time
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .distributions import SIMPLEX_FLOOR
from .kernels import KernelDomainError
from .solver import PI_FLOOR, HyperSchedule, TaskInstance, _check_model
from .tasks import Episode, FeatureBundle, ProtocolConfig, sample_task

# Final assignments are floored here inside the training loss.
LOSS_FLOOR = 1e-12


class NonFiniteIntermediateError(RuntimeError):
    """The recorded forward pass hit a non-finite value inside a layer."""

    def __init__(self, layer: int):
        super().__init__(f"non-finite intermediate at layer {layer}")
        self.layer = layer


class TrainingDivergedError(RuntimeError):
    """The training loss or a gradient became non-finite."""

    def __init__(self, epoch: int):
        super().__init__(f"training diverged at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings for schedule training.

    decay_at of None means a single learning-rate decay at
    floor(0.75 * epochs). tasks_per_split is the number of training tasks
    sampled once up front from the chosen split.
    """

    epochs: int = 80
    learning_rate: float = 0.1
    decay_factor: float = 0.5
    decay_at: "tuple | None" = None
    tasks_per_split: int = 1000
    batch_tasks: int = 50
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    inner_steps: int = 1

    def decay_epochs(self) -> tuple:
        if self.decay_at is not None:
            return tuple(self.decay_at)
        return (int(np.floor(0.75 * self.epochs)),)


@dataclass(frozen=True)
class GradientRecord:
    """Loss and its gradient over the raw schedule parameters."""

    d_a: np.ndarray
    d_b: np.ndarray
    d_tz: float
    loss: float


@dataclass
class TrainReport:
    """Per-epoch curves and the trained schedule."""

    epoch_losses: np.ndarray
    epoch_accuracies: np.ndarray
    schedule: HyperSchedule
    wall_clock: float


def _blocks(task: TaskInstance):
    support = task.features[task.support_idx]
    query = task.features[task.query_idx]
    return support, query, task.support_labels


def _forward(
    task: TaskInstance,
    model: str,
    schedule: HyperSchedule,
    a_nodes,
    b_nodes,
    tz_node,
    inner_steps: int,
):
    """Record the unrolled solver on the tape.

    Returns the final query assignment node; the caller attaches labels and
    assembles the loss from it.
    """
    layers = schedule.layers
    if model == "gaussian" and layers < 1:
        raise ValueError("forward: the gaussian path needs at least one layer")
    f_support, f_query, y_support = _blocks(task)
    n_query = task.n_query
    k = task.k_total
    ys = ad.Node(y_support)

    def slot(layer):
        return layer if schedule.adaptive else 0

    def balance_node(layer):
        return ad.softplus(a_nodes[slot(layer)])

    def temp_node(layer):
        return ad.add(1.0, ad.softplus(b_nodes[slot(layer)]))

    def assignment_logits(log_dens, pi, layer):
        weight = ad.div(balance_node(layer), float(n_query))
        logits = ad.add(log_dens, ad.mul(weight, ad.log(ad.maximum(pi, PI_FLOOR))))
        if schedule.temperature:
            logits = ad.div(logits, temp_node(layer))
        return logits

    if model == "gaussian":
        t_z = ad.softplus(tz_node)
        z_s = ad.mul(t_z, ad.Node(f_support))
        z_q = ad.mul(t_z, ad.Node(f_query))
        z_full = ad.concat_rows(z_s, z_q)
        counts = y_support.sum(axis=0)
        if np.any(counts == 0):
            raise ValueError("forward: every class needs support samples")
        mean_matrix = (y_support / counts[None, :]).T
        theta = ad.matmul(ad.Node(mean_matrix), z_s)
        pi = ad.Node(np.ones(k))
        u_query = None
        for layer in range(layers):
            try:
                theta2 = ad.reshape(ad.nsum(ad.square(theta), axis=1), (1, k))
                q2 = ad.nsum(ad.square(z_q), axis=1, keepdims=True)
                cross = ad.matmul(z_q, ad.transpose(theta))
                log_dens = ad.mul(-0.5, ad.add(ad.sub(q2, ad.mul(2.0, cross)), theta2))
                u_query = ad.softmax_rows(assignment_logits(log_dens, pi, layer))
            except KernelDomainError as exc:
                raise NonFiniteIntermediateError(layer) from exc
            if not np.all(np.isfinite(u_query.value)):
                raise NonFiniteIntermediateError(layer)
            u_full = ad.concat_rows(ys, u_query)
            col_mass = ad.reshape(ad.nsum(u_full, axis=0), (k, 1))
            theta = ad.div(ad.matmul(ad.transpose(u_full), z_full), col_mass)
            pi = ad.div(ad.nsum(u_query, axis=0), float(n_query))
        return u_query

    t_z = ad.add(1.0, ad.softplus(tz_node))

    def simplex_map(block):
        probs = ad.softmax_rows(ad.mul(t_z, ad.Node(block)))
        floored = ad.maximum(probs, SIMPLEX_FLOOR)
        return ad.div(floored, ad.nsum(floored, axis=1, keepdims=True))

    z_s = simplex_map(f_support)
    z_q = simplex_map(f_query)
    log_z_full = ad.log(ad.concat_rows(z_s, z_q))
    log_z_q = ad.log(z_q)
    u_query = z_q
    theta = ad.Node(np.ones((k, k)))
    for layer in range(layers):
        try:
            u_full = ad.concat_rows(ys, u_query)
            col_mass = ad.reshape(ad.nsum(u_full, axis=0), (k, 1))
            mean_log = ad.div(ad.matmul(ad.transpose(u_full), log_z_full), col_mass)
            for _ in range(inner_steps):
                theta = ad.inv_digamma(
                    ad.add(ad.digamma(ad.nsum(theta, axis=1, keepdims=True)), mean_log)
                )
            pi = ad.div(ad.nsum(u_query, axis=0), float(n_query))
            norm = ad.sub(
                ad.lgamma(ad.nsum(theta, axis=1)), ad.nsum(ad.lgamma(theta), axis=1)
            )
            log_dens = ad.add(
                ad.matmul(log_z_q, ad.transpose(ad.sub(theta, 1.0))),
                ad.reshape(norm, (1, k)),
            )
            u_query = ad.softmax_rows(assignment_logits(log_dens, pi, layer))
        except KernelDomainError as exc:
            raise NonFiniteIntermediateError(layer) from exc
        if not np.all(np.isfinite(u_query.value)):
            raise NonFiniteIntermediateError(layer)
    return u_query


def _raw_nodes(schedule: HyperSchedule):
    a_nodes = [ad.Node(v) for v in schedule.a]
    b_nodes = [ad.Node(v) for v in schedule.b]
    tz_node = ad.Node(schedule.t_z_raw)
    return a_nodes, b_nodes, tz_node


def _cross_entropy(u_query: ad.Node, query_labels) -> ad.Node:
    if query_labels is None:
        raise ValueError("training loss needs query ground truth")
    n_query, k = u_query.value.shape
    one_hot = np.zeros((n_query, k))
    one_hot[np.arange(n_query), query_labels] = 1.0
    picked = ad.mul(ad.Node(one_hot), ad.log(ad.maximum(u_query, LOSS_FLOOR)))
    return ad.div(ad.neg(ad.nsum(picked)), float(n_query))


def loss(
    episode: Episode,
    model: str,
    schedule: HyperSchedule,
    inner_steps: int = 1,
) -> float:
    """Training loss of one episode under a schedule."""
    _check_model(model)
    a_nodes, b_nodes, tz_node = _raw_nodes(schedule)
    u_query = _forward(episode.task, model, schedule, a_nodes, b_nodes, tz_node, inner_steps)
    return float(_cross_entropy(u_query, episode.query_labels).value)


def grad(
    episode: Episode,
    model: str,
    schedule: HyperSchedule,
    inner_steps: int = 1,
) -> GradientRecord:
    """Loss and its gradient for one episode.

    d_b is identically zero when the schedule's temperature is off.
    """
    _check_model(model)
    a_nodes, b_nodes, tz_node = _raw_nodes(schedule)
    u_query = _forward(episode.task, model, schedule, a_nodes, b_nodes, tz_node, inner_steps)
    out = _cross_entropy(u_query, episode.query_labels)
    ad.backward(out)

    def leaf_grad(node):
        return 0.0 if node.grad is None else float(node.grad)

    return GradientRecord(
        d_a=np.array([leaf_grad(n) for n in a_nodes]),
        d_b=np.array([leaf_grad(n) for n in b_nodes]),
        d_tz=leaf_grad(tz_node),
        loss=float(out.value),
    )


def _accuracy(u_query: ad.Node, truth: np.ndarray) -> float:
    return float(np.mean(np.argmax(u_query.value, axis=1) == truth))


class _Adam:
    def __init__(self, size: int, cfg: TrainConfig):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self.cfg = cfg

    def step(self, params: np.ndarray, g: np.ndarray, lr: float) -> np.ndarray:
        cfg = self.cfg
        self.t += 1
        self.m = cfg.adam_beta1 * self.m + (1.0 - cfg.adam_beta1) * g
        self.v = cfg.adam_beta2 * self.v + (1.0 - cfg.adam_beta2) * g * g
        m_hat = self.m / (1.0 - cfg.adam_beta1 ** self.t)
        v_hat = self.v / (1.0 - cfg.adam_beta2 ** self.t)
        return params - lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


def _pack(schedule: HyperSchedule) -> np.ndarray:
    parts = [schedule.a]
    if schedule.temperature:
        parts.append(schedule.b)
    parts.append([schedule.t_z_raw])
    return np.concatenate(parts)


def _unpack(schedule: HyperSchedule, params: np.ndarray) -> HyperSchedule:
    slots = len(schedule.a)
    a = params[:slots]
    if schedule.temperature:
        b = params[slots : 2 * slots]
        t_z_raw = float(params[2 * slots])
    else:
        b = schedule.b
        t_z_raw = float(params[slots])
    return replace(schedule, a=a, b=b, t_z_raw=t_z_raw)


def train(
    bundle: FeatureBundle,
    model: str,
    schedule: HyperSchedule,
    protocol: ProtocolConfig,
    cfg: TrainConfig,
    split: str = "val",
) -> TrainReport:
    """Fit the schedule's raw parameters on tasks from one bundle split.

    Tasks are sampled once up front with the config seed, then visited in
    the same order every epoch in fixed-size batches whose gradients are
    averaged. The learning rate decays by decay_factor at each epoch listed
    by decay_epochs(). Identical seeds and configs reproduce the report
    bit for bit (wall_clock aside).

    Raises:
        TrainingDivergedError: loss or gradient became non-finite.
    """
    _check_model(model)
    started = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    episodes = [
        sample_task(bundle, protocol, rng, split=split, model=model)
        for _ in range(cfg.tasks_per_split)
    ]
    params = _pack(schedule)
    adam = _Adam(len(params), cfg)
    current = schedule
    epoch_losses, epoch_accs = [], []
    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate * cfg.decay_factor ** sum(
            1 for d in cfg.decay_epochs() if epoch >= d
        )
        losses, accs = [], []
        for start in range(0, len(episodes), cfg.batch_tasks):
            batch = episodes[start : start + cfg.batch_tasks]
            grads = []
            for episode in batch:
                a_nodes, b_nodes, tz_node = _raw_nodes(current)
                try:
                    u_query = _forward(
                        episode.task, model, current, a_nodes, b_nodes, tz_node,
                        cfg.inner_steps,
                    )
                except NonFiniteIntermediateError as exc:
                    raise TrainingDivergedError(epoch) from exc
                out = _cross_entropy(u_query, episode.query_labels)
                ad.backward(out)
                record = GradientRecord(
                    d_a=np.array([0.0 if n.grad is None else float(n.grad) for n in a_nodes]),
                    d_b=np.array([0.0 if n.grad is None else float(n.grad) for n in b_nodes]),
                    d_tz=0.0 if tz_node.grad is None else float(tz_node.grad),
                    loss=float(out.value),
                )
                grads.append(record)
                losses.append(record.loss)
                accs.append(_accuracy(u_query, episode.query_labels))
            mean_a = np.mean([g.d_a for g in grads], axis=0)
            mean_b = np.mean([g.d_b for g in grads], axis=0)
            mean_tz = float(np.mean([g.d_tz for g in grads]))
            pieces = [mean_a]
            if current.temperature:
                pieces.append(mean_b)
            pieces.append([mean_tz])
            g = np.concatenate(pieces)
            if not (np.all(np.isfinite(g)) and np.all(np.isfinite(losses))):
                raise TrainingDivergedError(epoch)
            if cfg.optimizer == "adam":
                params = adam.step(params, g, lr)
            elif cfg.optimizer == "sgd":
                params = params - lr * g
            else:
                raise ValueError(f"train: unknown optimizer {cfg.optimizer!r}")
            current = _unpack(current, params)
        epoch_losses.append(float(np.mean(losses)))
        epoch_accs.append(float(np.mean(accs)))
    return TrainReport(
        epoch_losses=np.array(epoch_losses),
        epoch_accuracies=np.array(epoch_accs),
        schedule=current,
        wall_clock=time.perf_counter() - started,
    )


def ablation_modes(schedule: HyperSchedule) -> dict:
    """The three studied schedule variants derived from one schedule.

    "full" is the schedule itself; "fixed" shares a single (a, b) pair
    across layers (taking the first layer's values); "temperature_off"
    pins the temperature to exactly 1 and removes b from training.
    """
    fixed = replace(
        schedule,
        adaptive=False,
        a=schedule.a[:1].copy(),
        b=schedule.b[:1].copy(),
    )
    temp_off = replace(schedule, temperature=False)
    return {"full": schedule, "fixed": fixed, "temperature_off": temp_off}
