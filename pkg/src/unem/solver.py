"""Block-coordinate solver for transductive few-shot class assignment.

The solver minimizes a composite objective over soft assignments u and
class parameters theta: a log-likelihood term over all samples, a marginal
entropy term weighted by a class-balance hyperparameter, and a Shannon
entropy term weighted by a temperature. Support rows of u stay clamped to
their one-hot labels; query rows are updated by a softmax that blends the
log density with the log class proportions.

Layer orderings differ per model and are kept exactly as each model's
fixed-point derivation prescribes: the Gaussian path updates assignments
first (from the previous layer's parameters and proportions, starting from
unnormalized proportions of one), the Dirichlet path updates parameters and
proportions first (from the current assignments, starting from the simplex
features themselves).
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import distributions, kernels
from .distributions import DegenerateClassError, FeatureMapConfig

# Class proportions are floored here before any logarithm.
PI_FLOOR = 1e-12

# Raw temperature parameters are initialized at this clamp, which puts the
# effective temperature within 5e-5 of its lower bound of 1.
RAW_TEMPERATURE_CLAMP = -10.0

MODELS = ("gaussian", "dirichlet")


class InitializationError(ValueError):
    """The task cannot seed the requested model (e.g. an unsupported class)."""


@dataclass(frozen=True)
class TaskInstance:
    """One few-shot task as the solver sees it.

    The solver is never told which classes actually occur among the query
    rows; any notion of effective classes lives outside this type.

    Attributes:
        features: N x d matrix; raw feature rows (vision) or similarity
            logit rows (probability mode), support and query together.
        support_idx: indices of labeled rows.
        query_idx: indices of unlabeled rows.
        support_labels: |S| x K one-hot labels for the support rows.
        k_total: number of candidate classes K.
    """

    features: np.ndarray
    support_idx: np.ndarray
    query_idx: np.ndarray
    support_labels: np.ndarray
    k_total: int

    def __post_init__(self):
        n = self.features.shape[0]
        s, q = np.asarray(self.support_idx), np.asarray(self.query_idx)
        if len(np.intersect1d(s, q)) > 0:
            raise ValueError("TaskInstance: support and query overlap")
        if len(s) + len(q) != n:
            raise ValueError("TaskInstance: indices must cover all rows")
        if self.support_labels.shape != (len(s), self.k_total):
            raise ValueError("TaskInstance: support_labels must be |S| x K one-hot")
        row_sums = self.support_labels.sum(axis=1)
        if not np.allclose(row_sums, 1.0) or np.any(
            (self.support_labels != 0.0) & (self.support_labels != 1.0)
        ):
            raise ValueError("TaskInstance: support_labels must be one-hot")

    @property
    def n_query(self) -> int:
        return len(self.query_idx)


@dataclass(frozen=True)
class HyperSchedule:
    """Per-layer hyperparameters in raw (unconstrained) form.

    The class-balance weight is softplus(a) and the temperature is
    1 + softplus(b), keeping both in their valid ranges for any raw value.
    The feature temperature is softplus(t_z_raw) in vision_raw mode and
    1 + softplus(t_z_raw) in clip_probability mode. When adaptive, a and b
    hold one raw value per layer; otherwise a single shared value.
    When temperature is False the temperature is pinned to exactly 1 and b
    is ignored.
    """

    layers: int
    a: np.ndarray
    b: np.ndarray
    t_z_raw: float
    adaptive: bool = True
    temperature: bool = True
    feature_mode: str = "vision_raw"

    def __post_init__(self):
        object.__setattr__(self, "a", np.atleast_1d(np.asarray(self.a, dtype=np.float64)))
        object.__setattr__(self, "b", np.atleast_1d(np.asarray(self.b, dtype=np.float64)))
        expected = self.layers if self.adaptive else 1
        if len(self.a) != expected or len(self.b) != expected:
            raise ValueError(
                f"HyperSchedule: expected {expected} raw values per array, "
                f"got a={len(self.a)} b={len(self.b)}"
            )
        if self.layers < 0:
            raise ValueError("HyperSchedule: layers must be nonnegative")
        if self.feature_mode not in ("vision_raw", "clip_probability"):
            raise ValueError(f"HyperSchedule: unknown feature_mode {self.feature_mode!r}")

    def _slot(self, layer: int) -> int:
        return layer if self.adaptive else 0

    def balance(self, layer: int) -> float:
        return float(kernels.softplus(self.a[self._slot(layer)]))

    def temp(self, layer: int) -> float:
        if not self.temperature:
            return 1.0
        return 1.0 + float(kernels.softplus(self.b[self._slot(layer)]))

    def feature_scale(self) -> float:
        base = float(kernels.softplus(self.t_z_raw))
        return base if self.feature_mode == "vision_raw" else 1.0 + base

    def balances(self) -> np.ndarray:
        return np.array([self.balance(l) for l in range(self.layers)])

    def temps(self) -> np.ndarray:
        return np.array([self.temp(l) for l in range(self.layers)])

    def n_trainable(self) -> int:
        count = len(self.a) + 1
        if self.temperature:
            count += len(self.b)
        return count

    def feature_map(self) -> FeatureMapConfig:
        return FeatureMapConfig(mode=self.feature_mode, t_z=self.feature_scale())


def default_schedule(
    model: str,
    layers: int = 10,
    query_size: int = 75,
    k_total: int = 5,
    k_eff: int = 5,
    adaptive: bool = True,
    temperature: bool = True,
    balance_preset: str = "standard",
) -> HyperSchedule:
    """Untrained schedule with the documented default hyperparameters.

    Gaussian tasks start from a class-balance weight equal to the query set
    size; Dirichlet tasks start from K / k_eff ("standard") or that value
    scaled by the query size ("scaled_query"), always with temperature 1.
    """
    _check_model(model)
    if model == "gaussian":
        lam0 = float(query_size)
        mode = "vision_raw"
        t_z_raw = float(kernels.inv_softplus(1.0))
    else:
        lam0 = k_total / k_eff
        if balance_preset == "scaled_query":
            lam0 *= query_size
        mode = "clip_probability"
        t_z_raw = RAW_TEMPERATURE_CLAMP
    slots = layers if adaptive else 1
    a = np.full(slots, float(kernels.inv_softplus(lam0)))
    b = np.full(slots, RAW_TEMPERATURE_CLAMP)
    return HyperSchedule(
        layers=layers,
        a=a,
        b=b,
        t_z_raw=t_z_raw,
        adaptive=adaptive,
        temperature=temperature,
        feature_mode=mode,
    )


@dataclass(frozen=True)
class SolverState:
    """Assignments, parameters and cached proportions after some layer.

    u is None for a freshly initialized Gaussian state: that model has no
    meaningful assignments until the first softmax update runs.
    """

    u: "np.ndarray | None"
    theta: np.ndarray
    pi: np.ndarray
    layer: int = 0


@dataclass
class SolverTrace:
    """Composite objective after each layer plus degeneracy flags."""

    objectives: list = field(default_factory=list)
    degenerate: list = field(default_factory=list)


def _check_model(model: str) -> None:
    if model not in MODELS:
        raise ValueError(f"unknown model {model!r}; expected one of {MODELS}")


def _resolved(task: TaskInstance, features) -> np.ndarray:
    return task.features if features is None else features


def init_state(task: TaskInstance, model: str, features=None) -> SolverState:
    """Seed the solver.

    Gaussian: theta holds per-class support means, proportions start at the
    unnormalized value 1 (their log vanishes in the first update), u unset.
    Dirichlet: concentrations start at all ones, query assignments start at
    the simplex features themselves.
    """
    _check_model(model)
    z = _resolved(task, features)
    k = task.k_total
    if model == "gaussian":
        counts = task.support_labels.sum(axis=0)
        if np.any(counts == 0):
            raise InitializationError(
                "init_state: every class needs at least one support sample"
            )
        support = z[task.support_idx]
        theta = (task.support_labels.T @ support) / counts[:, None]
        return SolverState(u=None, theta=theta, pi=np.ones(k), layer=0)
    if z.shape[1] != k:
        raise InitializationError(
            "init_state: dirichlet features must have one column per class"
        )
    if np.any(z <= 0.0) or not np.allclose(z.sum(axis=1), 1.0, atol=1e-6):
        raise InitializationError(
            "init_state: dirichlet features must be strictly positive simplex rows"
        )
    u = np.empty((z.shape[0], k))
    u[task.support_idx] = task.support_labels
    u[task.query_idx] = z[task.query_idx]
    theta = np.ones((k, k))
    pi = u[task.query_idx].mean(axis=0)
    return SolverState(u=u, theta=theta, pi=pi, layer=0)


def _log_density(z: np.ndarray, theta: np.ndarray, model: str) -> np.ndarray:
    if model == "gaussian":
        return distributions.gaussian_log_pdf(z, theta)
    return distributions.dirichlet_log_pdf(z, theta)


def update_assignments(
    state: SolverState,
    task: TaskInstance,
    model: str,
    balance: float,
    temp: float,
    features=None,
) -> SolverState:
    """Softmax update of the query assignment rows.

    Query logits are the log density plus (balance / |Q|) times the log
    proportions (floored at PI_FLOOR); a temperature other than exactly 1
    divides the logits. Support rows stay one-hot.
    """
    _check_model(model)
    z = _resolved(task, features)
    log_dens = _log_density(z[task.query_idx], state.theta, model)
    logits = log_dens + (balance / task.n_query) * np.log(
        np.maximum(state.pi, PI_FLOOR)
    )
    if temp != 1.0:
        logits = logits / temp
    u = np.empty((z.shape[0], task.k_total))
    u[task.support_idx] = task.support_labels
    u[task.query_idx] = kernels.softmax(logits, axis=1)
    return replace(state, u=u)


def update_theta(
    state: SolverState,
    task: TaskInstance,
    model: str,
    features=None,
    inner_steps: int = 1,
):
    """Per-class parameter update from the current assignments.

    Gaussian classes take the responsibility-weighted mean over all rows;
    Dirichlet classes take inner_steps fixed-point concentration updates.
    A class whose responsibility column has no mass keeps its previous
    parameters and is reported in the returned flag list.

    Returns:
        (new state, list of flagged class indices)
    """
    _check_model(model)
    z = _resolved(task, features)
    theta = state.theta.copy()
    flagged = []
    for k in range(task.k_total):
        try:
            if model == "gaussian":
                theta[k] = distributions.gaussian_weighted_mean(z, state.u[:, k])
            else:
                theta[k] = distributions.dirichlet_mm_update(
                    z, state.u[:, k], state.theta[k], inner_steps=inner_steps
                )
        except DegenerateClassError:
            flagged.append(k)
    return replace(state, theta=theta), flagged


def update_pi(state: SolverState, task: TaskInstance) -> SolverState:
    """Class proportions as the mean assignment over the query rows."""
    pi = state.u[task.query_idx].mean(axis=0)
    return replace(state, pi=pi)


def _xlogx(p: np.ndarray) -> np.ndarray:
    # 0 * ln 0 is taken as 0.
    return np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)


def evaluate_objective(
    state: SolverState,
    task: TaskInstance,
    model: str,
    balance: float,
    temp: float,
    features=None,
) -> float:
    """Composite objective: negative log-likelihood over all rows, plus
    balance times the marginal entropy of the query proportions, plus temp
    times the negative Shannon entropy of the query assignments."""
    if state.u is None:
        raise ValueError("evaluate_objective: state has no assignments yet")
    _check_model(model)
    z = _resolved(task, features)
    log_dens = _log_density(z, state.theta, model)
    likelihood_term = -float(np.sum(state.u * log_dens))
    pi = state.u[task.query_idx].mean(axis=0)
    marginal_entropy = -float(np.sum(_xlogx(pi)))
    assignment_term = float(np.sum(_xlogx(state.u[task.query_idx])))
    return likelihood_term + balance * marginal_entropy + temp * assignment_term


def run_gem(
    task: TaskInstance,
    model: str,
    schedule: HyperSchedule,
    layers: "int | None" = None,
    inner_steps: int = 1,
):
    """Run the full solver for a number of layers.

    Features are mapped once through the schedule's feature map, then the
    model-specific layer ordering repeats: Gaussian layers update
    assignments, then parameters, then proportions; Dirichlet layers update
    parameters, then proportions, then assignments. The trace records the
    composite objective after every layer, evaluated at that layer's
    hyperparameters.

    Returns:
        (final SolverState, SolverTrace)
    """
    _check_model(model)
    if layers is None:
        layers = schedule.layers
    if schedule.adaptive and layers > schedule.layers:
        raise ValueError("run_gem: adaptive schedule is shorter than requested layers")
    z = distributions.map_features(task.features, schedule.feature_map())
    state = init_state(task, model, features=z)
    trace = SolverTrace()
    for layer in range(layers):
        balance = schedule.balance(layer)
        temp = schedule.temp(layer)
        if model == "gaussian":
            state = update_assignments(state, task, model, balance, temp, features=z)
            state, flagged = update_theta(state, task, model, features=z)
            state = update_pi(state, task)
        else:
            state, flagged = update_theta(
                state, task, model, features=z, inner_steps=inner_steps
            )
            state = update_pi(state, task)
            state = update_assignments(state, task, model, balance, temp, features=z)
        state = replace(state, layer=layer + 1)
        trace.objectives.append(
            evaluate_objective(state, task, model, balance, temp, features=z)
        )
        trace.degenerate.extend((layer, k) for k in flagged)
    return state, trace


def predict(state: SolverState, task: TaskInstance) -> np.ndarray:
    """Hard labels for the query rows; ties break to the lowest index."""
    if state.u is None:
        raise ValueError("predict: state has no assignments yet")
    return np.argmax(state.u[task.query_idx], axis=1)
