"""Independent reference implementations used only to check the solvers.

Everything here deliberately re-derives its result with plain, readable
loops and shares no code with the solver or trainer modules; only the
numeric kernels are common. Signatures take bare arrays so this module
never imports the solver's types.
"""

import numpy as np
from scipy import optimize

from . import kernels

_SIMPLEX_FLOOR = 1e-12
_PI_FLOOR = 1e-12
_LOSS_FLOOR = 1e-12


class OracleConvergenceError(RuntimeError):
    """A reference optimizer failed to reach its required gradient norm."""


def reference_em(
    features: np.ndarray,
    support_idx: np.ndarray,
    query_idx: np.ndarray,
    support_labels: np.ndarray,
    iterations: int,
):
    """Textbook EM for an identity-covariance Gaussian mixture.

    Support responsibilities stay clamped to their labels; mixture weights
    are estimated from the query responsibilities alone. Means start at the
    per-class support averages and weights start uniform.

    Returns:
        List of (responsibilities, means, weights) snapshots, one per
        iteration.
    """
    z = np.asarray(features, dtype=np.float64)
    support_idx = np.asarray(support_idx)
    query_idx = np.asarray(query_idx)
    y = np.asarray(support_labels, dtype=np.float64)
    n, k_total = z.shape[0], y.shape[1]

    means = np.zeros((k_total, z.shape[1]))
    for k in range(k_total):
        members = [z[i] for i, row in zip(support_idx, y) if row[k] == 1.0]
        means[k] = np.mean(members, axis=0)
    weights = np.full(k_total, 1.0 / k_total)

    history = []
    for _ in range(iterations):
        # E-step: posterior responsibility of each component, support clamped.
        resp = np.zeros((n, k_total))
        for i, row in zip(support_idx, y):
            resp[i] = row
        for i in query_idx:
            log_like = np.array(
                [-0.5 * np.dot(z[i] - means[k], z[i] - means[k]) for k in range(k_total)]
            )
            scaled = weights * np.exp(log_like - log_like.max())
            resp[i] = scaled / scaled.sum()
        # M-step: weighted means over every row, weights over query mass.
        for k in range(k_total):
            mass = resp[:, k].sum()
            means[k] = (resp[:, k] @ z) / mass
        weights = resp[query_idx].mean(axis=0)
        history.append((resp.copy(), means.copy(), weights.copy()))
    return history


def _raw_at(raw: np.ndarray, layer: int) -> float:
    return float(raw[layer]) if len(raw) > 1 else float(raw[0])


def naive_unrolled_loss(
    features: np.ndarray,
    support_idx: np.ndarray,
    query_idx: np.ndarray,
    support_labels: np.ndarray,
    query_labels: np.ndarray,
    model: str,
    raw_balance: np.ndarray,
    raw_temp: np.ndarray,
    raw_feature_temp: float,
    layers: int,
    temperature_on: bool = True,
    inner_steps: int = 1,
) -> float:
    """Cross-entropy of the final query assignments, computed by a plain
    re-implementation of the full unrolled forward pass.

    Raw hyperparameters are transformed exactly as the trainer does:
    balance = softplus(a), temperature = 1 + softplus(b), feature
    temperature = softplus(t) for gaussian features and 1 + softplus(t)
    for probability features.
    """
    z_raw = np.asarray(features, dtype=np.float64)
    support_idx = np.asarray(support_idx)
    query_idx = np.asarray(query_idx)
    y_support = np.asarray(support_labels, dtype=np.float64)
    y_query = np.asarray(query_labels, dtype=np.float64)
    k_total = y_support.shape[1]
    n_query = len(query_idx)

    if model == "gaussian":
        z = kernels.softplus(raw_feature_temp) * z_raw
    else:
        probs = kernels.softmax((1.0 + kernels.softplus(raw_feature_temp)) * z_raw, axis=1)
        probs = np.maximum(probs, _SIMPLEX_FLOOR)
        z = probs / probs.sum(axis=1, keepdims=True)

    u = np.zeros((z.shape[0], k_total))
    for i, row in zip(support_idx, y_support):
        u[i] = row
    if model == "gaussian":
        counts = y_support.sum(axis=0)
        theta = (y_support.T @ z[support_idx]) / counts[:, None]
        pi = np.ones(k_total)
    else:
        for i in query_idx:
            u[i] = z[i]
        theta = np.ones((k_total, k_total))
        pi = u[query_idx].mean(axis=0)

    def log_density(rows, th):
        if model == "gaussian":
            return np.array(
                [[-0.5 * np.dot(r - th[k], r - th[k]) for k in range(k_total)] for r in rows]
            )
        log_z = np.log(rows)
        out = np.zeros((len(rows), k_total))
        for k in range(k_total):
            norm = kernels.log_gamma(th[k].sum()) - sum(
                kernels.log_gamma(th[k][i]) for i in range(k_total)
            )
            out[:, k] = log_z @ (th[k] - 1.0) + norm
        return out

    def assignment_step(balance, temp):
        logits = log_density(z[query_idx], theta) + (balance / n_query) * np.log(
            np.maximum(pi, _PI_FLOOR)
        )
        if temperature_on:
            logits = logits / temp
        for j, i in enumerate(query_idx):
            u[i] = kernels.softmax(logits[j])

    def theta_step():
        for k in range(k_total):
            w = u[:, k]
            if model == "gaussian":
                theta[k] = (w @ z) / w.sum()
            else:
                mean_log = (w @ np.log(z)) / w.sum()
                t = theta[k]
                for _ in range(inner_steps):
                    t = kernels.inv_digamma(kernels.digamma(t.sum()) + mean_log)
                theta[k] = t

    for layer in range(layers):
        balance = kernels.softplus(_raw_at(raw_balance, layer))
        temp = 1.0 + kernels.softplus(_raw_at(raw_temp, layer))
        if model == "gaussian":
            assignment_step(balance, temp)
            theta_step()
            pi = u[query_idx].mean(axis=0)
        else:
            theta_step()
            pi = u[query_idx].mean(axis=0)
            assignment_step(balance, temp)

    loss = 0.0
    for j, i in enumerate(query_idx):
        loss -= np.dot(y_query[j], np.log(np.maximum(u[i], _LOSS_FLOOR)))
    return float(loss / n_query)


def central_difference(fn, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Per-coordinate central differences (f(x+h) - f(x-h)) / 2h.

    Exact for quadratics (the h^2 terms cancel); O(h^2) error otherwise.
    """
    if h <= 0.0:
        raise ValueError("central_difference: h must be positive")
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros(len(x))
    for i in range(len(x)):
        bump = np.zeros(len(x))
        bump[i] = h
        g[i] = (fn(x + bump) - fn(x - bump)) / (2.0 * h)
    return g


def fd_gradient(
    features: np.ndarray,
    support_idx: np.ndarray,
    query_idx: np.ndarray,
    support_labels: np.ndarray,
    query_labels: np.ndarray,
    model: str,
    raw_balance: np.ndarray,
    raw_temp: np.ndarray,
    raw_feature_temp: float,
    layers: int,
    temperature_on: bool = True,
    inner_steps: int = 1,
    h: float = 1e-4,
):
    """Central finite differences of the unrolled loss over every raw
    hyperparameter, each side evaluated by a full fresh forward run.

    Returns:
        dict with keys d_a, d_b, d_tz and loss.
    """
    raw_balance = np.asarray(raw_balance, dtype=np.float64)
    raw_temp = np.asarray(raw_temp, dtype=np.float64)

    def run(a, b, t):
        return naive_unrolled_loss(
            features, support_idx, query_idx, support_labels, query_labels,
            model, a, b, t, layers,
            temperature_on=temperature_on, inner_steps=inner_steps,
        )

    d_a = central_difference(
        lambda a: run(a, raw_temp, raw_feature_temp), raw_balance, h
    )
    if temperature_on:
        d_b = central_difference(
            lambda b: run(raw_balance, b, raw_feature_temp), raw_temp, h
        )
    else:
        d_b = np.zeros(len(raw_temp))
    d_tz = central_difference(
        lambda t: run(raw_balance, raw_temp, float(t[0])),
        np.array([raw_feature_temp]),
        h,
    )[0]
    return {
        "d_a": d_a,
        "d_b": d_b,
        "d_tz": float(d_tz),
        "loss": run(raw_balance, raw_temp, raw_feature_temp),
    }


def dirichlet_mle_reference(
    z: np.ndarray,
    weights: np.ndarray,
    grad_tol: float = 1e-8,
) -> np.ndarray:
    """Weighted Dirichlet maximum-likelihood concentrations by quasi-Newton.

    Maximizes the per-unit-weight log-likelihood with L-BFGS-B and then
    polishes with exact Newton steps (the Hessian is diagonal plus rank
    one) until the gradient norm drops below grad_tol.

    Raises:
        OracleConvergenceError: the gradient norm target was not reached,
            which also covers the unbounded-likelihood degenerate case.
    """
    z = np.asarray(z, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    total = weights.sum()
    if total <= 0.0:
        raise ValueError("dirichlet_mle_reference: zero total weight")
    mean_log = (weights @ np.log(z)) / total
    dim = z.shape[1]

    def negloglik(theta):
        value = (
            kernels.log_gamma(theta.sum())
            - np.sum(kernels.log_gamma(theta))
            + np.dot(theta - 1.0, mean_log)
        )
        return -value

    def grad(theta):
        return -(kernels.digamma(theta.sum()) - kernels.digamma(theta) + mean_log)

    result = optimize.minimize(
        negloglik,
        x0=np.ones(dim),
        jac=grad,
        method="L-BFGS-B",
        bounds=[(1e-8, None)] * dim,
        options={"maxiter": 1000, "ftol": 1e-15, "gtol": 1e-12},
    )
    theta = np.asarray(result.x, dtype=np.float64)

    # Newton polish; Hessian inverse via the diagonal-plus-rank-one form.
    for _ in range(100):
        g = -grad(theta)
        if np.linalg.norm(g) <= grad_tol:
            return theta
        q = -kernels.trigamma(theta)
        c = kernels.trigamma(theta.sum())
        b = (g / q).sum() / (1.0 / c + (1.0 / q).sum())
        step = (g - b) / q
        proposal = theta - step
        while np.any(proposal <= 0.0):
            step = step / 2.0
            proposal = theta - step
        theta = proposal
    raise OracleConvergenceError(
        f"dirichlet_mle_reference: gradient norm {np.linalg.norm(-grad(theta)):.3e} "
        f"above {grad_tol}"
    )
