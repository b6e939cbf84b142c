"""Numerical verification of the generalization-theory claims.

Two pieces: (1) the finite-basis Rademacher bound, with hidden constants and
log factors set to 1 so only the scaling laws are meaningful, and (2) the
sparsifying effect of iterated self-distillation on kernel ridge regression,
verified by direct simulation against a closed-form first-step oracle.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass
class BasisSpec:
    coordinate_bounds: np.ndarray   # C_j > 0, length m
    supnorm_bounds: np.ndarray      # V_j > 0, length m
    n: int                          # sample size

    def validate(self):
        c = np.asarray(self.coordinate_bounds, dtype=np.float64)
        v = np.asarray(self.supnorm_bounds, dtype=np.float64)
        if c.size < 1 or v.size != c.size:
            raise ValueError("coordinate and sup-norm bounds must be nonempty, same length")
        if (c <= 0).any() or (v <= 0).any() or self.n < 1:
            raise ValueError("bounds must be positive and n >= 1")
        return c, v


def rademacher_bound(spec: BasisSpec) -> float:
    """(sum_j C_j) * max_j V_j / sqrt(n), with constants/log factors set to 1."""
    c, v = spec.validate()
    return float(c.sum() * v.max() / np.sqrt(spec.n))


def gaussian_kernel(x: np.ndarray, width: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    d2 = (x[:, None] - x[None, :]) ** 2
    return np.exp(-d2 / (2.0 * width ** 2))


@dataclass
class DistillProblem:
    inputs: np.ndarray
    targets: np.ndarray
    kernel_width: float = 1.0
    epsilon: float = 1e-3
    steps: int = 10
    min_eig: float = 1e-10

    def gram(self) -> np.ndarray:
        k = gaussian_kernel(self.inputs, self.kernel_width)
        w = np.linalg.eigvalsh(k)
        if w.min() <= self.min_eig:
            raise np.linalg.LinAlgError(
                f"Gram matrix not positive definite enough (min eig {w.min():.3e})")
        return k


def ridge_solution(gram: np.ndarray, targets: np.ndarray, eta: float) -> np.ndarray:
    """alpha = (K + eta I)^-1 y."""
    n = gram.shape[0]
    return np.linalg.solve(gram + eta * np.eye(n), targets)


def _train_mse(gram, targets, eta):
    alpha = ridge_solution(gram, targets, eta)
    resid = gram @ alpha - targets
    return float(np.mean(resid ** 2))


def fit_ridge_to_tolerance(gram: np.ndarray, targets: np.ndarray, epsilon: float,
                           eta_min: float = 1e-12, eta_max: float = 1e12,
                           iters: int = 200) -> float:
    """Bisect over the ridge parameter until training MSE lands in
    [0.9*epsilon, epsilon]. MSE is increasing in eta, so bisection applies.

    If even the largest eta undershoots 0.9*epsilon (targets already tiny),
    eta_max is returned: the constraint MSE <= epsilon still holds.
    """
    if _train_mse(gram, targets, eta_min) > epsilon:
        raise ValueError(
            f"epsilon {epsilon} infeasible: even eta={eta_min} leaves MSE above it")
    if _train_mse(gram, targets, eta_max) < 0.9 * epsilon:
        return eta_max
    lo, hi = np.log(eta_min), np.log(eta_max)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        mse = _train_mse(gram, targets, np.exp(mid))
        if 0.9 * epsilon <= mse <= epsilon:
            return float(np.exp(mid))
        if mse > epsilon:
            hi = mid
        else:
            lo = mid
    return float(np.exp(0.5 * (lo + hi)))


def self_distill_simulate(problem: DistillProblem) -> dict:
    """Iterate: fit kernel ridge to current targets, feed predictions back in.

    Returns the T x n history of solution coefficients expressed in the Gram
    eigenbasis, plus the eigenvalues, per-step ridge parameters, and the
    prediction history.
    """
    gram = problem.gram()
    eigvals, eigvecs = np.linalg.eigh(gram)
    y = np.asarray(problem.targets, dtype=np.float64).reshape(-1).copy()
    coeffs, etas, preds = [], [], []
    for _ in range(problem.steps):
        if np.allclose(y, 0.0):
            alpha = np.zeros_like(y)
            eta = np.inf
            pred = np.zeros_like(y)
        else:
            eta = fit_ridge_to_tolerance(gram, y, problem.epsilon)
            alpha = ridge_solution(gram, y, eta)
            pred = gram @ alpha
        coeffs.append(eigvecs.T @ alpha)
        etas.append(eta)
        preds.append(pred)
        y = pred
    return {"coefficients": np.stack(coeffs), "eigenvalues": eigvals,
            "etas": np.asarray(etas), "predictions": np.stack(preds)}


def make_instance(n: int, kernel_width: float, seed: int, epsilon: float = 1e-3,
                  steps: int = 10) -> DistillProblem:
    """Random distillation instance with targets in the kernel's range.

    Inputs are a jittered grid (keeps the Gram matrix well conditioned);
    targets are K @ g for Gaussian g, i.e. a function the kernel machine can
    represent, which is the regime the sparsification claim addresses.
    """
    rng = np.random.default_rng(seed)
    x = np.linspace(-2.0, 2.0, n) + rng.uniform(-0.04, 0.04, size=n)
    k = gaussian_kernel(x, kernel_width)
    y = k @ rng.normal(size=n)
    y = y / np.abs(y).max()
    return DistillProblem(inputs=x, targets=y, kernel_width=kernel_width,
                          epsilon=epsilon, steps=steps)


def participation_ratio(a: np.ndarray) -> float:
    """(sum |a|)^2 / (n * sum a^2); 1 for uniform magnitudes, 1/n for 1-sparse."""
    a = np.abs(np.asarray(a, dtype=np.float64))
    s2 = (a ** 2).sum()
    if s2 == 0:
        return 0.0
    return float(a.sum() ** 2 / (a.size * s2))


def sparsification_report(history: dict) -> dict:
    """Per-step coefficient statistics and the monotonicity verdict for the
    top eigendirection's dominance."""
    coeffs = history["coefficients"]
    if coeffs.shape[0] < 2:
        raise ValueError("need at least 2 distillation steps")
    eigvals = history["eigenvalues"]
    top = int(np.argmax(eigvals))
    rows = []
    for t in range(coeffs.shape[0]):
        a = np.abs(coeffs[t])
        total = a.sum()
        rows.append({
            "step": t,
            "norm_l1": float(total),
            "norm_l2": float(np.sqrt((a ** 2).sum())),
            "participation_ratio": participation_ratio(a),
            "top_share": float(a[top] / total) if total > 0 else 0.0,
            "max_over_median": float(a.max() / np.median(a)) if np.median(a) > 0 else np.inf,
        })
    pr = [r["participation_ratio"] for r in rows]
    share = [r["top_share"] for r in rows]
    verdict = all(pr[t + 1] <= pr[t] + 1e-8 for t in range(len(pr) - 1))
    share_up = all(share[t + 1] >= share[t] - 1e-8 for t in range(len(share) - 1))
    return {"rows": rows, "pr_nonincreasing": verdict, "top_share_nondecreasing": share_up}
