"""Numerical checks of the convergence theory on convex test objectives.

The quadratic probe ``F(theta) = 0.5 theta' A theta`` has the noise-aware
objective ``F + s |grad F|^2 = 0.5 theta' (A + 2 s A^2) theta``, so both the
regularized gradient and its true smoothness constant are known in closed
form. That makes it the natural oracle for the smoothness scaling and the
O(1/t) bound below.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .channel import aggregated_uplink_variance
from .exceptions import ConfigurationError

BOUND_SLACK = 1e-9


@dataclass(frozen=True)
class ConvexProbe:
    """Quadratic ``0.5 theta' A theta`` with a PSD matrix A and minimizer 0."""

    A: np.ndarray

    def __post_init__(self):
        A = np.array(self.A, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ConfigurationError(f"A must be square, got shape {A.shape}")
        if not np.allclose(A, A.T, rtol=0.0, atol=1e-12):
            raise ConfigurationError("A must be symmetric within 1e-12")
        A = 0.5 * (A + A.T)
        if np.linalg.eigvalsh(A)[0] < -1e-12:
            raise ConfigurationError("A must be positive semidefinite")
        A.setflags(write=False)
        object.__setattr__(self, "A", A)

    @property
    def dim(self) -> int:
        return self.A.shape[0]

    @property
    def beta(self) -> float:
        return max(float(np.linalg.eigvalsh(self.A)[-1]), 0.0)

    @property
    def theta_star(self) -> np.ndarray:
        return np.zeros(self.dim)

    def top_eigenvector(self) -> np.ndarray:
        return np.linalg.eigh(self.A)[1][:, -1]

    def loss(self, theta) -> float:
        theta = np.asarray(theta, dtype=np.float64)
        return 0.5 * float(theta @ self.A @ theta)

    def gradient(self, theta) -> np.ndarray:
        return self.A @ np.asarray(theta, dtype=np.float64)

    def regularized_loss(self, theta, noise_var: float) -> float:
        g = self.gradient(theta)
        return self.loss(theta) + noise_var * float(g @ g)

    def regularized_gradient(self, theta, noise_var: float) -> np.ndarray:
        g = self.gradient(theta)
        return g + 2.0 * noise_var * (self.A @ g)

    def regularized_smoothness(self, noise_var: float) -> float:
        """Exact gradient-Lipschitz constant of the regularized loss: ``beta + 2 s beta^2``."""
        return self.beta + 2.0 * noise_var * self.beta ** 2


def random_probe(rng: np.random.Generator, dim: int, max_eig: float = 4.0) -> ConvexProbe:
    """PSD matrix with eigenvalues uniform on ``[0, max_eig]`` and a random eigenbasis."""
    Q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    eig = rng.uniform(0.0, max_eig, size=dim)
    return ConvexProbe((Q * eig) @ Q.T)


def claimed_smoothness(beta: float, noise_var: float) -> float:
    """Smoothness constant claimed for the regularized loss: ``(1 + s) beta``."""
    return (1.0 + noise_var) * beta


def estimate_smoothness(grad_fn: Callable[[np.ndarray, float], np.ndarray], noise_var: float,
                        probe_pairs: Iterable[tuple[np.ndarray, np.ndarray]]) -> float:
    """Largest observed ``|grad(a) - grad(b)| / |a - b|`` over the pairs.

    ``grad_fn(theta, noise_var)`` returns the gradient of the regularized
    loss. Pairs with ``a == b`` carry no information and are skipped with a
    warning.
    """
    best = 0.0
    skipped = 0
    for a, b in probe_pairs:
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        gap = float(np.linalg.norm(a - b))
        if gap == 0.0:
            skipped += 1
            continue
        ratio = float(np.linalg.norm(grad_fn(a, noise_var) - grad_fn(b, noise_var))) / gap
        best = max(best, ratio)
    if skipped:
        warnings.warn(f"skipped {skipped} coincident probe pair(s)", RuntimeWarning, stacklevel=2)
    return best


def smoothness_pairs(probe: ConvexProbe, rng: np.random.Generator, n_random: int = 10_000,
                     scale: float = 1.0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Random pairs plus pairs separated along the top eigenvector.

    Random directions alone tend to underestimate the largest eigenvalue in
    higher dimensions; the aligned pairs pin it down.
    """
    pairs = []
    for _ in range(n_random):
        a = rng.normal(scale=scale, size=probe.dim)
        pairs.append((a, a + rng.normal(scale=scale, size=probe.dim)))
    v = probe.top_eigenvector()
    for step in (1e-3, 1.0, 10.0):
        a = rng.normal(scale=scale, size=probe.dim)
        pairs.append((a, a + step * v))
    return pairs


@dataclass(frozen=True)
class BoundReport:
    t: int
    lhs: float
    rhs: float

    @property
    def satisfied(self) -> bool:
        return self.lhs <= self.rhs * (1.0 + BOUND_SLACK)


@dataclass
class BoundRun:
    reports: list[BoundReport]
    eta: float
    noise_var: float
    beta: float
    violations: list[BoundReport] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def failure_artifact(self) -> dict:
        """Everything needed to replay the first violation."""
        if self.ok:
            return {}
        first = self.violations[0]
        return {"t": first.t, "lhs": first.lhs, "rhs": first.rhs, "eta": self.eta,
                "noise_var": self.noise_var, "beta": self.beta,
                "n_violations": len(self.violations)}


def check_convergence_bound(probe: ConvexProbe, eta: float, noise_var: float, theta0, T: int,
                   smoothness: str = "claimed") -> BoundRun:
    """Gradient descent on the regularized quadratic against ``|theta0|^2 / (2 eta t)``.

    With ``smoothness="claimed"`` the learning rate must satisfy
    ``eta <= 1 / ((1 + noise_var) * beta)``; ``"exact"`` uses the true
    constant ``beta + 2 noise_var beta^2`` instead. GD uses the exact
    regularized gradient, so whether the bound holds is an empirical
    outcome, reported per step.
    """
    if noise_var < 0:
        raise ConfigurationError("noise_var must be >= 0")
    if T < 1:
        raise ConfigurationError("T must be >= 1")
    if smoothness == "claimed":
        beta_bar, formula = claimed_smoothness(probe.beta, noise_var), "1 / ((1 + noise_var) * beta)"
    elif smoothness == "exact":
        beta_bar, formula = probe.regularized_smoothness(noise_var), "1 / (beta + 2 noise_var beta^2)"
    else:
        raise ConfigurationError("smoothness must be 'claimed' or 'exact'")
    bound = 1.0 / beta_bar if beta_bar > 0 else math.inf
    if not 0 < eta <= bound:
        raise ConfigurationError(f"eta = {eta} violates eta <= {formula} = {bound}")
    theta = np.array(theta0, dtype=np.float64)
    if theta.shape != (probe.dim,):
        raise ConfigurationError(f"theta0 must have shape ({probe.dim},)")
    start_gap = float(np.sum((theta - probe.theta_star) ** 2))
    f_star = probe.regularized_loss(probe.theta_star, noise_var)
    run = BoundRun([], eta, noise_var, probe.beta)
    for t in range(1, T + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            theta = theta - eta * probe.regularized_gradient(theta, noise_var)
            lhs = probe.regularized_loss(theta, noise_var) - f_star
        report = BoundReport(t, lhs, start_gap / (2.0 * eta * t))
        run.reports.append(report)
        if not report.satisfied:
            run.violations.append(report)
    return run


def noise_ordering(sizes: Sequence[float], variances: Sequence[float], active: Iterable[int],
                   mass_weighted: bool = False) -> tuple[float, float, bool]:
    """Aggregated uplink variance with every client active versus only ``active``.

    Returns ``(var_fl, var_hfcl, var_hfcl <= var_fl)``.
    """
    if len(sizes) != len(variances):
        raise ConfigurationError("need one variance per client")
    active = sorted(set(active))
    if any(not 0 <= k < len(sizes) for k in active):
        raise ConfigurationError("active subset must index existing clients")
    d_total = float(sum(sizes))
    everyone = list(zip(sizes, variances))
    var_fl = aggregated_uplink_variance(everyone, d_total, mass_weighted)
    var_hfcl = aggregated_uplink_variance([everyone[k] for k in active], d_total, mass_weighted)
    return var_fl, var_hfcl, var_hfcl <= var_fl


def monte_carlo_uplink_variance(sizes: Sequence[float], variances: Sequence[float],
                                rng: np.random.Generator, draws: int = 100_000) -> float:
    """Sample variance of ``sum(D_k n_k) / D`` with ``n_k ~ N(0, var_k)``."""
    sizes = np.asarray(sizes, dtype=np.float64)
    std = np.sqrt(np.asarray(variances, dtype=np.float64))
    noise = rng.normal(size=(draws, sizes.size)) * std
    return float(np.var(noise @ sizes / sizes.sum(), ddof=1))


@dataclass(frozen=True)
class OrderingCounterexample:
    sizes: tuple[int, ...]
    active: tuple[int, ...]
    var_fl: float
    var_hfcl: float


def search_ordering_counterexample(max_clients: int = 5, max_size: int = 5, noise_var: float = 1.0,
                                   mass_weighted: bool = True) -> OrderingCounterexample | None:
    """Brute-force search for equal-variance configurations with ``var_hfcl > var_fl``.

    Covers every client count up to ``max_clients``, every size vector in
    ``1..max_size`` and every nonempty active subset. Returns the first hit,
    or None when no configuration inverts the ordering.
    """
    for K in range(1, max_clients + 1):
        for sizes in itertools.product(range(1, max_size + 1), repeat=K):
            for r in range(1, K + 1):
                for active in itertools.combinations(range(K), r):
                    var_fl, var_hfcl, ordered = noise_ordering(sizes, [noise_var] * K, active,
                                                               mass_weighted)
                    if not ordered:
                        return OrderingCounterexample(tuple(sizes), active, var_fl, var_hfcl)
    return None


def convexity_probe(loss_fn: Callable[[np.ndarray], float],
                    samples: Sequence[tuple[np.ndarray, np.ndarray, float]], tol: float = 1e-9) -> bool:
    """True when ``F((1-l) a + l b) <= (1-l) F(a) + l F(b) + tol`` for every triple."""
    if len(samples) < 10:
        raise ConfigurationError("convexity_probe needs at least 10 (theta, theta', lambda) triples")
    for a, b, lam in samples:
        if not 0.0 <= lam <= 1.0:
            raise ConfigurationError(f"lambda must lie in [0, 1], got {lam}")
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        mid = loss_fn((1.0 - lam) * a + lam * b)
        if mid > (1.0 - lam) * loss_fn(a) + lam * loss_fn(b) + tol:
            return False
    return True


def find_nonconvex_triple(loss_fn: Callable[[np.ndarray], float], dim: int, rng: np.random.Generator,
                          tries: int = 2000, scale: float = 1.0):
    """Random search for a triple breaking the convexity inequality; None if none found."""
    for _ in range(tries):
        a = rng.normal(scale=scale, size=dim)
        b = rng.normal(scale=scale, size=dim)
        lam = float(rng.uniform(0.05, 0.95))
        if loss_fn((1.0 - lam) * a + lam * b) > (1.0 - lam) * loss_fn(a) + lam * loss_fn(b) + 1e-9:
            return a, b, lam
    return None


def verification_report(seed: int = 0, n_probes: int = 20, T: int = 1000) -> tuple[str, bool]:
    """Run the theory checks and render them as ``key: value`` text.

    Returns the text and whether every check passed.
    """
    rng = np.random.default_rng(seed)
    lines = []
    ok = True

    lines.append("[smoothness]")
    probe = ConvexProbe(np.diag([2.0, 1.0]))
    for s in (0.0, 0.1, 0.5, 1.0, 5.0):
        measured = estimate_smoothness(probe.regularized_gradient, s, smoothness_pairs(probe, rng, 200))
        claimed = claimed_smoothness(probe.beta, s)
        exact = probe.regularized_smoothness(s)
        match = abs(measured - claimed) <= 1e-6 * claimed
        ok &= match
        lines.append(f"noise_var={s:g} measured={measured:.9g} claimed={claimed:.9g} "
                     f"exact={exact:.9g} claimed_matches={match}")

    lines.append("[convergence_bound]")
    for rule in ("claimed", "exact"):
        violations = 0
        for _ in range(n_probes):
            p = random_probe(rng, int(rng.integers(2, 9)))
            s = float(rng.uniform(0.0, 1.0))
            beta_bar = claimed_smoothness(p.beta, s) if rule == "claimed" else p.regularized_smoothness(s)
            eta = float(rng.uniform(0.1, 1.0)) / beta_bar
            run = check_convergence_bound(p, eta, s, rng.normal(size=p.dim), T, smoothness=rule)
            violations += not run.ok
        ok &= violations == 0
        lines.append(f"step_rule={rule} probes={n_probes} probes_with_violations={violations}")

    lines.append("[noise_ordering]")
    var_fl, var_hfcl, ordered = noise_ordering([1.0] * 10, [1.0] * 10, range(5, 10))
    ok &= ordered
    lines.append(f"equal_sizes var_fl={var_fl:.6g} var_hfcl={var_hfcl:.6g} ordered={ordered}")
    hit = search_ordering_counterexample()
    lines.append(f"inversion_counterexample={'none' if hit is None else hit}")

    lines.append(f"[summary]\nall_passed={ok}")
    return "\n".join(lines) + "\n", ok
