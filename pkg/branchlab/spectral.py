import logging
import math

from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from functools import reduce
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from scipy import sparse
from scipy.sparse.csgraph import breadth_first_order, connected_components

from .bmc import BmcSpec, ExpectationKernel, Truncation, expected_count_sequence
from .core import State
from .errors import ConvergenceError, ValidationError


MAX_ITERATIONS = 100_000
RESIDUAL_TOLERANCE = 1e-12
CERTIFICATE_TOLERANCE = 1e-10

logger = logging.getLogger(__name__)

TestFunction = Union[Callable[[State], float], Dict[State, float]]


class Method(Enum):
    truncation = "truncation"
    growth_slope = "growth_slope"
    test_function_certificate = "test_function_certificate"
    dense_perron = "dense_perron"
    pde = "pde"


class EigenvalueEstimate:
    """
    Eigenvalue estimate with a bracket [lower, upper] and the method that produced it
    """

    def __init__(
        self,
        value: float,
        lower: float,
        upper: float,
        method: Method,
        metadata: Optional[Dict] = None,
    ):
        if not lower <= value <= upper:
            raise ValidationError(f"[{lower}, {upper}] does not contain {value}", "bracket")
        self.value = value
        self.lower = lower
        self.upper = upper
        self.method = method
        self.metadata = metadata or {}

    def __str__(self):
        return f"{self.method.value}: {self.value:.8g} in [{self.lower:.8g}, {self.upper:.8g}]"

    def to_json(self) -> Dict:
        return {
            "value": self.value,
            "lower": self.lower,
            "upper": self.upper if math.isfinite(self.upper) else None,
            "method": self.method.value,
            "metadata": self.metadata,
        }


class TestFunctionCertificate:
    """
    Pointwise check of (mu)(x) >= rho u(x) on a finite set of states
    A valid certificate gives rho'_{c,x} >= rho for every checked x with u(x) > 0.
    """

    def __init__(
        self,
        u: Dict[State, float],
        rho: float,
        checked_states: List[State],
        margin: float,
        margins: np.ndarray,
        condition: str = "mean",
    ):
        self.u = u
        self.rho = rho
        self.checked_states = checked_states
        self.margin = margin
        self.margins = margins
        self.condition = condition

    @property
    def valid(self) -> bool:
        return self.margin >= -CERTIFICATE_TOLERANCE and any(v > 0 for v in self.u.values())

    @property
    def support(self) -> List[State]:
        return [x for x in self.checked_states if self.u.get(x, 0.0) > 0]

    def __str__(self):
        status = "valid" if self.valid else "invalid"
        return f"TestFunctionCertificate({status}, rho={self.rho:.8g}, margin={self.margin:.3g})"

    def to_json(self) -> Dict:
        return {
            "rho": self.rho,
            "valid": self.valid,
            "margin": self.margin,
            "condition": self.condition,
            "checked": len(self.checked_states),
            "support": len(self.support),
        }


def _is_irreducible(m: sparse.csr_matrix) -> bool:
    if m.shape[0] == 1:
        return True
    n_components, _ = connected_components(m, directed=True, connection="strong")
    return n_components == 1


def period(m: sparse.csr_matrix) -> int:
    """
    Period of an irreducible nonnegative matrix: gcd over edges (i, j) of level(i) + 1 - level(j)
    """
    order, predecessors = breadth_first_order(m, 0, directed=True, return_predecessors=True)
    level = np.zeros(m.shape[0], dtype=np.int64)
    for i in order[1:]:
        level[i] = level[predecessors[i]] + 1
    coo = m.tocoo()
    gaps = np.abs(level[coo.row] + 1 - level[coo.col])
    return int(reduce(math.gcd, gaps.tolist(), 0)) or 1


def _power_iteration(m: sparse.csr_matrix, max_iterations: int) -> Tuple[float, np.ndarray, int, bool]:
    n = m.shape[0]
    v = 1.0 + np.arange(n) / n
    v /= v.max()
    rho = 0.0
    for k in range(1, max_iterations + 1):
        w = m @ v
        rho = float(w.max())
        if rho <= 0.0:
            return 0.0, v, k, True
        residual = float(np.max(np.abs(w - rho * v)))
        v = w / rho
        if residual < RESIDUAL_TOLERANCE * rho:
            return rho, v, k, True
    return rho, v, max_iterations, False


def dense_perron(matrix, max_iterations: int = MAX_ITERATIONS) -> Tuple[float, np.ndarray]:
    """
    Perron root and right eigenvector (max entry 1) of a nonnegative irreducible matrix
    Periodic matrices, or iterations that stall, are handled on M + I whose Perron root is rho + 1.
    """
    m = sparse.csr_matrix(matrix, dtype=np.float64)
    n = m.shape[0]
    if n == 0 or m.shape[1] != n:
        raise ValidationError(f"matrix is not square: {m.shape}", "matrix")
    if m.nnz and m.data.min() < 0:
        raise ValidationError("matrix has negative entries", "matrix")
    if n == 1:
        return float(m[0, 0]), np.ones(1)
    if not _is_irreducible(m):
        raise ValidationError("matrix is not irreducible", "matrix")

    d = period(m)
    if d == 1:
        rho, v, iterations, converged = _power_iteration(m, max_iterations)
        if converged:
            logger.debug(f"dense_perron: rho={rho:.12g} after {iterations} iterations")
            return rho, v
        logger.warning(f"dense_perron: no convergence after {iterations} iterations, shifting by I")
    else:
        logger.debug(f"dense_perron: period {d}, shifting by I")

    shifted = (m + sparse.identity(n, format="csr")).tocsr()
    rho, v, iterations, converged = _power_iteration(shifted, max_iterations)
    if not converged:
        raise ConvergenceError("power iteration on M + I did not converge", iterations=iterations)
    logger.debug(f"dense_perron: rho={rho - 1.0:.12g} after {iterations} shifted iterations")
    return rho - 1.0, v


def _nontrivial_components(m: sparse.csr_matrix) -> List[np.ndarray]:
    n_components, labels = connected_components(m, directed=True, connection="strong")
    diagonal = m.diagonal()
    components = []
    for c in range(n_components):
        members = np.nonzero(labels == c)[0]
        if members.size > 1 or diagonal[members[0]] > 0:
            components.append(members)
    return components


def truncation_perron(truncation: Truncation) -> Tuple[float, Optional[np.ndarray]]:
    """
    rho(m_F) as the largest Perron root over the irreducible components of the truncation
    Returns the root and the Perron vector of the maximizing component extended by zero on F,
    or (0, None) when m_F is nilpotent.
    """
    m = truncation.matrix
    best, best_vector = 0.0, None
    for members in _nontrivial_components(m):
        sub = m[members][:, members]
        rho, v = dense_perron(sub)
        if best_vector is None or rho > best:
            best = rho
            best_vector = np.zeros(len(truncation))
            best_vector[members] = v
    return best, best_vector


def spectral_radius_truncation(
    kernel: Union[BmcSpec, ExpectationKernel],
    root: State,
    sizes: Sequence[int],
    threads: int = 1,
) -> List[EigenvalueEstimate]:
    """
    rho(m_F) over breadth-first truncations F of increasing size
    Each estimate reports the running max of rho(m_F) over the sizes so far, a lower bracket for rho_c
    with no upper bracket. The root of the truncation itself is kept in metadata["rho"].
    """
    kernel = kernel.kernel if isinstance(kernel, BmcSpec) else kernel
    if list(sizes) != sorted(sizes):
        raise ValidationError("truncation sizes must be ascending", "sizes")
    full = kernel.truncate(root, max(sizes))
    truncations = [full.prefix(size) for size in sizes]

    with ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
        roots = list(executor.map(truncation_perron, truncations))

    estimates = []
    running_max = 0.0
    for truncation, (rho, vector) in zip(truncations, roots):
        if vector is None:
            logger.warning(
                f"spectral_radius_truncation: no irreducible component in {len(truncation)} states, skipped"
            )
        running_max = max(running_max, rho)
        estimates.append(
            EigenvalueEstimate(
                running_max,
                running_max,
                math.inf,
                Method.truncation,
                {"size": len(truncation), "rho": rho, "skipped": vector is None},
            )
        )
    return estimates


def _window(n_max: int) -> np.ndarray:
    return np.arange(max(1, int(math.ceil(n_max / 2))), n_max + 1)


def growth_estimate(sequence: np.ndarray, method: Method, times: Optional[np.ndarray] = None) -> EigenvalueEstimate:
    """
    Windowed growth rate of a positive sequence a_n over the top half n in [n_max/2, n_max]
    value and lower are the max and min of a_n^{1/n}; upper also covers exp of the least-squares log slope.
    """
    sequence = np.asarray(sequence, dtype=np.float64)
    n_max = len(sequence) - 1
    window = _window(n_max)
    t = window.astype(np.float64) if times is None else np.asarray(times)[window]
    with np.errstate(divide="ignore"):
        logs = np.log(sequence[window])
    roots = np.exp(logs / t)
    value = float(roots.max())
    lower = float(roots.min())
    upper = value
    slope = None
    if np.all(np.isfinite(logs)) and window.size > 1:
        slope = float(np.polyfit(t, logs, 1)[0])
        upper = max(value, math.exp(slope))
    metadata = {
        "sequence": sequence.tolist(),
        "window": [int(window[0]), int(window[-1])],
        "limsup_window": value,
        "liminf_window": lower,
        "argmax": int(window[int(np.argmax(roots))]),
        "argmin": int(window[int(np.argmin(roots))]),
        "log_slope": slope,
    }
    return EigenvalueEstimate(value, lower, upper, method, metadata)


def rho_double_prime_growth(
    kernel: Union[BmcSpec, ExpectationKernel],
    start: State,
    n_max: int,
    cap: int = 1_000_000,
) -> EigenvalueEstimate:
    """
    Growth of E_start[N_n]: the windowed a_n^{1/n} brackets limsup and liminf
    """
    if n_max < 8:
        raise ValidationError(f"must be >= 8, got {n_max}", "n_max")
    sequence = expected_count_sequence(kernel, start, n_max, cap)
    return growth_estimate(sequence, Method.growth_slope)


def _values_on(truncation: Truncation, u: TestFunction) -> Callable[[State], float]:
    lookup = u.get if isinstance(u, dict) else u

    def value(x: State) -> float:
        v = lookup(x)
        return 0.0 if v is None else float(v)

    return value


def _check_range(truncation: Truncation, u: Callable[[State], float]) -> Dict[State, float]:
    values = {}
    for x in truncation.states:
        v = u(x)
        if not 0.0 <= v <= 1.0:
            raise ValidationError(f"u({x}) = {v} is outside [0, 1]", "u")
        values[x] = v
    return values


def certify_rho_prime(
    kernel: Union[BmcSpec, ExpectationKernel],
    u: TestFunction,
    rho: float,
    truncation: Truncation,
) -> TestFunctionCertificate:
    """
    Exact check of (mu)(x) >= rho u(x) on the truncation; u is taken as 0 wherever it is not given
    """
    kernel = kernel.kernel if isinstance(kernel, BmcSpec) else kernel
    value = _values_on(truncation, u)
    values = _check_range(truncation, value)
    margins = np.array(
        [
            sum(m * value(y) for y, m in kernel.row(x).items()) - rho * values[x]
            for x in truncation.states
        ]
    )
    margin = float(margins.min())
    logger.debug(f"certify_rho_prime: rho={rho:.10g}, margin={margin:.3g} on {len(truncation)} states")
    return TestFunctionCertificate(values, rho, truncation.states, margin, margins)


def perron_certificate(
    kernel: Union[BmcSpec, ExpectationKernel],
    root: State,
    size: int,
) -> TestFunctionCertificate:
    """
    Certify rho(m_F) with the Perron vector of the truncation extended by zero
    """
    kernel = kernel.kernel if isinstance(kernel, BmcSpec) else kernel
    truncation = kernel.truncate(root, size)
    rho, vector = truncation_perron(truncation)
    if vector is None:
        raise ValidationError(f"no irreducible component in the first {size} states", "size")
    u = {x: float(min(1.0, max(0.0, v))) for x, v in zip(truncation.states, vector) if v > 0}
    return certify_rho_prime(kernel, u, rho, truncation)


def _exp_functional(law, parent: State, value: Callable[[State], float], delta: float) -> float:
    """
    E[S exp(-delta S)] with S the sum of u over the children of one parent
    """
    ns = law.counts.astype(np.float64)
    ps = law.probs
    if law.displacement is None:
        u = value(parent)
        return float(np.sum(ps * ns * u * np.exp(-delta * ns * u)))
    targets = law.displacement.targets(parent)
    qs = np.array([q for _, q in targets])
    us = np.array([value(y) for y, _ in targets])
    if law.displacement.description and law.displacement.description.get("kind") == "joint":
        # all children sit at one target
        per_target = ns[:, None] * us[None, :] * np.exp(-delta * ns[:, None] * us[None, :])
        return float(ps @ per_target @ qs)
    phi = float(np.sum(qs * np.exp(-delta * us)))
    psi = float(np.sum(qs * us * np.exp(-delta * us)))
    with np.errstate(divide="ignore", invalid="ignore"):
        powers = np.where(ns > 0, np.power(phi, np.maximum(ns - 1.0, 0.0)), 0.0)
    return float(np.sum(ps * ns * powers) * psi)


def certify_survival_condition(
    spec: BmcSpec,
    u: TestFunction,
    rho: float,
    delta: float,
    truncation: Truncation,
) -> TestFunctionCertificate:
    """
    Pointwise check of E_x[sum u(X_i) exp(-delta sum u(X_i))] >= rho u(x) on the truncation
    With rho >= 1 a valid check gives positive survival probability from every x with u(x) > 0.
    """
    if delta <= 0:
        raise ValidationError(f"must be > 0, got {delta}", "delta")
    value = _values_on(truncation, u)
    values = _check_range(truncation, value)
    margins = np.array(
        [
            _exp_functional(spec.law_at(x), x, value, delta) - rho * values[x]
            for x in truncation.states
        ]
    )
    margin = float(margins.min())
    logger.debug(f"certify_survival_condition: rho={rho}, delta={delta}, margin={margin:.3g}")
    return TestFunctionCertificate(values, rho, truncation.states, margin, margins, "survival")


class ReversibleReport:
    def __init__(
        self,
        c: np.ndarray,
        sizes: np.ndarray,
        violated_at: Optional[int],
        growth_bound: float,
        tol: float,
        rho_c: Optional[EigenvalueEstimate],
        rho_double_prime: Optional[EigenvalueEstimate],
        agreement_tol: float,
    ):
        self.c = c
        self.sizes = sizes
        self.violated_at = violated_at
        self.growth_bound = growth_bound
        self.tol = tol
        self.rho_c = rho_c
        self.rho_double_prime = rho_double_prime
        self.agreement_tol = agreement_tol

    @property
    def hypotheses_hold(self) -> bool:
        return self.violated_at is None and self.growth_bound <= 1.0 + self.tol

    @property
    def agreement(self) -> Optional[bool]:
        if self.rho_c is None or self.rho_double_prime is None:
            return None
        return abs(self.rho_c.value - self.rho_double_prime.value) <= self.agreement_tol

    def to_json(self) -> Dict:
        return {
            "c": [float(v) if math.isfinite(v) else None for v in self.c],
            "sizes": self.sizes.tolist(),
            "violated_at": self.violated_at,
            "growth_bound": self.growth_bound if math.isfinite(self.growth_bound) else None,
            "hypotheses_hold": self.hypotheses_hold,
            "rho_c": self.rho_c.to_json() if self.rho_c else None,
            "rho_double_prime": self.rho_double_prime.to_json() if self.rho_double_prime else None,
            "agreement": self.agreement,
        }


def reversible_criterion_check(
    kernel: Union[BmcSpec, ExpectationKernel],
    x0: State,
    n_max: int = 40,
    tol: float = 0.05,
    agreement_tol: float = 0.02,
    cap: int = 1_000_000,
) -> ReversibleReport:
    """
    Checks m^n(x0, y) <= c_n m^n(y, x0) on A_n = {y: m^n(x0, y) > 0} with c_n and |A_n| subexponential
    c_n is reported as the max of the worst ratio and |A_n|; the hypotheses hold when the windowed
    growth rate of c_n is at most 1 + tol. When they hold rho_c and rho'' are compared.
    """
    kernel = kernel.kernel if isinstance(kernel, BmcSpec) else kernel
    if n_max < 8:
        raise ValidationError(f"must be >= 8, got {n_max}", "n_max")
    # paths of length n from y at depth <= n stay within depth 2n
    truncation = kernel.reachable(x0, 2 * n_max, cap)
    m = truncation.matrix
    transposed = m.T.tocsr()
    i0 = truncation.index[x0]
    forward = np.zeros(len(truncation))
    forward[i0] = 1.0
    backward = forward.copy()

    c = np.ones(n_max + 1)
    sizes = np.ones(n_max + 1, dtype=np.int64)
    violated_at = None
    for n in range(1, n_max + 1):
        forward = transposed @ forward
        backward = m @ backward
        support = forward > 0
        sizes[n] = int(np.count_nonzero(support))
        if sizes[n] == 0:
            c[n:] = 1.0
            sizes[n:] = 0
            break
        if np.any(backward[support] <= 0):
            if violated_at is None:
                violated_at = n
                logger.info(f"reversible_criterion_check: m^{n}(y, x0) = 0 for some y in A_{n}")
            c[n] = math.inf
            continue
        c[n] = max(float(np.max(forward[support] / backward[support])), float(sizes[n]))

    growth_bound = math.inf
    if violated_at is None:
        window = _window(n_max)
        growth_bound = math.exp(float(np.polyfit(window, np.log(c[window]), 1)[0]))

    report = ReversibleReport(c, sizes, violated_at, growth_bound, tol, None, None, agreement_tol)
    if report.hypotheses_hold:
        size = int(np.count_nonzero(truncation.depths <= n_max))
        report.rho_c = spectral_radius_truncation(kernel, x0, [size])[-1]
        report.rho_double_prime = rho_double_prime_growth(kernel, x0, n_max, cap)
        if not report.agreement:
            logger.warning(
                f"reversible_criterion_check: rho_c={report.rho_c.value:.6g} and "
                f"rho''={report.rho_double_prime.value:.6g} differ by more than {agreement_tol}"
            )
    return report
