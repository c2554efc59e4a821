import logging
import math

from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from scipy import sparse
from scipy.sparse.linalg import splu

from .bmc import ExpectationKernel
from .core import RandomSource
from .errors import ConvergenceError, DomainError, InstabilityError, ValidationError
from .fields import Constant, Field
from .motion import Boundary, BranchFieldSpec, MotionKind, MotionSpec
from .spectral import EigenvalueEstimate, Method


MIN_CELLS = 16
DEFAULT_DX = 0.05
CLAMP_TOLERANCE = 1e-8
RANNACHER_STEPS = 4
LIFT = 1e-6
EIGEN_DT = 0.01

logger = logging.getLogger(__name__)


class Grid1D:
    """
    Uniform nodes x_0 < ... < x_n on [left, right]
    Nodes on killing sides carry the Dirichlet value 0 and are not unknowns; reflecting and open sides
    are unknowns with a mirrored ghost node.
    """

    def __init__(
        self,
        left: float,
        right: float,
        n_cells: int,
        left_boundary: Boundary = Boundary.killing,
        right_boundary: Boundary = Boundary.killing,
        radial: bool = False,
    ):
        if n_cells < MIN_CELLS:
            raise ValidationError(f"need at least {MIN_CELLS} cells, got {n_cells}", "n_cells")
        if not (math.isfinite(left) and math.isfinite(right) and left < right):
            raise ValidationError(f"grid needs a bounded interval, got ({left}, {right})", "grid")
        self.left = left
        self.right = right
        self.n_cells = n_cells
        self.dx = (right - left) / n_cells
        self.left_boundary = left_boundary
        self.right_boundary = right_boundary
        self.radial = radial
        self.x = left + self.dx * np.arange(n_cells + 1)
        lo = 0 if left_boundary is not Boundary.killing else 1
        hi = n_cells if right_boundary is not Boundary.killing else n_cells - 1
        self.unknown = np.arange(lo, hi + 1)

    def __str__(self):
        return f"Grid1D([{self.left:.4g}, {self.right:.4g}], n_cells={self.n_cells}, dx={self.dx:.4g})"

    @property
    def interior(self) -> np.ndarray:
        return self.x[self.unknown]

    @classmethod
    def for_motion(cls, motion: MotionSpec, dx: float = DEFAULT_DX, n_cells: Optional[int] = None) -> "Grid1D":
        if not motion.bounded:
            raise ValidationError("unbounded domain; use MotionSpec.box first", "domain")
        width = motion.right - motion.left
        if n_cells is None:
            n_cells = max(MIN_CELLS, int(round(width / dx)))
        if motion.kind is MotionKind.diffusion_radial:
            return cls.radial_grid(motion.right, n_cells, motion.right_boundary)
        return cls(motion.left, motion.right, n_cells, motion.left_boundary, motion.right_boundary)

    @classmethod
    def radial_grid(cls, radius: float, n_cells: int, outer: Boundary = Boundary.killing) -> "Grid1D":
        """
        Radial grid on [dx, radius] with a reflecting inner node at x_min = dx
        """
        h = radius / (n_cells + 1)
        return cls(h, radius, n_cells, Boundary.reflecting, outer, radial=True)

    def refined(self) -> "Grid1D":
        if self.radial:
            return Grid1D.radial_grid(self.right, 2 * self.n_cells, self.right_boundary)
        return Grid1D(self.left, self.right, 2 * self.n_cells, self.left_boundary, self.right_boundary)

    def expand(self, values: np.ndarray) -> np.ndarray:
        full = np.zeros(self.x.size)
        full[self.unknown] = values
        return full

    def operator(self, motion: MotionSpec, potential: Optional[np.ndarray] = None) -> sparse.csr_matrix:
        """
        Central differences for (1/2) a u'' + b u' (+ c u) on the unknown nodes
        """
        x = self.interior
        a = motion.diffusion(x)
        b = motion.effective_drift(x)
        h = self.dx
        lower = a / (2 * h * h) - b / (2 * h)
        upper = a / (2 * h * h) + b / (2 * h)
        diagonal = -a / (h * h)
        if potential is not None:
            diagonal = diagonal + potential
        if np.any(lower < 0) or np.any(upper < 0):
            logger.warning(f"operator: drift dominates diffusion at dx={h:.3g}, scheme is not monotone")

        position = np.full(self.x.size, -1)
        position[self.unknown] = np.arange(self.unknown.size)
        rows, cols, vals = [np.arange(x.size)], [np.arange(x.size)], [diagonal]
        for offset, coef in ((-1, lower), (1, upper)):
            j = self.unknown + offset
            # ghost nodes beyond a reflecting or open side mirror the first interior node
            j = np.where(j < 0, 1, np.where(j > self.n_cells, self.n_cells - 1, j))
            target = position[j]
            keep = target >= 0
            rows.append(np.nonzero(keep)[0])
            cols.append(target[keep])
            vals.append(coef[keep])
        return sparse.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(x.size, x.size),
        )


class FkppProblem:
    """
    y_t = L0 y + f(y, x) with L0 = (1/2) a d^2 + b d, local branching f and initial datum g
    """

    def __init__(self, motion: MotionSpec, branch: BranchFieldSpec, initial: Optional[Field] = None):
        if motion.kind is MotionKind.ctmc:
            raise ValidationError("FKPP problems need a diffusion", "motion.kind")
        self.motion = motion
        self.branch = branch
        self.initial = initial or Constant(1.0)
        if self.initial.inf < 0 or self.initial.sup > 1:
            raise ValidationError("initial datum must take values in [0, 1]", "initial")

    def __str__(self):
        return f"FkppProblem({self.motion}, sup r={self.branch.sup_rate})"

    def with_initial(self, initial: Field) -> "FkppProblem":
        return FkppProblem(self.motion, self.branch, initial)

    def with_motion(self, motion: MotionSpec) -> "FkppProblem":
        return FkppProblem(motion, self.branch, self.initial)

    @classmethod
    def create_from(cls, json: Dict) -> "FkppProblem":
        """
        Create the problem from a TOML payload with [motion], [branch] and an optional initial field
        """
        if "motion" not in json:
            raise ValidationError("missing key", "motion")
        motion = MotionSpec.create_from(json["motion"])
        branch = BranchFieldSpec.create_from(json.get("branch", {}))
        initial = Field.create_from(json["initial"], "initial") if "initial" in json else None
        return cls(motion, branch, initial)


def nonlinearity(branch: BranchFieldSpec, u: float, x: float) -> float:
    if not 0.0 <= u <= 1.0:
        raise DomainError(f"u={u} is outside [0, 1]", "u")
    return float(branch.nonlinearity(np.array(u), np.array(x)))


class GridField(Field):
    """
    Field given by nodal values, linearly interpolated between nodes
    """

    def __init__(self, grid: Grid1D, values: np.ndarray):
        self.grid = grid
        self.values = np.asarray(values, dtype=np.float64)

    def __call__(self, x) -> np.ndarray:
        return np.interp(np.asarray(x, dtype=np.float64), self.grid.x, self.values, left=0.0, right=0.0)

    @property
    def sup(self) -> float:
        return float(self.values.max())

    @property
    def inf(self) -> float:
        return float(self.values.min())

    def to_json(self) -> Dict:
        return {"kind": "grid", "x": self.grid.x.tolist(), "values": self.values.tolist()}

    def rows(self) -> List[Tuple[float, float]]:
        return list(zip(self.grid.x.tolist(), self.values.tolist()))


class FieldTrajectory:
    def __init__(self, grid: Grid1D, times: List[float], values: List[np.ndarray], max_clamp: float):
        self.grid = grid
        self.times = np.asarray(times)
        self.values = np.vstack(values)
        self.max_clamp = max_clamp

    def __len__(self):
        return len(self.times)

    @property
    def final(self) -> GridField:
        return GridField(self.grid, self.values[-1])

    def at(self, t: float) -> GridField:
        k = int(np.argmin(np.abs(self.times - t)))
        return GridField(self.grid, self.values[k])

    def value(self, x: float, t: float) -> float:
        return float(self.at(t)(x))


def default_dt(motion: MotionSpec, grid: Grid1D, sup_rate: float) -> float:
    """
    Largest step keeping the IMEX step monotone: dt a / dx^2 <= 1/2 and dt sup r <= 0.1
    """
    dt = 0.5 * grid.dx**2 / motion.diffusion.sup
    if sup_rate > 0:
        dt = min(dt, 0.1 / sup_rate)
    return dt


class _Stepper:
    """
    theta-scheme factorizations for y' = A y + s(y): Rannacher start with backward Euler half steps, then Crank-Nicolson
    """

    def __init__(self, a: sparse.csr_matrix, dt: float):
        identity = sparse.identity(a.shape[0], format="csc")
        self.a = a
        self.dt = dt
        self.cn_lhs = splu((identity - 0.5 * dt * a).tocsc())
        self.cn_rhs = (identity + 0.5 * dt * a).tocsr()

    def startup(self, y: np.ndarray, source: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        # one backward Euler step of size dt/2 uses the same matrix as the Crank-Nicolson left side
        return self.cn_lhs.solve(y + 0.5 * self.dt * source(y))

    def step(self, y: np.ndarray, source: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        return self.cn_lhs.solve(self.cn_rhs @ y + self.dt * source(y))


def solve_linear(
    motion: MotionSpec,
    potential: np.ndarray,
    grid: Grid1D,
    initial: np.ndarray,
    t_end: float,
    dt: float,
    record_every: Optional[float] = None,
) -> FieldTrajectory:
    """
    w_t = L0 w + c w by Crank-Nicolson with a Rannacher start
    """
    stepper = _Stepper(grid.operator(motion, potential), dt)
    return _march(stepper, grid, initial, t_end, dt, lambda y: 0.0, record_every, clamp=False)


def _march(
    stepper: _Stepper,
    grid: Grid1D,
    y: np.ndarray,
    t_end: float,
    dt: float,
    source: Callable[[np.ndarray], np.ndarray],
    record_every: Optional[float],
    clamp: bool,
) -> FieldTrajectory:
    n_steps = int(round(t_end / dt))
    if n_steps < 1:
        raise ValidationError(f"t_end={t_end} is shorter than one step dt={dt}", "t_end")
    record = max(1, int(round((record_every or t_end) / dt)))
    times, values = [0.0], [grid.expand(y)]
    max_clamp = 0.0
    startup = min(RANNACHER_STEPS, 2 * n_steps)
    for _ in range(startup):
        y = stepper.startup(y, source)
        if clamp:
            y, max_clamp = _clamp(y, max_clamp)
    t = 0.5 * dt * startup
    k = startup // 2
    while k < n_steps:
        y = stepper.step(y, source)
        k += 1
        t = k * dt
        if clamp:
            y, max_clamp = _clamp(y, max_clamp)
        if k % record == 0 or k == n_steps:
            times.append(t)
            values.append(grid.expand(y))
    if times[-1] != t:
        times.append(t)
        values.append(grid.expand(y))
    return FieldTrajectory(grid, times, values, max_clamp)


def _clamp(y: np.ndarray, max_clamp: float) -> Tuple[np.ndarray, float]:
    magnitude = float(max(np.max(-y, initial=0.0), np.max(y - 1.0, initial=0.0)))
    if magnitude > CLAMP_TOLERANCE:
        raise InstabilityError(f"solution left [0, 1] by {magnitude:.3g}", residual=magnitude)
    return np.clip(y, 0.0, 1.0), max(max_clamp, magnitude)


def solve_parabolic(
    problem: FkppProblem,
    t_end: float,
    dt: Optional[float] = None,
    grid: Optional[Grid1D] = None,
    record_every: Optional[float] = None,
) -> FieldTrajectory:
    """
    IMEX solve of y_t = L0 y + f(y, x): Crank-Nicolson on L0, explicit in f, clamped to [0, 1]
    """
    grid = grid or Grid1D.for_motion(problem.motion)
    sup_rate = problem.branch.sup_rate
    dt = dt or default_dt(problem.motion, grid, sup_rate)
    if dt * sup_rate > 0.1 + 1e-12:
        raise ValidationError(f"dt * sup r = {dt * sup_rate:.3g} exceeds 0.1", "dt")
    if dt * problem.motion.diffusion.sup / grid.dx**2 > 1.0 + 1e-12:
        logger.warning(f"solve_parabolic: dt={dt:.3g} exceeds the monotone step for dx={grid.dx:.3g}")

    x = grid.interior
    stepper = _Stepper(grid.operator(problem.motion), dt)
    source = lambda y: problem.branch.nonlinearity(y, x)
    y0 = problem.initial(x)
    trajectory = _march(stepper, grid, y0, t_end, dt, source, record_every, clamp=True)
    logger.debug(f"solve_parabolic: {grid}, dt={dt:.3g}, max clamp {trajectory.max_clamp:.3g}")
    return trajectory


def principal_eigenpair(
    motion: MotionSpec,
    potential: Field,
    grid: Grid1D,
    tol: float = 1e-12,
    max_iterations: int = 10_000,
    dt: float = EIGEN_DT,
) -> Tuple[float, np.ndarray]:
    """
    Dominant eigenvalue of the discretized L0 + c by power iteration on the Crank-Nicolson time-1 propagator
    lambda is the log of the dominant multiplier; the vector is normalized to max-entry 1.
    """
    a = grid.operator(motion, potential(grid.interior))
    steps = max(1, int(math.ceil(1.0 / dt)))
    stepper = _Stepper(a, 1.0 / steps)
    v = np.ones(a.shape[0])
    multiplier = 0.0
    for k in range(1, max_iterations + 1):
        w = v
        for _ in range(steps):
            w = stepper.step(w, lambda y: 0.0)
        multiplier_next = float(np.max(np.abs(w)))
        if multiplier_next == 0.0 or not np.isfinite(multiplier_next):
            raise ConvergenceError(f"propagator multiplier {multiplier_next} after {k} iterations", iterations=k)
        w /= multiplier_next
        done = abs(multiplier_next - multiplier) < tol * multiplier_next and np.max(np.abs(w - v)) < 1e-9
        v, multiplier = w, multiplier_next
        if done:
            break
    else:
        raise ConvergenceError("propagator power iteration did not converge", iterations=max_iterations)
    logger.debug(f"principal_eigenpair: {grid}, multiplier {multiplier:.12g} after {k} iterations")
    return math.log(multiplier), np.abs(v)


def principal_eigenvalue_1d(
    motion: MotionSpec,
    potential: Field,
    grid: Optional[Grid1D] = None,
) -> EigenvalueEstimate:
    """
    Dominant eigenvalue of L0 + c on a bounded interval, Richardson-extrapolated over two grids
    """
    grid = grid or Grid1D.for_motion(motion)
    coarse, _ = principal_eigenpair(motion, potential, grid)
    fine, _ = principal_eigenpair(motion, potential, grid.refined())
    value = (4.0 * fine - coarse) / 3.0
    correction = abs(value - fine)
    if correction > 1e-3:
        logger.warning(f"principal_eigenvalue_1d: Richardson correction {correction:.3g}, refine the grid")
    lower, upper = min(value, fine, coarse), max(value, fine, coarse)
    return EigenvalueEstimate(
        value, lower, upper, Method.pde, {"coarse": coarse, "fine": fine, "dx": grid.dx}
    )


def stationary_monotone(
    problem: FkppProblem,
    shift: Optional[float] = None,
    tol: float = 1e-10,
    grid: Optional[Grid1D] = None,
    max_sweeps: int = 10_000,
) -> GridField:
    """
    Monotone iteration (C - L0) w_{k+1} = f(w_k) + C w_k from w_0 = 0 lifted by a Perron mode when lambda > 0
    """
    grid = grid or Grid1D.for_motion(problem.motion)
    branch = problem.branch
    x = grid.interior
    lipschitz = branch.lipschitz
    c = shift if shift is not None else lipschitz + 0.1
    if c <= lipschitz:
        raise ValidationError(f"shift {c} must exceed the Lipschitz bound {lipschitz}", "shift")

    a = grid.operator(problem.motion)
    identity = sparse.identity(a.shape[0], format="csc")
    solver = splu((c * identity - a).tocsc())

    lam, phi = principal_eigenpair(problem.motion, BranchPotential(branch), grid)
    w = LIFT * phi / phi.max() if lam > 0 else np.zeros(x.size)
    logger.debug(f"stationary_monotone: lambda={lam:.6g}, shift={c:.3g}")
    for k in range(1, max_sweeps + 1):
        w_next = solver.solve(branch.nonlinearity(w, x) + c * w)
        if np.any(w_next < w - 1e-10):
            raise ConvergenceError(
                f"iterates decreased by {float(np.max(w - w_next)):.3g}", iterations=k
            )
        step = float(np.max(np.abs(w_next - w), initial=0.0))
        w = w_next
        if step < tol:
            logger.debug(f"stationary_monotone: converged after {k} sweeps")
            return GridField(grid, grid.expand(w))
    raise ConvergenceError("monotone iteration did not converge", iterations=max_sweeps, residual=step)


class BranchPotential(Field):
    def __init__(self, branch: BranchFieldSpec):
        self.branch = branch

    def __call__(self, x) -> np.ndarray:
        return self.branch.potential(np.asarray(x, dtype=np.float64))

    @property
    def sup(self) -> float:
        return float(sum(c.rate.sup * max(c.law.mean - 1.0, 0.0) for c in self.branch.channels))

    @property
    def inf(self) -> float:
        return -float(sum(c.rate.sup * max(1.0 - c.law.mean, 0.0) for c in self.branch.channels))

    def to_json(self) -> Dict:
        return {"kind": "branch_potential", **self.branch.to_json()}


def stationary_residual(problem: FkppProblem, field: GridField) -> float:
    """
    sup norm of L0 u + f(u) on the unknown nodes
    """
    grid = field.grid
    u = field.values[grid.unknown]
    residual = grid.operator(problem.motion) @ u + problem.branch.nonlinearity(u, grid.interior)
    return float(np.max(np.abs(residual)))


def maximal_stationary_via_longtime(
    problem: FkppProblem,
    t_end: float,
    tol: float = 1e-6,
    dt: Optional[float] = None,
    grid: Optional[Grid1D] = None,
) -> GridField:
    """
    Long-time limit of the FKPP flow from y = 1, the survival probability x -> P_x(glSurv)
    """
    trajectory = solve_parabolic(problem.with_initial(Constant(1.0)), t_end, dt, grid, t_end / 2)
    half = trajectory.at(t_end / 2).values
    final = trajectory.final
    change = float(np.max(np.abs(final.values - half)))
    if change >= tol:
        logger.warning(f"maximal_stationary_via_longtime: not settled, change {change:.3g} over [t/2, t]")
    return final


def expected_mass_trajectory(
    motion: MotionSpec,
    branch: BranchFieldSpec,
    t: float,
    dx: float = DEFAULT_DX,
    dt: Optional[float] = None,
    record_every: Optional[float] = None,
) -> FieldTrajectory:
    """
    w_t = L0 w + r (m - 1) w with w(., 0) = 1, whose value at x is E_x[N_t]
    """
    grid = Grid1D.for_motion(motion, dx)
    dt = dt or min(0.01, 0.1 / max(branch.sup_rate, 1e-12))
    x = grid.interior
    return solve_linear(motion, branch.potential(x), grid, np.ones(x.size), t, dt, record_every)


def large_box(
    observable: Callable[[MotionSpec], float],
    motion: MotionSpec,
    center: float,
    width: float,
    tol: float = 1e-4,
    max_doublings: int = 6,
) -> Tuple[float, float]:
    """
    Evaluate an observable on boxes of doubling width until it changes by less than tol (relative)
    """
    if motion.bounded:
        return observable(motion), motion.right - motion.left
    value = observable(motion.box(center, width))
    for _ in range(max_doublings):
        width *= 2
        next_value = observable(motion.box(center, width))
        if abs(next_value - value) <= tol * max(1.0, abs(next_value)):
            logger.info(f"large_box: width {width:.4g} settled at {next_value:.8g}")
            return next_value, width
        value = next_value
    logger.warning(f"large_box: not settled after width {width:.4g}")
    return value, width


def critical_length(
    branch: BranchFieldSpec,
    lengths: Sequence[float],
    a: float = 1.0,
    dx: float = DEFAULT_DX,
) -> Dict:
    """
    Principal eigenvalue of L0 + r (m - 1) on (0, L) over a sweep of lengths, with the sign change located
    """
    values = []
    for length in lengths:
        motion = MotionSpec.brownian(0.0, length, a=a)
        estimate = principal_eigenvalue_1d(motion, BranchPotential(branch), Grid1D.for_motion(motion, dx))
        values.append(estimate.value)
    critical = None
    for (l0, v0), (l1, v1) in zip(zip(lengths, values), zip(lengths[1:], values[1:])):
        if v0 <= 0 < v1:
            critical = l0 + (l1 - l0) * (-v0) / (v1 - v0)
            break
    return {"lengths": list(lengths), "eigenvalues": values, "critical_length": critical}


def lattice_kernel_1d(motion: MotionSpec, potential: Field, h: float, dx: float = DEFAULT_DX) -> ExpectationKernel:
    """
    One-step kernel I + h A of the discretized L0 + c, on the unknown node indices
    """
    grid = Grid1D.for_motion(motion, dx)
    a = grid.operator(motion, potential(grid.interior))
    kernel = (sparse.identity(a.shape[0], format="csr") + h * a).tocsr()
    if kernel.nnz and kernel.data.min() < 0:
        raise ValidationError(f"h={h} makes I + h A negative; need h <= dx^2 / a", "h")
    return ExpectationKernel.from_matrix(kernel, f"lattice:{grid}")


class DualityReport:
    def __init__(self, x: np.ndarray, pde: np.ndarray, mc: np.ndarray, stderr: np.ndarray):
        self.x = x
        self.pde = pde
        self.mc = mc
        self.stderr = stderr

    @property
    def discrepancy(self) -> np.ndarray:
        return np.abs(self.pde - self.mc) / np.maximum(self.stderr, 1e-12)

    @property
    def max_discrepancy(self) -> float:
        return float(np.max(self.discrepancy))

    def to_json(self) -> Dict:
        return {
            "x": self.x.tolist(),
            "pde": self.pde.tolist(),
            "mc": self.mc.tolist(),
            "stderr": self.stderr.tolist(),
            "max_discrepancy": self.max_discrepancy,
        }


def mckean_duality_check(
    problem: FkppProblem,
    g: Field,
    t: float,
    mc_replicas: int,
    rng: RandomSource,
    points: int = 9,
    mc_dt: float = 0.005,
    threads: int = 1,
) -> DualityReport:
    """
    Compare the FKPP solution from g with Monte Carlo of 1 - prod(1 - g(X_t^i)) at a grid of start points
    """
    from .bmp import BmpConfig, product_functional_mc

    motion = problem.motion
    if not motion.bounded:
        raise ValidationError("duality check needs a bounded interval", "domain")
    pde = solve_parabolic(problem.with_initial(g), t).final
    xs = np.linspace(motion.left, motion.right, points + 2)[1:-1]
    cfg = BmpConfig(dt=mc_dt, horizon=t, cap=100_000, replicas=mc_replicas, seed=rng.seed)
    mc, stderr = [], []
    for i, x in enumerate(xs):
        estimate = product_functional_mc(
            motion, problem.branch, float(x), g, cfg, rng.spawn(rng.stream + 1000 * i), threads
        )
        mc.append(estimate.estimate)
        stderr.append(estimate.stderr)
    report = DualityReport(xs, pde(xs), np.array(mc), np.array(stderr))
    logger.info(f"mckean_duality_check: max standardized discrepancy {report.max_discrepancy:.3g}")
    return report
