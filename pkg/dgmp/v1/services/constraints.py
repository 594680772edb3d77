"""Max-type penalties, constraint qualifications and constrained necessary conditions.

Constraint values are compared with a right-hand-side vector ``e`` laid out stage by
stage: for each stage ``0..n-1`` its inequalities then its equalities, followed by the
endpoint inequalities and equalities. Block ``n`` is the endpoint.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Mapping, Sequence

import numpy as np
from numpy.typing import ArrayLike
from scipy.optimize import linprog, nnls

from dgmp.core.base.manifolds import FloatArray, Manifold, Point
from dgmp.utils.exceptions import ConstraintViolationError, DGMPError, NoCertificate
from dgmp.utils.settings import settings
from dgmp.v1.services.adjoint import AdjointService, CostSpec
from dgmp.v1.services.manifold import Euclidean
from dgmp.v1.services.oracle import OracleService
from dgmp.v1.services.system import (
    ControlSystem,
    Linearization,
    SystemService,
    Trajectory,
)

if TYPE_CHECKING:
    from dgmp.v1.schemas.solver import SolveOptions

logger = logging.getLogger("dgmp")

SWEEP_FAILED = "Failed"

ConstraintFunction = Callable[[Point, Point | None], float]
ConstraintGradient = Callable[[Point, Point | None], ArrayLike]


@dataclass(frozen=True, eq=False)
class Constraint:
    """``fn(q, u) <= e`` (``kind="ineq"``) or ``fn(q, u) = e`` (``kind="eq"``).

    Endpoint constraints are called with ``u=None``.
    """

    kind: str
    fn: ConstraintFunction
    grad_q: ConstraintGradient | None = None
    grad_u: ConstraintGradient | None = None
    name: str = ""

    def __post_init__(self) -> None:
        if self.kind not in ("ineq", "eq"):
            raise ValueError(f"constraint kind must be 'ineq' or 'eq', not {self.kind!r}")

    def gradients(
        self,
        Q: Manifold,
        U: Manifold | None,
        q: Point,
        u: Point | None,
    ) -> tuple[FloatArray, FloatArray]:
        if self.grad_q is not None:
            a = np.asarray(self.grad_q(q, u), dtype=float)
        else:
            a = OracleService.fd_gradient(lambda x: self.fn(x, u), Q, q).covec
        if U is None or u is None:
            return a, np.zeros(0)
        if self.grad_u is not None:
            b = np.asarray(self.grad_u(q, u), dtype=float)
        else:
            b = OracleService.fd_gradient(lambda v: self.fn(q, v), U, u).covec
        return a, b


@dataclass(frozen=True)
class ConstraintEntry:
    index: int
    block: int
    constraint: Constraint

    @property
    def is_inequality(self) -> bool:
        return self.constraint.kind == "ineq"


@dataclass(frozen=True, eq=False)
class ConstraintSet:
    horizon: int
    stage: Mapping[int, Sequence[Constraint]] = field(default_factory=dict)
    endpoint: Sequence[Constraint] = ()
    pure_state: bool = False
    entries: tuple[ConstraintEntry, ...] = field(init=False)

    def __post_init__(self) -> None:
        for block in self.stage:
            if not 0 <= block < self.horizon:
                raise ValueError(f"stage constraint index {block} outside 0..{self.horizon - 1}")
        entries: list[ConstraintEntry] = []
        grouped = [(b, list(self.stage[b])) for b in sorted(self.stage)]
        grouped.append((self.horizon, list(self.endpoint)))
        for block, constraints in grouped:
            ordered = [c for c in constraints if c.kind == "ineq"]
            ordered += [c for c in constraints if c.kind == "eq"]
            for constraint in ordered:
                entries.append(ConstraintEntry(len(entries), block, constraint))
        object.__setattr__(self, "entries", tuple(entries))

    @property
    def size(self) -> int:
        return len(self.entries)

    @property
    def is_empty(self) -> bool:
        return not self.entries

    def blocks(self) -> list[int]:
        return sorted({entry.block for entry in self.entries})

    def block_entries(self, block: int) -> list[ConstraintEntry]:
        return [entry for entry in self.entries if entry.block == block]

    def check_rhs(self, e: ArrayLike | None) -> FloatArray:
        if e is None:
            return np.zeros(self.size)
        rhs = np.asarray(e, dtype=float).reshape(-1)
        if rhs.size != self.size:
            raise ValueError(
                f"perturbation has {rhs.size} entries, constraint set has {self.size}",
            )
        return rhs


@dataclass(frozen=True)
class PenaltyValue:
    per_block: tuple[float, ...]
    total: float


@dataclass(frozen=True)
class Generator:
    """A subgradient generator ``(a, b)``; ``source`` is the entry index or ``None`` for 0."""

    a: FloatArray
    b: FloatArray
    source: int | None
    sign: float = 1.0


@dataclass(frozen=True)
class LicqResult:
    regular: bool
    active: tuple[int, ...]
    witness: FloatArray | None = None


@dataclass(frozen=True)
class AbnormalCertificate:
    multipliers: FloatArray
    a: tuple[FloatArray, ...]
    b: tuple[FloatArray, ...]
    p: tuple[FloatArray, ...]
    stationarity: tuple[float, ...]
    endpoint_residual: float

    @property
    def max_residual(self) -> float:
        return max((self.endpoint_residual, *self.stationarity), default=0.0)


@dataclass(frozen=True)
class NormalityResult:
    strictly_normal: bool
    certificate: AbnormalCertificate | None = None
    rhs: FloatArray | None = None


@dataclass(frozen=True)
class SlopeResult:
    passed: bool
    worst_ratio: float
    worst_block: int | None


@dataclass(frozen=True)
class MultiplierSequence:
    """``λ_0`` and one multiplier per constraint entry, in ``e`` layout."""

    lambda0: float
    values: FloatArray
    rhs: FloatArray | None = None

    def __post_init__(self) -> None:
        if self.lambda0 not in (0.0, 1.0):
            raise ValueError("lambda0 must be 0 or 1")
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))

    @classmethod
    def zeros(cls, cons: ConstraintSet) -> MultiplierSequence:
        return cls(lambda0=1.0, values=np.zeros(cons.size))

    def for_block(self, cons: ConstraintSet, block: int) -> tuple[FloatArray, FloatArray]:
        """Inequality and equality multipliers of one block."""
        entries = cons.block_entries(block)
        lam = np.array([self.values[x.index] for x in entries if x.is_inequality])
        mu = np.array([self.values[x.index] for x in entries if not x.is_inequality])
        return lam, mu


@dataclass(frozen=True)
class ConstrainedReport:
    costates: tuple[FloatArray, ...]
    multipliers: MultiplierSequence
    stationarity: tuple[float, ...]
    complementary: tuple[float, ...]
    adjoint_residual: tuple[float, ...]
    lambda0: float
    degenerate: bool
    penalty: float

    @property
    def certified_delta(self) -> float:
        return max(self.stationarity, default=0.0)

    @property
    def max_residual(self) -> float:
        return max(
            (self.certified_delta, *self.complementary, *self.adjoint_residual),
            default=0.0,
        )


@dataclass(frozen=True)
class DecreaseReport:
    passed: bool
    checked: int
    worst_rate: float
    counterexample: tuple[FloatArray, tuple[Point, ...]] | None = None
    distance_violations: int = 0


@dataclass(frozen=True)
class SensitivityRow:
    rhs: FloatArray
    value: float
    status: str


@dataclass(frozen=True)
class SensitivityTable:
    rows: tuple[SensitivityRow, ...]
    base_value: float
    calmness: float | None
    calm: bool


def _point_pair(traj: Trajectory, block: int) -> tuple[Point, Point | None]:
    u = traj.controls[block] if block < traj.horizon else None
    return traj.states[block], u


def _manifolds(traj: Trajectory, block: int) -> tuple[Manifold, Manifold | None]:
    Q = traj.states[block].manifold
    if block >= traj.horizon:
        return Q, None
    return Q, traj.controls[block].manifold


class ConstraintService:
    """Service class for penalty functions and constrained optimality conditions."""

    @staticmethod
    def term_values(cons: ConstraintSet, e: ArrayLike | None, traj: Trajectory) -> FloatArray:
        """Signed values ``g − e`` and ``h − e`` in entry order."""
        rhs = cons.check_rhs(e)
        if traj.horizon != cons.horizon:
            raise ValueError("trajectory horizon differs from the constraint set's")
        values = np.zeros(cons.size)
        for entry in cons.entries:
            q, u = _point_pair(traj, entry.block)
            values[entry.index] = float(entry.constraint.fn(q, u)) - rhs[entry.index]
        return values

    @staticmethod
    def entry_gradients(
        cons: ConstraintSet,
        traj: Trajectory,
    ) -> list[tuple[FloatArray, FloatArray]]:
        grads = []
        for entry in cons.entries:
            q, u = _point_pair(traj, entry.block)
            Q, U = _manifolds(traj, entry.block)
            grads.append(entry.constraint.gradients(Q, U, q, u))
        return grads

    @staticmethod
    def penalty_eval(
        cons: ConstraintSet,
        e: ArrayLike | None,
        traj: Trajectory,
    ) -> PenaltyValue:
        """
        Max-type penalty ``φ_i = max{0, g_j − e_j, |h_k − e_k|}`` per block and their sum.

        Raises:
            ValueError: If ``e`` has the wrong length.
        """
        values = ConstraintService.term_values(cons, e, traj)
        per_block = [0.0] * (cons.horizon + 1)
        for entry in cons.entries:
            v = values[entry.index]
            term = v if entry.is_inequality else abs(v)
            per_block[entry.block] = max(per_block[entry.block], term)
        return PenaltyValue(per_block=tuple(per_block), total=math.fsum(per_block))

    @staticmethod
    def feasible_shift(
        cons: ConstraintSet,
        e: ArrayLike | None,
        traj: Trajectory,
    ) -> FloatArray:
        """The smallest change of ``e`` that makes ``traj`` feasible."""
        rhs = cons.check_rhs(e)
        values = ConstraintService.term_values(cons, rhs, traj)
        shifted = rhs.copy()
        for entry in cons.entries:
            v = values[entry.index]
            if entry.is_inequality:
                shifted[entry.index] += max(v, 0.0)
            else:
                shifted[entry.index] += v
        return shifted

    @staticmethod
    def penalty_subgradient(
        cons: ConstraintSet,
        e: ArrayLike | None,
        traj: Trajectory,
        block: int,
    ) -> tuple[Generator, ...]:
        """
        Generators of the subdifferential of ``φ_block``.

        Active terms are those within ``settings.TIE_TOLERANCE`` of the maximum; an
        equality at its right-hand side contributes both signs, and the 0 term
        contributes the zero generator.
        """
        tie = settings.TIE_TOLERANCE
        values = ConstraintService.term_values(cons, e, traj)
        entries = cons.block_entries(block)
        q, u = _point_pair(traj, block)
        Q, U = _manifolds(traj, block)
        dim_u = 0 if U is None else U.dim

        terms = [values[x.index] if x.is_inequality else abs(values[x.index]) for x in entries]
        phi = max([0.0, *terms])
        generators: list[Generator] = []
        if phi <= tie:
            generators.append(Generator(np.zeros(Q.dim), np.zeros(dim_u), None))
        for entry, term in zip(entries, terms):
            if term < phi - tie:
                continue
            a, b = entry.constraint.gradients(Q, U, q, u)
            if entry.is_inequality:
                generators.append(Generator(a, b, entry.index))
                continue
            signed = values[entry.index]
            signs = (1.0, -1.0) if abs(signed) <= tie else (float(np.sign(signed)),)
            for s in signs:
                generators.append(Generator(s * a, s * b, entry.index, s))
        return tuple(generators)

    @staticmethod
    def active_entries(
        cons: ConstraintSet,
        values: FloatArray,
        tol: float | None = None,
    ) -> list[ConstraintEntry]:
        tol = settings.ACTIVE_TOLERANCE if tol is None else tol
        return [
            x for x in cons.entries if not x.is_inequality or values[x.index] >= -tol
        ]

    @staticmethod
    def licq_check(
        cons: ConstraintSet,
        traj: Trajectory,
        block: int,
        e: ArrayLike | None = None,
    ) -> LicqResult:
        """
        Decide whether ``Σλ∇g + Σμ∇h = 0`` with ``λ >= 0`` forces zero multipliers.

        Columns are normalized first, so scaling a constraint never changes the verdict.
        A full-rank column set is regular outright; otherwise degenerate equalities
        are detected from the SVD and the cone part by a linear feasibility problem.

        Returns:
            LicqResult: The verdict, the active entries and, when degenerate, a
            witness with unit 1-norm aligned with ``active``.
        """
        values = ConstraintService.term_values(cons, e, traj)
        active = [x for x in ConstraintService.active_entries(cons, values) if x.block == block]
        if not active:
            return LicqResult(regular=True, active=())
        q, u = _point_pair(traj, block)
        Q, U = _manifolds(traj, block)
        columns, norms = [], []
        for entry in active:
            a, b = entry.constraint.gradients(Q, U, q, u)
            col = np.concatenate([a, b])
            columns.append(col)
            norms.append(float(np.linalg.norm(col)))
        indices = tuple(x.index for x in active)

        for k, norm in enumerate(norms):
            if norm == 0.0:
                witness = np.zeros(len(active))
                witness[k] = 1.0
                return LicqResult(regular=False, active=indices, witness=witness)

        unit = np.column_stack([c / s for c, s in zip(columns, norms)])
        sigma = np.linalg.svd(unit, compute_uv=False)
        if unit.shape[1] <= unit.shape[0] and sigma.min() >= settings.RANK_TOLERANCE:
            return LicqResult(regular=True, active=indices)

        is_ineq = np.array([x.is_inequality for x in active])
        eq_cols = unit[:, ~is_ineq]
        if eq_cols.shape[1]:
            _, s_eq, vt = np.linalg.svd(eq_cols)
            if eq_cols.shape[1] > eq_cols.shape[0] or s_eq.min() < settings.RANK_TOLERANCE:
                witness = np.zeros(len(active))
                witness[~is_ineq] = vt[-1] / np.asarray(norms)[~is_ineq]
                return LicqResult(
                    regular=False,
                    active=indices,
                    witness=witness / np.abs(witness).sum(),
                )

        m = len(active)
        bounds = [(0, None) if ineq else (None, None) for ineq in is_ineq]
        A_eq = np.vstack([unit, is_ineq.astype(float)])
        b_eq = np.concatenate([np.zeros(unit.shape[0]), [1.0]])
        result = linprog(np.zeros(m), A_eq=A_eq, b_eq=b_eq, bounds=bounds, method="highs")
        if result.status != 0:
            return LicqResult(regular=True, active=indices)
        witness = np.asarray(result.x) / np.asarray(norms)
        return LicqResult(
            regular=False,
            active=indices,
            witness=witness / np.abs(witness).sum(),
        )

    @staticmethod
    def unit_responses(
        sys: ControlSystem,
        traj: Trajectory,
        cons: ConstraintSet,
        entries: Sequence[ConstraintEntry],
        lin: Linearization,
        grads: Sequence[tuple[FloatArray, FloatArray]] | None = None,
    ) -> tuple[FloatArray, list[tuple[list[FloatArray], list[FloatArray]]]]:
        """
        Control-space gradients of single constraint entries.

        Returns:
            tuple: A matrix whose column ``k`` stacks the reduced gradients of entry
            ``k`` over all controls, and the ``(a, b)`` sequences behind each column.
        """
        grads = grads or ConstraintService.entry_gradients(cons, traj)
        n = sys.horizon
        Q = sys.state_manifold
        columns, sequences = [], []
        for entry in entries:
            a_seq = [np.zeros(Q.dim) for _ in range(n + 1)]
            b_seq = [np.zeros(s.control_manifold.dim) for s in sys.stages]
            a, b = grads[entry.index]
            a_seq[entry.block] = a
            if entry.block < n:
                b_seq[entry.block] = b
            p = AdjointService.sweep(lin, a_seq)
            r = AdjointService.stationarity(lin, b_seq, p)
            columns.append(np.concatenate(r) if r else np.zeros(0))
            sequences.append((a_seq, b_seq))
        total = sum(s.control_manifold.dim for s in sys.stages)
        matrix = np.column_stack(columns) if columns else np.zeros((total, 0))
        return matrix, sequences

    @staticmethod
    def _stage_cone_matrix(sys: ControlSystem, traj: Trajectory) -> FloatArray:
        """Block matrix whose columns are the stacked cone rows of every stage."""
        dims = [s.control_manifold.dim for s in sys.stages]
        offsets = np.concatenate([[0], np.cumsum(dims)]).astype(int)
        columns = []
        for i, (cset, u) in enumerate(zip(sys.control_sets, traj.controls)):
            for row in cset.cone_rows(u):
                col = np.zeros(offsets[-1])
                col[offsets[i] : offsets[i + 1]] = row
                columns.append(col)
        return np.column_stack(columns) if columns else np.zeros((offsets[-1], 0))

    @staticmethod
    def strict_normality_check(
        sys: ControlSystem,
        traj: Trajectory,
        cons: ConstraintSet,
        e: ArrayLike | None = None,
        seed: int = 0,
    ) -> NormalityResult:
        """
        Look for a nonzero homogeneous multiplier/costate certificate.

        Multipliers of the active constraints generate ``(a_i, b_i)``; costates follow
        ``p_n = −a_n`` and ``p_{i-1} = −a_{i-1} + A_{i-1}ᵀp_i``; stationarity asks
        ``b_i − B_iᵀp_{i+1} + C_iᵀν_i = 0`` with ``ν >= 0`` for the active cone rows.
        A random linear functional of ``(a, b)`` is maximized and minimized over the
        bounded multiplier box; a nonzero optimum is an abnormal certificate.

        Raises:
            ConstraintViolationError: If ``traj`` is infeasible for ``e``.
        """
        rhs = cons.check_rhs(e)
        penalty = ConstraintService.penalty_eval(cons, rhs, traj).total
        if penalty > settings.PENALTY_TOLERANCE:
            raise ConstraintViolationError(
                f"strict normality needs a feasible trajectory (P = {penalty:.3e})",
            )
        values = ConstraintService.term_values(cons, rhs, traj)
        active = ConstraintService.active_entries(cons, values)
        if not active:
            return NormalityResult(strictly_normal=True, rhs=rhs)

        lin = SystemService.linearize(sys, traj)
        grads = ConstraintService.entry_gradients(cons, traj)
        R, sequences = ConstraintService.unit_responses(sys, traj, cons, active, lin, grads)
        W = np.column_stack(
            [np.concatenate([*a_seq, *b_seq]) for a_seq, b_seq in sequences],
        )
        C = ConstraintService._stage_cone_matrix(sys, traj)
        m, k = len(active), C.shape[1]

        rng = np.random.default_rng(seed)
        direction = rng.standard_normal(W.shape[0])
        direction /= np.linalg.norm(direction)
        bounds = [(0.0, 1.0) if x.is_inequality else (-1.0, 1.0) for x in active]
        bounds += [(0.0, None)] * k
        A_eq = np.hstack([R, C])
        b_eq = np.zeros(R.shape[0])
        scale = max(1.0, float(np.abs(W).max()))

        best = None
        for sign in (1.0, -1.0):
            objective = np.concatenate([-sign * (W.T @ direction), np.zeros(k)])
            result = linprog(objective, A_eq=A_eq, b_eq=b_eq, bounds=bounds, method="highs")
            if result.status == 0 and -result.fun > 1e-9 * scale:
                best = np.asarray(result.x[:m])
                break
        if best is None:
            return NormalityResult(strictly_normal=True, rhs=rhs)

        multipliers = np.zeros(cons.size)
        for entry, value in zip(active, best / np.abs(best).sum()):
            multipliers[entry.index] = value
        certificate = ConstraintService._certificate(sys, traj, cons, multipliers, lin, grads)
        logger.info("abnormal certificate found, residual %.3e", certificate.max_residual)
        return NormalityResult(strictly_normal=False, certificate=certificate, rhs=rhs)

    @staticmethod
    def _assemble(
        sys: ControlSystem,
        traj: Trajectory,
        cost: CostSpec | None,
        cons: ConstraintSet,
        lambda0: float,
        values: FloatArray,
        grads: Sequence[tuple[FloatArray, FloatArray]],
    ) -> tuple[list[FloatArray], list[FloatArray]]:
        Q = sys.state_manifold
        if lambda0 != 0.0 and cost is not None:
            stage_grads = AdjointService.stage_gradients(sys, traj, cost)
            a = list(stage_grads.a)
            b = list(stage_grads.b)
            if lambda0 != 1.0:
                a = [lambda0 * x for x in a]
                b = [lambda0 * x for x in b]
        else:
            a = [np.zeros(Q.dim) for _ in range(sys.horizon + 1)]
            b = [np.zeros(s.control_manifold.dim) for s in sys.stages]
        for entry in cons.entries:
            weight = values[entry.index]
            if weight == 0.0:
                continue
            ga, gb = grads[entry.index]
            a[entry.block] = a[entry.block] + weight * ga
            if entry.block < sys.horizon:
                b[entry.block] = b[entry.block] + weight * gb
        return a, b

    @staticmethod
    def _certificate(
        sys: ControlSystem,
        traj: Trajectory,
        cons: ConstraintSet,
        multipliers: FloatArray,
        lin: Linearization,
        grads: Sequence[tuple[FloatArray, FloatArray]],
    ) -> AbnormalCertificate:
        a, b = ConstraintService._assemble(sys, traj, None, cons, 0.0, multipliers, grads)
        p = AdjointService.sweep(lin, a)
        r = AdjointService.stationarity(lin, b, p)
        report = AdjointService.certify(sys, traj, r)
        return AbnormalCertificate(
            multipliers=multipliers,
            a=tuple(a),
            b=tuple(b),
            p=tuple(p),
            stationarity=report.per_stage_delta,
            endpoint_residual=float(np.linalg.norm(p[-1] + a[-1])),
        )

    @staticmethod
    def bounded_slope_check(
        cons: ConstraintSet,
        traj: Trajectory,
        kappa: float,
        e: ArrayLike | None = None,
        samples: int = 1000,
        seed: int = 0,
    ) -> SlopeResult:
        """
        Check ``‖b‖ <= κ‖a‖`` over the stage subgradient generators.

        Generators and ``samples`` random convex combinations of them are tested; a
        generator with ``a = 0`` and ``b != 0`` has ratio infinity.
        """
        if cons.pure_state:
            return SlopeResult(passed=True, worst_ratio=0.0, worst_block=None)

        def ratio(a: FloatArray, b: FloatArray) -> float:
            nb = float(np.linalg.norm(b))
            if nb == 0.0:
                return 0.0
            na = float(np.linalg.norm(a))
            return math.inf if na == 0.0 else nb / na

        rng = np.random.default_rng(seed)
        worst, worst_block = 0.0, None
        for block in cons.blocks():
            if block >= cons.horizon:
                continue
            gens = ConstraintService.penalty_subgradient(cons, e, traj, block)
            candidates = [ratio(g.a, g.b) for g in gens]
            if len(gens) > 1:
                A = np.array([g.a for g in gens])
                B = np.array([g.b for g in gens])
                for w in rng.dirichlet(np.ones(len(gens)), size=samples):
                    candidates.append(ratio(w @ A, w @ B))
            block_worst = max(candidates, default=0.0)
            if block_worst > worst or worst_block is None:
                worst, worst_block = block_worst, block
        return SlopeResult(passed=worst <= kappa, worst_ratio=worst, worst_block=worst_block)

    @staticmethod
    def constrained_conditions_residual(
        sys: ControlSystem,
        traj: Trajectory,
        cost: CostSpec,
        cons: ConstraintSet,
        mult: MultiplierSequence,
        e: ArrayLike | None = None,
        costates: Sequence[ArrayLike] | None = None,
    ) -> ConstrainedReport:
        """
        Assemble the constrained costates and report every residual.

        ``p_n = −λ_0dℓ − Σλ∇G − Σμ∇H``, ``p_{i-1} = −λ_0d_qL − Σλ∇_qg − Σμ∇_qh + A_{i-1}ᵀp_i``;
        stationarity is ``‖P_T(−(λ_0d_uL + Σλ∇_ug + Σμ∇_uh − B_iᵀp_{i+1}))‖``.

        Args:
            sys (ControlSystem): The control system.
            traj (Trajectory): The trajectory to certify.
            cost (CostSpec): The cost.
            cons (ConstraintSet): The constraints.
            mult (MultiplierSequence): Multipliers in ``e`` layout.
            e (ArrayLike | None): Right-hand sides; zeros by default.
            costates (Sequence[ArrayLike] | None): Claimed costates ``p_0..p_n``; when
                given, their distance to the assembled ones is reported.

        Returns:
            ConstrainedReport: Costates, residuals and the degenerate flag.

        Raises:
            ConstraintViolationError: If an inequality multiplier is negative.
        """
        rhs = cons.check_rhs(e)
        values = np.asarray(mult.values, dtype=float)
        if values.size != cons.size:
            raise ValueError("multiplier sequence does not match the constraint set")
        for entry in cons.entries:
            if entry.is_inequality and values[entry.index] < 0.0:
                raise ConstraintViolationError(
                    f"inequality multiplier {entry.index} is negative",
                )

        lin = SystemService.linearize(sys, traj)
        grads = ConstraintService.entry_gradients(cons, traj) if cons.size else []
        a, b = ConstraintService._assemble(sys, traj, cost, cons, mult.lambda0, values, grads)
        p = AdjointService.sweep(lin, a)
        r = AdjointService.stationarity(lin, b, p)
        report = AdjointService.certify(sys, traj, r)

        term_values = ConstraintService.term_values(cons, rhs, traj)
        complementary = tuple(
            abs(values[x.index] * term_values[x.index]) if x.is_inequality else 0.0
            for x in cons.entries
        )
        if costates is None:
            adjoint_residual = tuple(0.0 for _ in p)
        else:
            adjoint_residual = tuple(
                float(np.linalg.norm(np.asarray(c, dtype=float) - pk))
                for c, pk in zip(costates, p)
            )
        return ConstrainedReport(
            costates=tuple(p),
            multipliers=mult,
            stationarity=report.per_stage_delta,
            complementary=complementary,
            adjoint_residual=adjoint_residual,
            lambda0=mult.lambda0,
            degenerate=mult.lambda0 == 0.0 and bool(np.any(values != 0.0)),
            penalty=ConstraintService.penalty_eval(cons, rhs, traj).total,
        )

    @staticmethod
    def assemble_multipliers(
        sys: ControlSystem,
        traj: Trajectory,
        cost: CostSpec,
        cons: ConstraintSet,
        e: ArrayLike | None = None,
    ) -> MultiplierSequence:
        """
        Recover multipliers for ``traj`` numerically.

        The normal branch (``λ_0 = 1``) is tried first when ``traj`` is feasible: the
        stationarity residuals are minimized by nonnegative least squares over the
        active inequality multipliers, split equality multipliers and the control-set
        cone multipliers. Otherwise, or if its residual is too large, the abnormal
        branch (``λ_0 = 0``) takes the strict-normality certificate at the feasible
        shift of ``e``.

        Raises:
            NoCertificate: If neither branch reaches ``settings.MULTIPLIER_TOLERANCE``.
        """
        rhs = cons.check_rhs(e)
        tol = settings.MULTIPLIER_TOLERANCE
        penalty = ConstraintService.penalty_eval(cons, rhs, traj).total
        best: MultiplierSequence | None = None

        if penalty <= settings.PENALTY_TOLERANCE:
            lin = SystemService.linearize(sys, traj)
            grads = ConstraintService.entry_gradients(cons, traj)
            values = ConstraintService.term_values(cons, rhs, traj)
            active = ConstraintService.active_entries(cons, values)

            stage_grads = AdjointService.stage_gradients(sys, traj, cost)
            p0 = AdjointService.sweep(lin, stage_grads.a)
            r0 = AdjointService.stationarity(lin, stage_grads.b, p0)
            base = np.concatenate(r0) if r0 else np.zeros(0)

            R, _ = ConstraintService.unit_responses(sys, traj, cons, active, lin, grads)
            is_ineq = np.array([x.is_inequality for x in active], dtype=bool)
            C = ConstraintService._stage_cone_matrix(sys, traj)
            matrix = np.hstack([R[:, is_ineq], R[:, ~is_ineq], -R[:, ~is_ineq], C])

            multipliers = np.zeros(cons.size)
            if matrix.shape[1] and base.size:
                solution, _ = nnls(matrix, -base)
                n_ineq, n_eq = int(is_ineq.sum()), int((~is_ineq).sum())
                lam = solution[:n_ineq]
                mu = solution[n_ineq : n_ineq + n_eq] - solution[n_ineq + n_eq : n_ineq + 2 * n_eq]
                ineq_entries = [x for x in active if x.is_inequality]
                eq_entries = [x for x in active if not x.is_inequality]
                for entry, value in zip(ineq_entries, lam):
                    multipliers[entry.index] = value
                for entry, value in zip(eq_entries, mu):
                    multipliers[entry.index] = value

            best = MultiplierSequence(lambda0=1.0, values=multipliers, rhs=rhs)
            report = ConstraintService.constrained_conditions_residual(
                sys, traj, cost, cons, best, rhs
            )
            residual = max(report.certified_delta, *report.complementary, 0.0)
            logger.info("normal multipliers: residual %.3e", residual)
            if residual <= tol:
                return best

        shifted = ConstraintService.feasible_shift(cons, rhs, traj)
        normality = ConstraintService.strict_normality_check(sys, traj, cons, shifted)
        if normality.certificate is not None:
            certificate = normality.certificate
            logger.info("abnormal multipliers: residual %.3e", certificate.max_residual)
            if certificate.max_residual <= tol:
                return MultiplierSequence(
                    lambda0=0.0,
                    values=certificate.multipliers,
                    rhs=shifted,
                )
        raise NoCertificate("no multiplier branch reached tolerance", best_attempt=best)

    @staticmethod
    def decrease_certificate(
        sys: ControlSystem,
        cons: ConstraintSet,
        q0: Point,
        e0: ArrayLike | None,
        controls0: Sequence[Point],
        radius: float,
        delta: float,
        samples: int = 50,
        directions: int = 32,
        seed: int = 0,
        distance_depth: int = 3,
    ) -> DecreaseReport:
        """
        Empirically check the strong decrease condition near ``(e0, controls0)``.

        Infeasible samples must admit a tangent-cone direction along which the Dini
        derivative of ``P`` is at most ``−Δ``; for low-dimensional Euclidean control
        spaces the distance bound ``d(u, A(e)) <= P/Δ`` is also checked on a grid.

        Raises:
            ConstraintViolationError: If ``controls0`` is infeasible for ``e0``.
        """
        rhs0 = cons.check_rhs(e0)
        traj0 = SystemService.rollout(sys, q0, controls0)
        if cons.is_empty:
            return DecreaseReport(passed=True, checked=0, worst_rate=-math.inf)
        if ConstraintService.penalty_eval(cons, rhs0, traj0).total > settings.PENALTY_TOLERANCE:
            raise ConstraintViolationError("decrease certificate needs a feasible base point")

        space = sys.control_space
        u0 = sys.pack_controls(controls0)
        rng = np.random.default_rng(seed)
        tol = settings.PENALTY_TOLERANCE

        def penalty_at(rhs: FloatArray, packed: Point) -> float:
            traj = SystemService.rollout(sys, q0, sys.unpack_controls(packed))
            return ConstraintService.penalty_eval(cons, rhs, traj).total

        euclidean = all(isinstance(u.manifold, Euclidean) for u in controls0)
        checked, violations, worst = 0, 0, -math.inf
        for _ in range(samples):
            rhs = rhs0 + radius * rng.uniform(-1.0, 1.0, size=cons.size)
            step = rng.standard_normal(space.dim)
            step *= radius * rng.uniform() / max(np.linalg.norm(step), 1e-300)
            controls = SystemService.project_controls(
                sys,
                sys.unpack_controls(space.retract(u0, step)),
            )
            packed = sys.pack_controls(controls)
            value = penalty_at(rhs, packed)
            if value <= tol:
                continue
            checked += 1

            traj = SystemService.rollout(sys, q0, controls)
            lin = SystemService.linearize(sys, traj)
            candidates = []
            grads = ConstraintService.entry_gradients(cons, traj)
            term_values = ConstraintService.term_values(cons, rhs, traj)
            violated = [
                x
                for x in cons.entries
                if (term_values[x.index] if x.is_inequality else abs(term_values[x.index]))
                > tol
            ]
            R, _ = ConstraintService.unit_responses(sys, traj, cons, violated, lin, grads)
            for k, entry in enumerate(violated):
                sign = 1.0 if entry.is_inequality else float(np.sign(term_values[entry.index]))
                candidates.append(-sign * R[:, k])
            if R.shape[1]:
                candidates.append(-R.sum(axis=1))
            candidates.extend(rng.standard_normal((directions, space.dim)))

            rate = math.inf
            for direction in candidates:
                pieces = space.split(direction)
                projected = np.concatenate(
                    [
                        cset.tangent_cone_project(u, d)
                        for cset, u, d in zip(sys.control_sets, controls, pieces)
                    ],
                )
                norm = float(np.linalg.norm(projected))
                if norm <= 1e-12:
                    continue
                estimate = OracleService.dini_estimate(
                    lambda x, r=rhs: penalty_at(r, x),
                    space,
                    packed,
                    projected / norm,
                )
                rate = min(rate, estimate.value)
                if rate <= -delta + 1e-6:
                    break
            worst = max(worst, rate)
            if rate > -delta + 1e-6:
                logger.info("strong decrease fails at a sample with P = %.3e", value)
                return DecreaseReport(
                    passed=False,
                    checked=checked,
                    worst_rate=worst,
                    counterexample=(rhs, controls),
                    distance_violations=violations,
                )

            if euclidean and space.dim <= 3:
                flat = np.concatenate([np.asarray(u.coords) for u in controls])
                reach = value / delta + radius
                bracket = OracleService.feasible_distance(
                    lambda x, r=rhs: penalty_at(r, space.point(tuple(space.split(x)))),
                    flat,
                    flat - reach,
                    flat + reach,
                    grid_depth=distance_depth,
                )
                if bracket.status == "Bracketed" and bracket.lower > value / delta + 1e-9:
                    violations += 1

        return DecreaseReport(
            passed=violations == 0,
            checked=checked,
            worst_rate=worst,
            distance_violations=violations,
        )

    @staticmethod
    def value_sensitivity(
        sys: ControlSystem,
        cost: CostSpec,
        cons: ConstraintSet,
        q0: Point,
        u_init: Sequence[Point],
        e_grid: Sequence[ArrayLike],
        opts: SolveOptions | None = None,
        base_rhs: ArrayLike | None = None,
    ) -> SensitivityTable:
        """
        Tabulate ``v(e)`` over a grid of perturbations and estimate calmness at 0.

        Grid entries perturb ``base_rhs`` (zeros by default), and rows report the
        perturbation rather than the resulting right-hand side.

        Each grid point is an independent penalty solve; they run on up to
        ``settings.THREADS`` worker threads. Unsolved points are kept in the table
        with their status but excluded from the estimate; a point whose solve raises
        is recorded as ``"Failed"`` with value nan.

        Returns:
            SensitivityTable: Rows in grid order, ``v(0)`` and
            ``min (v(e) − v(0)) / ‖e‖`` over the solved nonzero points.
        """
        from dgmp.v1.services.solver import SolverService

        base_rhs = cons.check_rhs(base_rhs)
        grid = [cons.check_rhs(e) for e in e_grid]

        def solve(shift: FloatArray) -> SensitivityRow:
            try:
                report = SolverService.penalty_solve(
                    sys, cost, cons, q0, u_init, opts, e=base_rhs + shift
                )
            except (DGMPError, ArithmeticError, np.linalg.LinAlgError) as exc:
                logger.warning("sweep point %s failed: %s", shift, exc)
                return SensitivityRow(rhs=shift, value=math.nan, status=SWEEP_FAILED)
            return SensitivityRow(rhs=shift, value=report.cost, status=report.status.value)

        zero = np.zeros(cons.size)
        with ThreadPoolExecutor(max_workers=max(1, min(settings.THREADS, len(grid) + 1))) as pool:
            rows = list(pool.map(solve, grid))
            base_rows = [row for row in rows if not np.any(row.rhs)]
            base = base_rows[0] if base_rows else pool.submit(solve, zero).result()

        if base.status != "Converged":
            logger.warning("value at e = 0 unsolved (%s); calmness not estimated", base.status)
            return SensitivityTable(tuple(rows), base.value, None, False)

        slopes = []
        for row in rows:
            norm = float(np.linalg.norm(row.rhs))
            if norm == 0.0:
                continue
            if row.status != "Converged":
                logger.warning("sweep point %s unsolved (%s); excluded", row.rhs, row.status)
                continue
            slopes.append((row.value - base.value) / norm)
        calmness = min(slopes) if slopes else None
        return SensitivityTable(
            rows=tuple(rows),
            base_value=base.value,
            calmness=calmness,
            calm=calmness is not None and math.isfinite(calmness),
        )
