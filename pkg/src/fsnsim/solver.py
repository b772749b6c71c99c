"""Quasi-static mechanics on the tag lattice.

The continuum relations (symmetric displacement gradient for phonon strain,
plain gradient for phason strain, vanishing stress divergence for
equilibrium) are discretized on the irregular tree embedding with a
weighted-least-squares stencil: each node fits an affine model of a field
over its intact-bond neighbours, weighted by bond stiffness over squared
bond length. The same stencil provides gradients (strain recovery) and
divergences (equilibrium residuals), so a spatially uniform stress field
has identically zero residual and affine fields are recovered exactly.

Nodes whose neighbour offsets cannot support a 3-D gradient (fewer than
three neighbours, or a near-singular normal matrix - every leaf, and any
node isolated by fracture) are flagged degenerate: their strains are zero
and their stresses are borrowed from the nearest non-degenerate neighbour
when a stress field is assembled for divergence or fracture scoring.

Equilibrium is solved by safeguarded damped fixed-point relaxation: interior
displacements move along the discrete stress divergence, with the step size
halved on overshoot and cautiously grown on sustained progress. Boundary
(outermost-shell) displacements are prescribed affine data.

Loading runs are strain-controlled at the boundary. Each step advances the
applied strain, re-solves equilibrium, evaluates per-node effective stress,
applies flow-rule plastic increments and power-law creep increments to the
inelastic strain state, breaks at most one over-threshold bond (worst
first, ties to the lower bond id) and optionally rewires near the fracture
site, then appends a curve sample. Runs are deterministic functions of
(lattice, program, models).
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field as dc_field
from typing import Callable, Iterable

import numpy as np

from .constitutive import (
    CreepParams,
    FlowModel,
    OntologyConstants,
    StrainState,
    StressState,
    YieldModel,
    clustering_modulus,
    deviator,
    effective_strain,
)
from .errors import ConvergenceError, ValidationError
from .lattice import FsnLattice

_EYE = np.eye(3)

# Relative eigenvalue floor below which a stencil normal matrix is treated
# as rank-deficient (roundoff amplification would exceed field tolerances).
_STENCIL_COND_FLOOR = 1e-10


# ---------------------------------------------------------------------------
# fields and stencils


@dataclass
class LatticeField:
    """Per-node phonon displacement u and phason displacement w."""

    u: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float)
        self.w = np.asarray(self.w, dtype=float)
        if self.u.shape != self.w.shape or self.u.ndim != 2 or self.u.shape[1] != 3:
            raise ValidationError(
                f"field shapes must both be (n, 3), got {self.u.shape} and {self.w.shape}"
            )
        if not (np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.w))):
            raise ValidationError("field has non-finite components")

    @classmethod
    def zeros(cls, n: int) -> "LatticeField":
        return cls(u=np.zeros((n, 3)), w=np.zeros((n, 3)))

    def copy(self) -> "LatticeField":
        return LatticeField(self.u.copy(), self.w.copy())


@dataclass
class StressField:
    """Per-node stress tensors for both channels, as (n, 3, 3) arrays."""

    phonon: np.ndarray
    phason: np.ndarray


@dataclass
class NodeStrains:
    """Per-node strain tensors plus the degenerate-stencil flags."""

    phonon: np.ndarray
    phason: np.ndarray
    degenerate: np.ndarray
    warnings: int

    def __getitem__(self, i: int) -> StrainState:
        return StrainState(phonon=self.phonon[i], phason=self.phason[i])


@dataclass
class ResidualField:
    phonon: np.ndarray
    phason: np.ndarray


class GradientStencil:
    """Weighted-least-squares gradient/divergence operator on intact bonds."""

    def __init__(self, lattice: FsnLattice):
        coords = lattice.coords()
        n = len(lattice.nodes)
        src, dst, stiff = [], [], []
        for bond in lattice.bonds:
            if not bond.intact:
                continue
            src += [bond.a, bond.b]
            dst += [bond.b, bond.a]
            stiff += [bond.stiffness, bond.stiffness]
        self.n = n
        self.src = np.asarray(src, dtype=int)
        self.dst = np.asarray(dst, dtype=int)
        if len(self.src):
            d = coords[self.dst] - coords[self.src]
            d2 = np.einsum("ei,ei->e", d, d)
            if np.any(d2 == 0.0):
                raise ValidationError("bond of zero length; nodes share coordinates")
            self.offsets = d
            self.weights = np.asarray(stiff, dtype=float) / d2
        else:
            self.offsets = np.zeros((0, 3))
            self.weights = np.zeros(0)

        counts = np.bincount(self.src, minlength=n) if len(self.src) else np.zeros(n, int)
        m = np.zeros((n, 3, 3))
        if len(self.src):
            contrib = self.weights[:, None, None] * np.einsum(
                "ei,ej->eij", self.offsets, self.offsets
            )
            np.add.at(m, self.src, contrib)
        eigs = np.linalg.eigvalsh(m)
        self.degenerate = (counts < 3) | (eigs[:, 0] <= _STENCIL_COND_FLOOR * np.maximum(eigs[:, -1], 1e-300))
        self.minv = np.zeros((n, 3, 3))
        ok = ~self.degenerate
        if np.any(ok):
            self.minv[ok] = np.linalg.inv(m[ok])
        self._h_min = float(np.sqrt(d2.min())) if len(self.src) else 1.0
        self.extrapolate_from = self._nearest_valid(lattice)

    def _nearest_valid(self, lattice: FsnLattice) -> np.ndarray:
        """For each degenerate node, the nearest (BFS, lowest-id) valid node."""
        adjacency: list[list[int]] = [[] for _ in range(self.n)]
        for a, b in zip(self.src, self.dst):
            adjacency[a].append(b)
        for nbrs in adjacency:
            nbrs.sort()
        out = np.arange(self.n)
        for i in np.flatnonzero(self.degenerate):
            seen = {int(i)}
            frontier = deque([int(i)])
            found = -1
            while frontier and found < 0:
                level = [frontier.popleft() for _ in range(len(frontier))]
                candidates = []
                for node in level:
                    for nb in adjacency[node]:
                        if nb in seen:
                            continue
                        seen.add(nb)
                        frontier.append(nb)
                        if not self.degenerate[nb]:
                            candidates.append(nb)
                if candidates:
                    found = min(candidates)
            if found >= 0:
                out[i] = found
        return out

    def gradient_multi(self, values: np.ndarray) -> np.ndarray:
        """Least-squares spatial gradient of a (n, k) field: (n, k, 3).

        Exact on affine data at non-degenerate nodes; zero at degenerate
        ones.
        """
        values = np.asarray(values, dtype=float)
        k = values.shape[1]
        b = np.zeros((self.n, k, 3))
        if len(self.src):
            delta = values[self.dst] - values[self.src]
            contrib = self.weights[:, None, None] * np.einsum(
                "ek,ej->ekj", delta, self.offsets
            )
            np.add.at(b, self.src, contrib)
        grad = b @ self.minv
        grad[self.degenerate] = 0.0
        return grad

    def gradient(self, values: np.ndarray) -> np.ndarray:
        """Gradient of a vector field: out[n, i, j] = d values_i / d x_j."""
        return self.gradient_multi(values)

    def divergence(self, tensors: np.ndarray) -> np.ndarray:
        """Row divergence of a (n, 3, 3) tensor field: out[n, a] = d T_ab / d x_b."""
        tensors = np.asarray(tensors, dtype=float)
        g = self.gradient_multi(tensors.reshape(self.n, 9)).reshape(self.n, 3, 3, 3)
        return np.einsum("nabb->na", g)

    @property
    def h_min(self) -> float:
        return self._h_min


# ---------------------------------------------------------------------------
# kinematics and per-node material evaluation


def compute_strains(
    lattice: FsnLattice, field: LatticeField, stencil: GradientStencil | None = None
) -> NodeStrains:
    """Per-node strain states from the displacement fields.

    Phonon strain is the symmetrized gradient of u, phason strain the plain
    gradient of w. Nodes without a usable stencil are flagged, their strain
    zeroed, and counted in ``warnings``.
    """
    if field.u.shape[0] != len(lattice.nodes):
        raise ValidationError(
            f"field has {field.u.shape[0]} rows for {len(lattice.nodes)} nodes"
        )
    st = stencil if stencil is not None else GradientStencil(lattice)
    gu = st.gradient(field.u)
    gw = st.gradient(field.w)
    phonon = 0.5 * (gu + np.transpose(gu, (0, 2, 1)))
    return NodeStrains(
        phonon=phonon,
        phason=gw,
        degenerate=st.degenerate.copy(),
        warnings=int(st.degenerate.sum()),
    )


def _elastic_stress_arrays(
    eps: np.ndarray, w: np.ndarray, c: OntologyConstants
) -> tuple[np.ndarray, np.ndarray]:
    two_g = 2.0 * c.shear_modulus
    tr_e = np.trace(eps, axis1=-2, axis2=-1)
    tr_w = np.trace(w, axis1=-2, axis2=-1)
    dev_e = eps - (tr_e[..., None, None] / 3.0) * _EYE
    dev_w = w - (tr_w[..., None, None] / 3.0) * _EYE
    s = two_g * dev_e + c.bulk * tr_e[..., None, None] * _EYE
    k = c.phason_coupling * (two_g * dev_w + c.bulk * tr_w[..., None, None] * _EYE)
    return s, k


def _invert_total_deformation(
    eps: np.ndarray, w: np.ndarray, c: OntologyConstants, max_iter: int = 100
) -> tuple[np.ndarray, np.ndarray]:
    """Invert the total-deformation relation for one strain state.

    Finds the effective stress whose proportionality factor reproduces the
    given deviatoric strains (scalar safeguarded Newton), then scales the
    deviators and closes the volumetric parts through the bulk modulus.
    """
    s_kk = 3.0 * c.bulk * float(np.trace(eps))
    k_kk = 3.0 * c.bulk * float(np.trace(w))
    dev_e = deviator(eps)
    dev_w = deviator(w)
    de = math.sqrt(float(np.tensordot(dev_e, dev_e)))
    dw = math.sqrt(float(np.tensordot(dev_w, dev_w)))
    alpha = c.phason_coupling
    if de == 0.0 and (dw == 0.0 or alpha == 0.0):
        # No deviatoric content to invert (a pure phason deviator with zero
        # coupling carries no effective stress and maps back to zero).
        s = (s_kk / 3.0) * _EYE
        k = (k_kk / 3.0) * _EYE
        return s, k

    def phi(s_eff: float) -> float:
        return 1.5 * effective_strain(s_eff, c) / s_eff

    def resid(s_eff: float) -> float:
        p = phi(s_eff)
        s_e = math.sqrt(1.5) * de / p
        k_norm_sq = (dw / p) ** 2 + k_kk**2 / 3.0
        return s_e + alpha * math.sqrt(k_norm_sq) - s_eff

    # The elastic branch has a constant factor, so the candidate root there
    # is explicit; accept it if it falls inside the branch.
    p_el = 1.5 / c.E_el
    root_el = math.sqrt(1.5) * de / p_el + alpha * math.sqrt(
        (dw / p_el) ** 2 + k_kk**2 / 3.0
    )
    if root_el <= c.s_0:
        s_eff = root_el
    else:
        lo, hi = c.s_0, max(root_el, c.s_0 * 2.0)
        grow = 0
        while resid(hi) > 0.0:
            hi *= 2.0
            grow += 1
            if grow > 200:
                raise ConvergenceError(
                    "total-deformation inversion could not bracket a root",
                    residual=resid(hi),
                    iterations=grow,
                )
        s_eff = 0.5 * (lo + hi)
        converged = False
        for it in range(max_iter):
            r = resid(s_eff)
            if r > 0.0:
                lo = s_eff
            else:
                hi = s_eff
            if abs(r) <= 1e-14 * max(s_eff, 1.0):
                converged = True
                break
            # derivative of resid on the power branch
            u_val = s_eff ** (1.0 - c.n) / (1.5 * c.A)
            du = (1.0 - c.n) * s_eff ** (-c.n) / (1.5 * c.A)
            d1 = math.sqrt(1.5) * de * du
            q = dw**2 * u_val**2 + k_kk**2 / 3.0
            d2 = alpha * dw**2 * u_val * du / math.sqrt(q) if q > 0.0 else 0.0
            deriv = d1 + d2 - 1.0
            step = s_eff - r / deriv if deriv != 0.0 else 0.5 * (lo + hi)
            if not (lo < step < hi):
                step = 0.5 * (lo + hi)
            if abs(step - s_eff) <= 1e-15 * max(s_eff, 1.0):
                s_eff = step
                converged = True
                break
            s_eff = step
        if not converged:
            raise ConvergenceError(
                "total-deformation inversion did not converge",
                residual=resid(s_eff),
                iterations=max_iter,
            )
    p = phi(s_eff)
    s = dev_e / p + (s_kk / 3.0) * _EYE
    k = dev_w / p + (k_kk / 3.0) * _EYE
    return s, k


def node_stress(
    strain: StrainState, c: OntologyConstants, law: str = "elastic"
) -> StressState:
    """Stress at one node from its strain state.

    ``"elastic"`` applies the linear isotropic map on the phonon channel and
    the coupling-scaled linear map on the phason channel;
    ``"total_deformation"`` numerically inverts the deformation-theory
    relation.
    """
    if law == "elastic":
        s, k = _elastic_stress_arrays(strain.phonon, strain.phason, c)
    elif law == "total_deformation":
        s, k = _invert_total_deformation(strain.phonon, strain.phason, c)
    else:
        raise ValidationError(f"law must be 'elastic' or 'total_deformation', got {law!r}")
    return StressState(phonon=0.5 * (s + s.T), phason=k)


def equilibrium_residual(
    lattice: FsnLattice, stresses: StressField, stencil: GradientStencil | None = None
) -> ResidualField:
    """Discrete divergence of both stress channels at every node.

    Uses the same least-squares stencil as strain recovery, so a spatially
    uniform stress field yields zero residual to roundoff. Leaf/boundary
    values are consumed as given; callers exclude boundary nodes from
    convergence norms.
    """
    st = stencil if stencil is not None else GradientStencil(lattice)
    return ResidualField(
        phonon=st.divergence(stresses.phonon),
        phason=st.divergence(stresses.phason),
    )


# ---------------------------------------------------------------------------
# equilibrium solve


@dataclass(frozen=True)
class AffineBoundary:
    """Affine boundary data: u = phonon @ x, w = phason @ x on the boundary."""

    phonon: np.ndarray
    phason: np.ndarray | None = None

    def displacements(self, coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        fu = np.asarray(self.phonon, dtype=float)
        fw = (
            np.zeros((3, 3))
            if self.phason is None
            else np.asarray(self.phason, dtype=float)
        )
        return coords @ fu.T, coords @ fw.T


@dataclass
class MaterialModels:
    """Bundle of material laws used by a run."""

    constants: OntologyConstants
    yield_model: YieldModel | None = None
    flow: FlowModel | None = None
    creep: CreepParams | None = None
    stress_law: str = "elastic"


@dataclass
class SolveResult:
    field: LatticeField
    iterations: int
    residual: float
    converged: bool


def _stress_arrays_for(
    models: MaterialModels,
    eps: np.ndarray,
    w: np.ndarray,
    degenerate: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    if models.stress_law == "elastic":
        return _elastic_stress_arrays(eps, w, models.constants)
    if models.stress_law == "total_deformation":
        s = np.zeros_like(eps)
        k = np.zeros_like(w)
        for i in range(eps.shape[0]):
            if degenerate[i]:
                continue
            s[i], k[i] = _invert_total_deformation(eps[i], w[i], models.constants)
        return s, k
    raise ValidationError(f"unknown stress law {models.stress_law!r}")


def solve_equilibrium(
    lattice: FsnLattice,
    boundary: AffineBoundary,
    models: MaterialModels,
    tol: float = 1e-10,
    max_iter: int = 50_000,
    field0: LatticeField | None = None,
    inelastic: tuple[np.ndarray, np.ndarray] | None = None,
    stencil: GradientStencil | None = None,
) -> SolveResult:
    """Relax interior displacements until the interior residual is below tol.

    The iteration moves interior nodes along the discrete stress divergence
    with an adaptively damped step (halved on overshoot, gently grown on
    sustained progress). The initial iterate extends the boundary data
    affinely unless a warm-start field is supplied. Raises
    :class:`ConvergenceError` carrying the best field and residual when
    ``max_iter`` is exhausted or the step size underflows.
    """
    if tol <= 0:
        raise ValidationError(f"tolerance must be > 0, got {tol}")
    st = stencil if stencil is not None else GradientStencil(lattice)
    n = len(lattice.nodes)
    coords = lattice.coords()
    boundary_ids = lattice.boundary_ids()
    is_boundary = np.zeros(n, dtype=bool)
    is_boundary[boundary_ids] = True
    norm_mask = (~is_boundary) & (~st.degenerate)

    ub, wb = boundary.displacements(coords)
    if field0 is not None:
        u = field0.u.copy()
        w = field0.w.copy()
    else:
        u, w = ub.copy(), wb.copy()
    u[is_boundary] = ub[is_boundary]
    w[is_boundary] = wb[is_boundary]

    alpha = models.constants.phason_coupling
    eps_in = inelastic[0] if inelastic is not None else None
    w_in = inelastic[1] if inelastic is not None else None

    def residual_of(u_arr: np.ndarray, w_arr: np.ndarray) -> tuple[ResidualField, float]:
        gu = st.gradient(u_arr)
        gw = st.gradient(w_arr)
        eps = 0.5 * (gu + np.transpose(gu, (0, 2, 1)))
        wts = gw
        if eps_in is not None:
            eps = eps - eps_in
            wts = wts - w_in
        s, k = _stress_arrays_for(models, eps, wts, st.degenerate)
        # degenerate nodes borrow the nearest valid stress so divergence
        # stencils never see artificial zero-stress holes at the boundary
        s = s[st.extrapolate_from]
        k = k[st.extrapolate_from]
        res = ResidualField(phonon=st.divergence(s), phason=st.divergence(k))
        if np.any(norm_mask):
            r_u = np.linalg.norm(res.phonon[norm_mask], axis=1)
            r_w = np.linalg.norm(res.phason[norm_mask], axis=1)
            norm = float(max(r_u.max(), r_w.max()))
        else:
            norm = 0.0
        return res, norm

    res, norm = residual_of(u, w)
    iterations = 0
    if norm < tol or not np.any(norm_mask):
        return SolveResult(LatticeField(u, w), iterations, norm, True)

    c = models.constants
    stiff_scale = 2.0 * c.shear_modulus + c.bulk
    lam = 0.2 * st.h_min**2 / stiff_scale
    lam_w = lam / alpha if alpha > 0.0 else 0.0
    lam_floor = lam * 1e-14
    interior = np.flatnonzero(~is_boundary)
    streak = 0

    while iterations < max_iter:
        trial_u = u.copy()
        trial_w = w.copy()
        trial_u[interior] += lam * res.phonon[interior]
        if alpha > 0.0:
            trial_w[interior] += lam_w * res.phason[interior]
        trial_res, trial_norm = residual_of(trial_u, trial_w)
        iterations += 1
        if trial_norm < norm:
            u, w, res, norm = trial_u, trial_w, trial_res, trial_norm
            streak += 1
            if streak >= 20:
                lam *= 1.25
                lam_w *= 1.25
                streak = 0
            if norm < tol:
                return SolveResult(LatticeField(u, w), iterations, norm, True)
        else:
            lam *= 0.5
            lam_w *= 0.5
            streak = 0
            if lam < lam_floor:
                break

    raise ConvergenceError(
        f"equilibrium relaxation stalled at residual {norm:.3e} after "
        f"{iterations} iterations (tol {tol:.3e})",
        residual=norm,
        iterations=iterations,
        best=SolveResult(LatticeField(u, w), iterations, norm, False),
    )


# ---------------------------------------------------------------------------
# loading program


@dataclass(frozen=True)
class LoadProgram:
    """Strain-controlled loading schedule and structural-plasticity policy.

    ``strain_rate`` is per unit of the exposition clock, so the wall time of
    one step is (target_strain / steps) / strain_rate; creep integrates over
    that interval. ``fracture_threshold`` is the bond-mean effective stress
    above which a bond may break (at most one per step).
    """

    strain_rate: float
    target_strain: float
    steps: int
    mode: str = "strain_controlled"
    fracture_threshold: float = math.inf
    rewire: str = "off"
    rewire_budget: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.mode != "strain_controlled":
            raise ValidationError(f"only strain_controlled mode is supported, got {self.mode!r}")
        if self.strain_rate <= 0:
            raise ValidationError(f"strain rate must be > 0, got {self.strain_rate}")
        if self.target_strain < 0:
            raise ValidationError(f"target strain must be >= 0, got {self.target_strain}")
        if self.steps <= 0:
            raise ValidationError(f"steps must be > 0, got {self.steps}")
        if self.fracture_threshold <= 0:
            raise ValidationError(
                f"fracture threshold must be > 0, got {self.fracture_threshold}"
            )
        if self.rewire not in ("off", "nearest_unbonded"):
            raise ValidationError(
                f"rewire must be 'off' or 'nearest_unbonded', got {self.rewire!r}"
            )
        if self.rewire_budget < 0:
            raise ValidationError(f"rewire budget must be >= 0, got {self.rewire_budget}")
        if not 0 <= self.seed < 2**64:
            raise ValidationError("seed must fit in 64 unsigned bits")


@dataclass(frozen=True)
class CurveSample:
    step: int
    applied_strain: float
    mean_effective_stress: float
    broken_bonds: int
    new_bonds: int
    plastic_fraction: float


@dataclass(frozen=True)
class Event:
    step: int
    kind: str  # yield | fracture | rewire
    ref_id: int
    detail: float


@dataclass
class RunResult:
    samples: list[CurveSample]
    events: list[Event]
    status: str  # ok | nonconverged
    error: str | None = None
    diagnostics: dict = dc_field(default_factory=dict)


def _von_mises_arrays(s: np.ndarray) -> np.ndarray:
    tr = np.trace(s, axis1=-2, axis2=-1)
    dev = s - (tr[..., None, None] / 3.0) * _EYE
    return np.sqrt(1.5 * np.einsum("nij,nij->n", dev, dev))


def _creep_rate_arrays(s_eff: np.ndarray, p: CreepParams) -> np.ndarray:
    # array version of constitutive.creep_rate; callers mask s_eff > 0
    ratio = p.s_hat / s_eff if p.orientation == "as_printed" else s_eff / p.s_hat
    return p.B * ratio**p.m


def _pick_rewire_pair(
    lattice: FsnLattice, broken: tuple[int, int]
) -> tuple[int, int, float] | None:
    """Closest non-bonded pair touching the fracture site, or None.

    Candidates pair either endpoint of the broken bond with any other node
    not already connected to it by any bond record (intact or broken).
    Ties break on (endpoint id, partner id).
    """
    coords = lattice.coords()
    bonded: set[tuple[int, int]] = set()
    for b in lattice.bonds:
        bonded.add((min(b.a, b.b), max(b.a, b.b)))
    best: tuple[float, int, int] | None = None
    for endpoint in sorted(broken):
        for other in range(len(lattice.nodes)):
            if other == endpoint:
                continue
            key = (min(endpoint, other), max(endpoint, other))
            if key in bonded:
                continue
            dist = float(np.linalg.norm(coords[endpoint] - coords[other]))
            cand = (dist, endpoint, other)
            if best is None or cand < best:
                best = cand
    if best is None:
        return None
    dist, a, b = best
    return a, b, dist


def run_loading(
    lattice: FsnLattice,
    program: LoadProgram,
    models: MaterialModels,
    pattern: np.ndarray | None = None,
    tag_expositions: dict[str, float] | None = None,
    solver_tol: float = 1e-9,
    solver_max_iter: int = 50_000,
) -> RunResult:
    """Run the quasi-static loading program and collect curve plus events.

    ``pattern`` is the unit boundary strain tensor (default: uniaxial
    stretch along the first embedding axis); the applied strain scales it.
    On equilibrium non-convergence the run halts and returns the samples
    and events gathered so far with status ``"nonconverged"``.
    """
    if pattern is None:
        pattern = np.diag([1.0, 0.0, 0.0])
    pattern = np.asarray(pattern, dtype=float)
    work = lattice.copy()
    n = len(work.nodes)
    c = models.constants
    alpha = c.phason_coupling

    d_eps = program.target_strain / program.steps
    dt = d_eps / program.strain_rate

    eps_in = np.zeros((n, 3, 3))
    w_in = np.zeros((n, 3, 3))
    k_hard = np.zeros(n)
    s_prev = np.zeros(n)
    yielded_ever = np.zeros(n, dtype=bool)
    yield_step = np.full(n, -1, dtype=int)
    broken_cum = 0
    new_cum = 0
    budget = program.rewire_budget

    samples = [CurveSample(0, 0.0, 0.0, 0, 0, 0.0)]
    events: list[Event] = []
    status = "ok"
    error = None

    stencil = GradientStencil(work)
    field = None

    for step in range(1, program.steps + 1):
        eps_app = step * d_eps
        boundary = AffineBoundary(phonon=eps_app * pattern)
        try:
            sol = solve_equilibrium(
                work,
                boundary,
                models,
                tol=solver_tol,
                max_iter=solver_max_iter,
                field0=field,
                inelastic=(eps_in, w_in),
                stencil=stencil,
            )
        except ConvergenceError as exc:
            status = "nonconverged"
            error = str(exc)
            break
        field = sol.field

        strains = compute_strains(work, field, stencil)
        valid = ~strains.degenerate
        s, k = _stress_arrays_for(
            models, strains.phonon - eps_in, strains.phason - w_in, strains.degenerate
        )
        s_x = s[stencil.extrapolate_from]
        k_x = k[stencil.extrapolate_from]
        s_e = _von_mises_arrays(s_x)
        f_k = alpha * np.sqrt(np.einsum("nij,nij->n", k_x, k_x))
        s_eff = s_e + f_k
        s_eff[~valid] = s_eff[stencil.extrapolate_from[~valid]]
        d_s = s_eff - s_prev

        plastic_mask = np.zeros(n, dtype=bool)
        if models.yield_model is not None:
            y = models.yield_model
            limit = y.s_y + (y.H * k_hard if y.mode == "linear_hardening" else 0.0)
            omega = s_eff - limit
            plastic_mask = valid & (omega >= 0.0)
            newly = plastic_mask & ~yielded_ever
            for node_id in np.flatnonzero(newly):
                events.append(Event(step, "yield", int(node_id), float(s_eff[node_id])))
                yield_step[node_id] = step
            yielded_ever |= newly

            if models.flow is not None:
                flow_mask = plastic_mask & (d_s > 0.0) & (s_e > 0.0)
                if np.any(flow_mask):
                    idx = np.flatnonzero(flow_mask)
                    if models.flow.modulus_mode == "constant":
                        mod = np.full(len(idx), models.flow.K0)
                    else:
                        mod = 1.0 / (c.A * c.n * s_eff[idx] ** (c.n - 1.0))
                    scale = d_s[idx] / mod
                    tr = np.trace(s_x[idx], axis1=-2, axis2=-1)
                    dev = s_x[idx] - (tr[..., None, None] / 3.0) * _EYE
                    d_eps_p = scale[:, None, None] * 1.5 * dev / s_e[idx][:, None, None]
                    eps_in[idx] += d_eps_p
                    k_hard[idx] += np.sqrt(
                        (2.0 / 3.0) * np.einsum("nij,nij->n", d_eps_p, d_eps_p)
                    )
                    k_norm = np.sqrt(np.einsum("nij,nij->n", k_x[idx], k_x[idx]))
                    has_k = k_norm > 0.0
                    if np.any(has_k):
                        sub = idx[has_k]
                        d_w_p = (
                            (scale[has_k] * alpha / k_norm[has_k])[:, None, None]
                            * k_x[sub]
                        )
                        w_in[sub] += d_w_p

        if models.creep is not None:
            creep_mask = valid & (s_eff > 1e-12) & (s_e > 0.0)
            if np.any(creep_mask):
                idx = np.flatnonzero(creep_mask)
                rate = _creep_rate_arrays(s_eff[idx], models.creep)
                tr = np.trace(s_x[idx], axis1=-2, axis2=-1)
                dev = s_x[idx] - (tr[..., None, None] / 3.0) * _EYE
                eps_in[idx] += (dt * rate)[:, None, None] * 1.5 * dev / s_e[idx][
                    :, None, None
                ]

        topology_changed = False
        worst = None
        for bond_id, bond in enumerate(work.bonds):
            if not bond.intact:
                continue
            stress_b = 0.5 * (s_eff[bond.a] + s_eff[bond.b])
            if stress_b > program.fracture_threshold:
                if worst is None or stress_b > worst[0]:
                    worst = (stress_b, bond_id)
        if worst is not None:
            stress_b, bond_id = worst
            work.bonds[bond_id].intact = False
            broken_cum += 1
            events.append(Event(step, "fracture", bond_id, float(stress_b)))
            topology_changed = True
            if program.rewire == "nearest_unbonded" and budget > 0:
                pair = _pick_rewire_pair(
                    work, (work.bonds[bond_id].a, work.bonds[bond_id].b)
                )
                if pair is not None:
                    a, b, dist = pair
                    from .lattice import Bond

                    new_id = len(work.bonds)
                    work.bonds.append(
                        Bond(min(a, b), max(a, b), work.bonds[bond_id].stiffness, True)
                    )
                    new_cum += 1
                    budget -= 1
                    events.append(Event(step, "rewire", new_id, dist))

        if topology_changed:
            stencil = GradientStencil(work)

        s_prev = s_eff
        n_valid = int(valid.sum())
        mean_stress = float(s_eff[valid].mean()) if n_valid else 0.0
        plastic_fraction = float(plastic_mask.sum() / n_valid) if n_valid else 0.0
        samples.append(
            CurveSample(
                step=step,
                applied_strain=eps_app,
                mean_effective_stress=mean_stress,
                broken_bonds=broken_cum,
                new_bonds=new_cum,
                plastic_fraction=plastic_fraction,
            )
        )

    diagnostics: dict = {}
    if tag_expositions:
        diagnostics.update(
            _onset_exposition_diagnostic(work, samples, yield_step, tag_expositions)
        )
    return RunResult(
        samples=samples, events=events, status=status, error=error, diagnostics=diagnostics
    )


def _onset_exposition_diagnostic(
    lattice: FsnLattice,
    samples: list[CurveSample],
    yield_step: np.ndarray,
    tag_expositions: dict[str, float],
) -> dict:
    """Mean exposition of nodes that had yielded by the ductility onset."""
    if len(samples) < 10:
        return {}
    onset = ductility_onset(samples)
    if math.isinf(onset):
        return {}
    onset_step = next(
        (s.step for s in samples if s.applied_strain * 100.0 >= onset), samples[-1].step
    )
    values = [
        tag_expositions[node.tag]
        for node in lattice.nodes
        if node.tag in tag_expositions and 0 <= yield_step[node.id] <= onset_step
    ]
    if not values:
        return {"onset_percent": onset}
    return {
        "onset_percent": onset,
        "mean_exposition_at_onset": sum(values) / len(values),
    }


def ductility_onset(samples: Iterable[CurveSample], slope_fraction: float = 0.1) -> float:
    """Applied strain (percent) where the curve's tangent drops below
    ``slope_fraction`` of its initial slope; +inf if it never does.

    Requires at least 10 samples.
    """
    samples = list(samples)
    if len(samples) < 10:
        raise ValidationError(f"need at least 10 samples, got {len(samples)}")
    strain = np.array([s.applied_strain for s in samples]) * 100.0
    stress = np.array([s.mean_effective_stress for s in samples])
    d_strain = np.diff(strain)
    if np.any(d_strain <= 0):
        raise ValidationError("samples must be strictly increasing in strain")
    slopes = np.diff(stress) / d_strain
    initial = slopes[0]
    if initial <= 0:
        return math.inf
    below = np.flatnonzero(slopes < slope_fraction * initial)
    if len(below) == 0:
        return math.inf
    return float(strain[below[0]])


# ---------------------------------------------------------------------------
# artifact writers


def write_curve_csv(samples: Iterable[CurveSample], path) -> None:
    """Curve CSV: step,strain,stress,broken,new,plastic_fraction."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("step,strain,stress,broken,new,plastic_fraction\n")
        for s in samples:
            fh.write(
                f"{s.step},{s.applied_strain!r},{s.mean_effective_stress!r},"
                f"{s.broken_bonds},{s.new_bonds},{s.plastic_fraction!r}\n"
            )


def write_events_jsonl(events: Iterable[Event], path) -> None:
    """Event log JSONL: {"step":..,"kind":..,"id":..,"detail":..} per line."""
    import json

    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ev in events:
            fh.write(
                json.dumps(
                    {"step": ev.step, "kind": ev.kind, "id": ev.ref_id, "detail": ev.detail},
                    separators=(",", ":"),
                )
                + "\n"
            )
