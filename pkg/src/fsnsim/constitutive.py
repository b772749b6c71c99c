"""Elasto-plastic material laws for the tag network.

Two stress/strain channels run in parallel: the phonon channel uses
symmetric 3x3 tensors (conventional lattice distortion) and the phason
channel general 3x3 tensors (tag-rearrangement degrees of freedom). The
scalar state combines them as

    S_eff = S_e + alpha * ||K||_F

with S_e the von Mises measure of the phonon deviator. The laws provided:

* power-law creep rate, in the as-typeset orientation (reference stress
  over applied stress) with an ``inverted`` flag for the conventional form;
* yield surface  Omega = S_eff - Y,  Y constant or linearly hardening;
* incremental flow: strain rates proportional to dS_eff times the surface
  gradients, scaled by a clustering modulus that is either a constant or
  the tangent modulus of the power-law effective curve (which makes the
  integrated increments match the total-deformation relation under
  monotonic proportional loading);
* total-deformation relation: deviatoric strains proportional to deviatoric
  stresses through 3*eps_eff / (2*S_eff), with a linear bulk closure for
  the volumetric parts of both channels.

Everything here is a pure function of explicit state; hardening history is
the caller's to advance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ValidationError

_EYE = np.eye(3)


def deviator(t: np.ndarray) -> np.ndarray:
    """Traceless part of a 3x3 tensor."""
    t = np.asarray(t, dtype=float)
    return t - (np.trace(t) / 3.0) * _EYE


def symmetrize(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    return 0.5 * (t + t.T)


def von_mises(s: np.ndarray) -> float:
    """sqrt(3/2 * dev(s) : dev(s))."""
    d = deviator(s)
    return math.sqrt(1.5 * float(np.tensordot(d, d)))


def frobenius(k: np.ndarray) -> float:
    k = np.asarray(k, dtype=float)
    return math.sqrt(float(np.tensordot(k, k)))


def _check_phonon(t: np.ndarray, what: str) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if t.shape != (3, 3):
        raise ValidationError(f"{what} must be a 3x3 tensor, got shape {t.shape}")
    if not np.all(np.isfinite(t)):
        raise ValidationError(f"{what} has non-finite entries")
    if not np.array_equal(t, t.T):
        raise ValidationError(f"{what} must be exactly symmetric")
    return t


def _check_phason(t: np.ndarray, what: str) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if t.shape != (3, 3):
        raise ValidationError(f"{what} must be a 3x3 tensor, got shape {t.shape}")
    if not np.all(np.isfinite(t)):
        raise ValidationError(f"{what} has non-finite entries")
    return t


@dataclass
class StressState:
    """Phonon stress (symmetric) and phason stress (general) tensors."""

    phonon: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    phason: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))

    def __post_init__(self):
        self.phonon = _check_phonon(self.phonon, "phonon stress")
        self.phason = _check_phason(self.phason, "phason stress")


@dataclass
class StrainState:
    """Phonon strain (symmetric) and phason strain (general) tensors."""

    phonon: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    phason: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))

    def __post_init__(self):
        self.phonon = _check_phonon(self.phonon, "phonon strain")
        self.phason = _check_phason(self.phason, "phason strain")


@dataclass(frozen=True)
class CreepParams:
    """Power-law creep: rate = B * (s_hat / s)**m as typeset, or inverted."""

    B: float
    m: float
    s_hat: float
    orientation: str = "as_printed"

    def __post_init__(self):
        if self.B <= 0:
            raise ValidationError(f"creep rate scale B must be > 0, got {self.B}")
        if self.s_hat <= 0:
            raise ValidationError(f"reference stress must be > 0, got {self.s_hat}")
        if self.orientation not in ("as_printed", "inverted"):
            raise ValidationError(
                f"orientation must be 'as_printed' or 'inverted', got {self.orientation!r}"
            )


@dataclass
class YieldModel:
    """Yield limit, either constant or hardening linearly in the history k."""

    s_y: float
    mode: str = "perfect"
    H: float = 0.0
    k: float = 0.0

    def __post_init__(self):
        if self.s_y <= 0:
            raise ValidationError(f"yield stress must be > 0, got {self.s_y}")
        if self.H < 0:
            raise ValidationError(f"hardening modulus must be >= 0, got {self.H}")
        if self.k < 0:
            raise ValidationError(f"hardening parameter must be >= 0, got {self.k}")
        if self.mode not in ("perfect", "linear_hardening"):
            raise ValidationError(
                f"mode must be 'perfect' or 'linear_hardening', got {self.mode!r}"
            )

    def limit(self, k: float | None = None) -> float:
        """Current yield limit Y(k)."""
        if self.mode == "perfect":
            return self.s_y
        return self.s_y + self.H * (self.k if k is None else k)


@dataclass(frozen=True)
class FlowModel:
    """Clustering modulus selection for the incremental flow rule."""

    modulus_mode: str = "constant"
    K0: float = 1.0

    def __post_init__(self):
        if self.K0 <= 0:
            raise ValidationError(f"constant modulus must be > 0, got {self.K0}")
        if self.modulus_mode not in ("constant", "ramberg_osgood_consistent"):
            raise ValidationError(
                "modulus_mode must be 'constant' or 'ramberg_osgood_consistent', "
                f"got {self.modulus_mode!r}"
            )


@dataclass(frozen=True)
class OntologyConstants:
    """Constants of the effective stress-strain curve and its tensor closure.

    With ``continuous_at_limit`` (the default) the power-branch coefficient
    is recomputed as A = s_0**(1 - n) / E_el so the two branches meet at the
    proportional limit.
    """

    s_0: float
    A: float
    n: float
    E_el: float
    bulk: float
    phason_coupling: float = 0.0
    continuous_at_limit: bool = True

    def __post_init__(self):
        for name in ("s_0", "A", "n", "E_el", "bulk"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"constant {name} must be > 0, got {getattr(self, name)}")
        if self.n < 1:
            raise ValidationError(f"power exponent must be >= 1, got {self.n}")
        if self.phason_coupling < 0:
            raise ValidationError(
                f"phason coupling must be >= 0, got {self.phason_coupling}"
            )
        if self.continuous_at_limit:
            object.__setattr__(self, "A", self.s_0 ** (1.0 - self.n) / self.E_el)

    @property
    def shear_modulus(self) -> float:
        # E_el / 3 makes the linear isotropic law agree with the elastic
        # branch eps_eff = S_eff / E_el on deviatoric states.
        return self.E_el / 3.0


class EffectiveStress(NamedTuple):
    S_e: float
    fK: float
    S_eff: float


@dataclass(frozen=True)
class YieldGradients:
    phonon: np.ndarray
    phason: np.ndarray
    phonon_degenerate: bool
    phason_degenerate: bool


def creep_rate(s: float, p: CreepParams) -> float:
    """Scalar creep strain rate at effective stress ``s`` (> 0 required)."""
    if s <= 0:
        raise ValidationError(f"creep rate needs a positive stress, got {s}")
    ratio = p.s_hat / s if p.orientation == "as_printed" else s / p.s_hat
    return p.B * ratio**p.m


def effective_stress(st: StressState, c: OntologyConstants) -> EffectiveStress:
    """Von Mises phonon measure, phason coupling term, and their sum."""
    s_e = von_mises(st.phonon)
    f_k = c.phason_coupling * frobenius(st.phason)
    return EffectiveStress(S_e=s_e, fK=f_k, S_eff=s_e + f_k)


def yield_function(s_eff: float, y: YieldModel) -> float:
    """Omega = S_eff - Y(k); non-negative on or beyond the yield surface."""
    return s_eff - y.limit()


def yield_gradients(st: StressState, c: OntologyConstants) -> YieldGradients:
    """Analytic gradients of Omega with respect to both stress channels.

    At degenerate points (vanishing phonon deviator or phason norm) the
    corresponding gradient is zero and flagged.
    """
    s_e = von_mises(st.phonon)
    if s_e > 0.0:
        grad_s = 1.5 * deviator(st.phonon) / s_e
        s_degenerate = False
    else:
        grad_s = np.zeros((3, 3))
        s_degenerate = True
    k_norm = frobenius(st.phason)
    if k_norm > 0.0:
        grad_k = c.phason_coupling * st.phason / k_norm
        k_degenerate = False
    else:
        grad_k = np.zeros((3, 3))
        k_degenerate = True
    return YieldGradients(
        phonon=grad_s,
        phason=grad_k,
        phonon_degenerate=s_degenerate,
        phason_degenerate=k_degenerate,
    )


def clustering_modulus(s_eff: float, f: FlowModel, c: OntologyConstants) -> float:
    """K(S_eff): constant, or the tangent modulus of the power-law branch."""
    if f.modulus_mode == "constant":
        return f.K0
    # d(eps_eff)/dS on the power branch is A*n*S**(n-1); its inverse is the
    # tangent modulus. S_eff = 0 with n > 1 gives an unbounded modulus,
    # which callers never reach (flow requires Omega >= 0 so S_eff >= s_y).
    slope = c.A * c.n * s_eff ** (c.n - 1.0)
    if slope <= 0.0:
        return math.inf
    return 1.0 / slope


def plastic_flow_increment(
    st: StressState,
    dS_eff: float,
    f: FlowModel,
    y: YieldModel,
    c: OntologyConstants,
) -> tuple[np.ndarray, np.ndarray]:
    """Strain increments of the flow rule for an effective-stress increment.

    Elastic states (Omega < 0) and neutral/unloading increments
    (dS_eff <= 0) produce zero tensors. Otherwise both channels flow along
    the yield-surface gradients scaled by dS_eff / K(S_eff).
    """
    eff = effective_stress(st, c)
    if yield_function(eff.S_eff, y) < 0.0 or dS_eff <= 0.0:
        return np.zeros((3, 3)), np.zeros((3, 3))
    modulus = clustering_modulus(eff.S_eff, f, c)
    if modulus <= 0.0:
        raise ValidationError(f"clustering modulus must be positive, got {modulus}")
    if math.isinf(modulus):
        return np.zeros((3, 3)), np.zeros((3, 3))
    grads = yield_gradients(st, c)
    scale = dS_eff / modulus
    return scale * grads.phonon, scale * grads.phason


def effective_strain(s_eff: float, c: OntologyConstants) -> float:
    """The effective stress-strain curve: linear to s_0, power beyond."""
    if s_eff < 0:
        raise ValidationError(f"effective stress must be >= 0, got {s_eff}")
    if s_eff <= c.s_0:
        return s_eff / c.E_el
    return c.A * s_eff**c.n


def total_deformation_state(st: StressState, c: OntologyConstants) -> StrainState:
    """Total strains from stresses via the deformation-theory relation.

    Deviatoric strains of both channels are (3*eps_eff / (2*S_eff)) times
    the corresponding deviatoric stresses; volumetric parts close linearly
    through the bulk modulus. A zero-S_eff state maps to zero strain.
    """
    eff = effective_stress(st, c)
    eps_kk = np.trace(st.phonon) / (3.0 * c.bulk)
    w_kk = np.trace(st.phason) / (3.0 * c.bulk)
    if eff.S_eff == 0.0:
        factor = 0.0
    else:
        factor = 1.5 * effective_strain(eff.S_eff, c) / eff.S_eff
    phonon = factor * deviator(st.phonon) + (eps_kk / 3.0) * _EYE
    phason = factor * deviator(st.phason) + (w_kk / 3.0) * _EYE
    return StrainState(phonon=symmetrize(phonon), phason=phason)
