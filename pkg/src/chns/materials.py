"""Nondimensional groups, mixture material laws and the stabilization scale.

Density and viscosity interpolate linearly in the phase field; both apply the
saturation pullback (clamping the phase field to [-1, 1]) so that overshoots
of the discrete solution never produce negative material properties.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

TAU_RADICAND_FLOOR = 1e-30


def auto_peclet(cn: float) -> float:
    """Diffuse-interface scaling 1/Pe = 3 Cn^2."""
    return 1.0 / (3.0 * cn ** 2)


@dataclass
class PhysicalParams:
    """Nondimensional groups of the two-phase system.

    ``rho_ratio`` and ``nu_ratio`` are the minus-phase properties divided by
    the plus-phase (normalizing) ones, so the plus phase has density and
    viscosity exactly one.
    """

    re: float
    we: float
    cn: float
    pe: float
    fr: float
    rho_ratio: float
    nu_ratio: float
    gravity_dir: tuple = (0.0, -1.0)
    mobility: float = 1.0
    c_i: float = 6.0
    c_phi: float = 6.0  # stored for completeness; not used by any form

    def __post_init__(self):
        for name in ("re", "we", "cn", "pe", "fr", "rho_ratio", "nu_ratio"):
            if getattr(self, name) <= 0.0:
                raise ConfigError(f"parameter {name} must be positive")
        g = np.asarray(self.gravity_dir, dtype=float)
        if abs(np.linalg.norm(g) - 1.0) > 1e-12:
            raise ConfigError("gravity_dir must be a unit vector")
        self.gravity_dir = tuple(g)

    # Interpolation coefficients rho = alpha*phi + beta, eta = gamma*phi + xi.
    @property
    def alpha(self) -> float:
        return (1.0 - self.rho_ratio) / 2.0

    @property
    def beta(self) -> float:
        return (1.0 + self.rho_ratio) / 2.0

    @property
    def gamma(self) -> float:
        return (1.0 - self.nu_ratio) / 2.0

    @property
    def xi(self) -> float:
        return (1.0 + self.nu_ratio) / 2.0

    @property
    def flux_coefficient(self) -> float:
        """J = flux_coefficient * grad(mu): (rho_- - rho_+)/(2 rho_+ Cn)."""
        return -self.alpha / self.cn

    @property
    def gravity(self) -> np.ndarray:
        return np.asarray(self.gravity_dir, dtype=float)


def saturate(phi):
    """Pullback of the phase field onto [-1, 1] for material evaluation."""
    return np.clip(phi, -1.0, 1.0)


def mixture_density(phi, params: PhysicalParams):
    return params.alpha * saturate(phi) + params.beta


def mixture_viscosity(phi, params: PhysicalParams):
    return params.gamma * saturate(phi) + params.xi


def free_energy(phi):
    """Double-well density psi = (phi^2 - 1)^2 / 4."""
    phi = np.asarray(phi, dtype=float)
    return (phi ** 2 - 1.0) ** 2 / 4.0


def free_energy_prime(phi):
    phi = np.asarray(phi, dtype=float)
    return phi ** 3 - phi


def free_energy_second(phi):
    phi = np.asarray(phi, dtype=float)
    return 3.0 * phi ** 2 - 1.0


def theta_average(old, new):
    """Midpoint average of two time levels."""
    return 0.5 * (np.asarray(old) + np.asarray(new))


def extrapolated_velocity(u_k, u_km1, mode: str = "minus"):
    """Advecting velocity extrapolated to the half step from known levels.

    ``minus`` is the consistent Adams-Bashforth form (3 u^k - u^{k-1}) / 2;
    ``plus`` reproduces the (3 u^k + u^{k-1}) / 2 variant for comparison.
    """
    if mode == "minus":
        return 1.5 * np.asarray(u_k) - 0.5 * np.asarray(u_km1)
    if mode == "plus":
        return 1.5 * np.asarray(u_k) + 0.5 * np.asarray(u_km1)
    raise ConfigError(f"unknown extrapolation mode {mode!r}")


def compute_tau_m(metric_diag, dt, uc, jc, rho, eta, params: PhysicalParams):
    """Element stabilization time scale.

    tau = (4/dt^2 + u.G.u + (1/(rho Pe)) u.G.J + C_I (eta/(rho Re))^2 G:G)^{-1/2}

    ``metric_diag`` holds the diagonal metric entries (2/h_j)^2 and broadcasts
    against per-quad-point velocity/flux arrays whose last axis is d.
    """
    if dt <= 0.0:
        raise ConfigError("dt must be positive")
    g = np.asarray(metric_diag, dtype=float)
    uc = np.asarray(uc, dtype=float)
    jc = np.asarray(jc, dtype=float)
    rho = np.asarray(rho, dtype=float)
    eta = np.asarray(eta, dtype=float)
    transient = 4.0 / dt ** 2
    advective = np.sum(uc * g * uc, axis=-1)
    fluxterm = np.sum(uc * g * jc, axis=-1) / (rho * params.pe)
    gg = np.sum(g * g, axis=-1)
    viscous = params.c_i * (eta / (rho * params.re)) ** 2 * gg
    radicand = np.maximum(transient + advective + fluxterm + viscous,
                          TAU_RADICAND_FLOOR)
    return 1.0 / np.sqrt(radicand)
