"""Problem setups: manufactured-solution verification, rising bubble,
Rayleigh-Taylor, and the interface-band refinement indicator.

The manufactured velocity derives from a stream function, so it is exactly
solenoidal and vanishes on the unit-square boundary; phase field and
chemical potential share one cosine product.  Forcing terms are the analytic
residuals of the convective-form governing equations and enter every weak
form additively, so the manufactured fields solve the forced system exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .materials import (PhysicalParams, auto_peclet, free_energy_prime,
                        mixture_density, mixture_viscosity)
from .nodetable import NodeTable
from .octree import COARSEN, KEEP, REFINE, Octree


# ---------------------------------------------------------------------------
# Manufactured solution


def mms_exact(x, t):
    """Exact fields: v from a stream function, p and phi/mu cosine products."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    sx, cx = np.sin(np.pi * x[:, 0]), np.cos(np.pi * x[:, 0])
    sy, cy = np.sin(np.pi * x[:, 1]), np.cos(np.pi * x[:, 1])
    s2x, s2y = np.sin(2 * np.pi * x[:, 0]), np.sin(2 * np.pi * x[:, 1])
    s = np.sin(t)
    v = np.stack([np.pi * sx ** 2 * s2y * s, -np.pi * s2x * sy ** 2 * s], axis=1)
    p = cx * sy * s
    phi = cx * cy * s
    return dict(v=v, p=p, phi=phi, mu=phi.copy())


def mms_forcing(x, t, params: PhysicalParams, mode: str = "div-phiphi"):
    """Analytic forcing of the convective-form equations at the exact fields.

    Returns momentum (m, d), ch (m,) and potential (m,) forcings; the
    potential equation needs one because mu is manufactured independently of
    psi'(phi) - Cn^2 lap(phi).
    """
    if mode == "none":
        raise ConfigError("the manufactured-solution case requires a forcing mode")
    if mode not in ("div-phiphi", "phi-grad-mu"):
        raise ConfigError(f"unknown forcing mode {mode!r}")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    pi = np.pi
    sx, cx = np.sin(pi * x[:, 0]), np.cos(pi * x[:, 0])
    sy, cy = np.sin(pi * x[:, 1]), np.cos(pi * x[:, 1])
    s2x, c2x = np.sin(2 * pi * x[:, 0]), np.cos(2 * pi * x[:, 0])
    s2y, c2y = np.sin(2 * pi * x[:, 1]), np.cos(2 * pi * x[:, 1])
    s, ct = np.sin(t), np.cos(t)

    v1 = pi * sx ** 2 * s2y * s
    v2 = -pi * s2x * sy ** 2 * s
    v = np.stack([v1, v2], axis=1)
    vt = np.stack([pi * sx ** 2 * s2y * ct, -pi * s2x * sy ** 2 * ct], axis=1)
    grad_v = np.empty(x.shape[:1] + (2, 2))
    grad_v[:, 0, 0] = pi ** 2 * s2x * s2y * s
    grad_v[:, 0, 1] = 2 * pi ** 2 * sx ** 2 * c2y * s
    grad_v[:, 1, 0] = -2 * pi ** 2 * c2x * sy ** 2 * s
    grad_v[:, 1, 1] = -pi ** 2 * s2x * s2y * s
    lap_v = np.stack([2 * pi ** 3 * s2y * s * (2 * c2x - 1),
                      2 * pi ** 3 * s2x * s * (1 - 2 * c2y)], axis=1)

    cxy = cx * cy
    phi = cxy * s
    phi_t = cxy * ct
    grad_phi = np.stack([-pi * sx * cy * s, -pi * cx * sy * s], axis=1)
    lap_phi = -2 * pi ** 2 * cxy * s
    hess = np.empty(x.shape[:1] + (2, 2))
    hess[:, 0, 0] = -pi ** 2 * cxy * s
    hess[:, 1, 1] = -pi ** 2 * cxy * s
    hess[:, 0, 1] = pi ** 2 * sx * sy * s
    hess[:, 1, 0] = hess[:, 0, 1]
    grad_mu, lap_mu = grad_phi, lap_phi

    grad_p = np.stack([-pi * sx * sy * s, pi * cx * cy * s], axis=1)

    rho = mixture_density(phi, params)
    eta = mixture_viscosity(phi, params)
    grad_eta = params.gamma * grad_phi
    flux = params.flux_coefficient * grad_mu

    conv = np.einsum("mij,mj->mi", grad_v, v)
    fluxconv = np.einsum("mij,mj->mi", grad_v, flux)
    visc = (np.einsum("mij,mj->mi", grad_v, grad_eta)
            + eta[:, None] * lap_v)
    if mode == "div-phiphi":
        st = (params.cn / params.we) * (
            np.einsum("mij,mj->mi", hess, grad_phi)
            + grad_phi * lap_phi[:, None])
    else:
        st = (phi[:, None] * grad_mu) / (params.cn * params.we)
    momentum_lhs = (rho[:, None] * (vt + conv)
                    + fluxconv / params.pe
                    + st
                    + grad_p
                    - visc / params.re
                    - rho[:, None] * params.gravity[None, :] / params.fr)

    ch_lhs = (phi_t + np.einsum("mi,mi->m", v, grad_phi)
              - lap_mu / (params.pe * params.cn))
    mu_lhs = -phi + free_energy_prime(phi) - params.cn ** 2 * lap_phi

    return dict(momentum=-momentum_lhs, ch=-ch_lhs, potential=-mu_lhs)


MMS_PARAMS = dict(re=10.0, we=1.0, cn=1.0, pe=3.0, fr=1.0,
                  rho_ratio=0.85, nu_ratio=1.0)


# ---------------------------------------------------------------------------
# Case specification


@dataclass
class CaseSpec:
    """Everything needed to build a run: domain, physics, mesh levels,
    initial fields, boundary kind, time stepping and forcing mode."""

    case_id: str
    domain: tuple
    root_grid: tuple
    params: PhysicalParams
    dt: float
    n_steps: int
    level_bkg: int
    level_wall: int
    level_interface: int
    max_depth: int
    amr: bool = False
    remesh_every: int = 5
    forcing_mode: str = "none"
    boundary_kind: str = "noslip"   # noslip | free-slip-sides | mms
    initial_pressure: str = "zero"  # zero | hydrostatic

    def __post_init__(self):
        if not (self.level_bkg <= self.level_wall <= self.level_interface
                <= self.max_depth):
            raise ConfigError("AMR levels must satisfy "
                              "bkg <= wall <= interface <= max_depth")
        if self.dt <= 0 or self.n_steps < 0:
            raise ConfigError("dt must be positive and n_steps nonnegative")

    @property
    def end_time(self):
        return self.dt * self.n_steps

    def initial_phi(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.case_id == "MMS":
            return mms_exact(x, 0.0)["phi"]
        if self.case_id in ("Bubble1", "Bubble2"):
            r = np.sqrt((x[:, 0] - 1.0) ** 2 + (x[:, 1] - 1.0) ** 2)
            return np.tanh((r - 0.5) / (np.sqrt(2.0) * self.params.cn))
        if self.case_id == "RT2D":
            l = 0.5 * (self.domain[1][1] + self.domain[0][1])
            g = 0.05 * np.cos(2 * np.pi * x[:, 0])
            return np.tanh(np.sqrt(2.0) * (x[:, 1] - l - g) / self.params.cn)
        raise ConfigError(f"unknown case {self.case_id!r}")

    def forcing(self):
        if self.case_id != "MMS" or self.forcing_mode == "none":
            return None
        return lambda x, t: mms_forcing(x, t, self.params, self.forcing_mode)

    def interface_width_cells(self):
        """Diffuse-interface width over the finest cell size (resolution guard)."""
        hi = np.asarray(self.domain[1], float)
        lo = np.asarray(self.domain[0], float)
        h_fine = ((hi - lo) / np.asarray(self.root_grid)
                  / (1 << self.level_interface)).min()
        return self.params.cn / h_fine


def mms_setup(level=7, dt=0.05, n_steps=None, end_time=None,
              forcing_mode="div-phiphi", pe=None, **overrides) -> CaseSpec:
    """Unit-square manufactured-solution case on a uniform mesh."""
    base = dict(MMS_PARAMS)
    base.update(overrides)
    if pe is not None:
        base["pe"] = pe
    params = PhysicalParams(gravity_dir=(0.0, -1.0), **base)
    if end_time is not None:
        n_steps = max(1, round(end_time / dt))
        dt = end_time / n_steps
    elif n_steps is None:
        n_steps = 10
    return CaseSpec(case_id="MMS", domain=((0.0, 0.0), (1.0, 1.0)),
                    root_grid=(1, 1), params=params, dt=dt, n_steps=n_steps,
                    level_bkg=level, level_wall=level, level_interface=level,
                    max_depth=level, amr=False, forcing_mode=forcing_mode,
                    boundary_kind="mms", initial_pressure="zero")


def bubble_setup(case=1, cn=None, levels=None, dt=None, n_steps=None,
                 amr=False) -> CaseSpec:
    """Rising-bubble benchmark on [0,2]x[0,4]: bubble of diameter 1 at (1,1),
    heavy continuous phase phi = +1 outside."""
    if case == 1:
        params = dict(re=35.0, we=10.0, fr=1.0, rho_ratio=0.1, nu_ratio=0.1)
        cn = 1e-2 if cn is None else cn
        dt = 2.5e-3 if dt is None else dt
    elif case == 2:
        params = dict(re=35.0, we=125.0, fr=1.0, rho_ratio=1e-3, nu_ratio=1e-2)
        cn = 5e-3 if cn is None else cn
        dt = 1e-3 if dt is None else dt
    else:
        raise ConfigError("bubble case must be 1 or 2")
    p = PhysicalParams(cn=cn, pe=auto_peclet(cn), gravity_dir=(0.0, -1.0),
                       **params)
    if levels is None:
        levels = (7, 7, 7)
    lb, lw, li = levels
    n_steps = 200 if n_steps is None else n_steps
    return CaseSpec(case_id=f"Bubble{case}", domain=((0.0, 0.0), (2.0, 4.0)),
                    root_grid=(1, 2), params=p, dt=dt, n_steps=n_steps,
                    level_bkg=lb, level_wall=lw, level_interface=li,
                    max_depth=li, amr=amr, boundary_kind="free-slip-sides",
                    initial_pressure="hydrostatic")


def rt2d_setup(at=0.5, cn=0.02, levels=(4, 5, 7), dt=1e-3, n_steps=200,
               re=3000.0, we=100.0, amr=True) -> CaseSpec:
    """Rayleigh-Taylor strip [0,1]x[0,4] at desk scale, heavy fluid on top."""
    if not 0.0 < at < 1.0:
        raise ConfigError("Atwood number must lie in (0, 1)")
    rho_ratio = (1.0 - at) / (1.0 + at)
    p = PhysicalParams(re=re, we=we, cn=cn, pe=auto_peclet(cn), fr=1.0,
                       rho_ratio=rho_ratio, nu_ratio=1.0,
                       gravity_dir=(0.0, -1.0))
    lb, lw, li = levels
    return CaseSpec(case_id="RT2D", domain=((0.0, 0.0), (1.0, 4.0)),
                    root_grid=(1, 4), params=p, dt=dt, n_steps=n_steps,
                    level_bkg=lb, level_wall=lw, level_interface=li,
                    max_depth=li, amr=amr, boundary_kind="noslip",
                    initial_pressure="hydrostatic")


# ---------------------------------------------------------------------------
# Interface-band refinement indicator


INTERFACE_BAND = 0.95


def interface_refine_indicator(tree: Octree, table: NodeTable, phi,
                               levels) -> np.ndarray:
    """One-level refinement flags steering leaves toward their target level:
    the interface level where any nodal |phi| <= 0.95, the wall level for
    wall-adjacent leaves, the background level elsewhere."""
    lb, lw, li = levels
    from .assembly import gather_local
    loc = gather_local(table, phi, 1)[:, :, 0]
    near_interface = np.any(np.abs(loc) <= INTERFACE_BAND, axis=1)
    sizes = tree.cell_sizes_lattice()
    shape = tree.lattice_shape
    on_wall = np.zeros(tree.n_leaves, dtype=bool)
    for a in range(tree.d):
        on_wall |= (tree.anchors[:, a] == 0)
        on_wall |= (tree.anchors[:, a] + sizes == shape[a])
    target = np.full(tree.n_leaves, lb, dtype=np.int64)
    target = np.maximum(target, np.where(on_wall, lw, lb))
    target = np.maximum(target, np.where(near_interface, li, lb))
    flags = np.full(tree.n_leaves, KEEP, dtype=np.int64)
    flags[tree.levels < target] = REFINE
    flags[tree.levels > target] = COARSEN
    return flags
