"""Projection-based time stepping for the two-phase system.

Each time step runs two passes of [Cahn-Hilliard Newton solve -> velocity
prediction -> pressure Poisson -> velocity update].  The prediction and the
two projection solves are stabilized with the residual-based fine-scale
closure rho*v_f = -tau_m * R_m; the Cahn-Hilliard block is fully implicit
with midpoint averages of both phase field and chemical potential.

Pressure is stored with the Weber-number coefficient absorbed, so the
assembled forms carry plain pressure gradients.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .assembly import assemble_from_element_matrices, gather_local, scatter_add
from .errors import ConfigError, ContractError, SolveError
from .fem import shape_table
from .linalg import SolverConfig, bicgstab_solve, cg_solve, newton_solve
from .materials import (PhysicalParams, compute_tau_m, extrapolated_velocity,
                        free_energy, free_energy_prime, free_energy_second,
                        mixture_density, mixture_viscosity, theta_average)
from .nodetable import NodeTable
from .octree import Octree


@dataclass
class BlockTimings:
    """Per-step wall time (seconds) spent in each solver block."""

    ch: float = 0.0
    vp: float = 0.0
    pp: float = 0.0
    vu: float = 0.0
    remesh: float = 0.0
    equation_update: float = 0.0

    def __post_init__(self):
        if min(self.ch, self.vp, self.pp, self.vu, self.remesh,
               self.equation_update) < 0:
            raise ContractError("timings must be nonnegative")


@dataclass
class MixtureState:
    """Nodal fields of one time level (velocities solenoidal, phi unclipped)."""

    u_k: np.ndarray
    u_km1: np.ndarray
    p_k: np.ndarray
    phi_k: np.ndarray
    mu_k: np.ndarray
    v_kp1: np.ndarray = None
    t: float = 0.0
    step: int = 0

    @classmethod
    def quiescent(cls, n, d, phi=None, mu=None):
        z = np.zeros((n, d))
        return cls(u_k=z.copy(), u_km1=z.copy(), p_k=np.zeros(n),
                   phi_k=np.zeros(n) if phi is None else np.asarray(phi, float).copy(),
                   mu_k=np.zeros(n) if mu is None else np.asarray(mu, float).copy(),
                   v_kp1=z.copy())

    def copy(self):
        return MixtureState(u_k=self.u_k.copy(), u_km1=self.u_km1.copy(),
                            p_k=self.p_k.copy(), phi_k=self.phi_k.copy(),
                            mu_k=self.mu_k.copy(),
                            v_kp1=None if self.v_kp1 is None else self.v_kp1.copy(),
                            t=self.t, step=self.step)


@dataclass
class VelocityBC:
    """Dirichlet constraints for velocity: one mask per component plus a value
    callback values(coords, t) -> (n, d)."""

    masks: list
    values: callable = None

    def value_array(self, coords, t, d):
        if self.values is None:
            return np.zeros((coords.shape[0], d))
        return np.asarray(self.values(coords, t), dtype=float)


@dataclass
class SolverSuite:
    """One SolverConfig per block."""

    momentum: SolverConfig = field(default_factory=lambda: SolverConfig(rtol=1e-10, atol=1e-12))
    pp: SolverConfig = field(default_factory=lambda: SolverConfig(rtol=1e-10, atol=1e-12))
    vupdate: SolverConfig = field(default_factory=lambda: SolverConfig(rtol=1e-10, atol=1e-12))
    ch: SolverConfig = field(default_factory=lambda: SolverConfig(
        rtol=1e-12, atol=1e-13, newton_rtol=1e-10, newton_atol=1e-12,
        preconditioner="fieldsplit2"))


@dataclass
class SchemeOptions:
    """Scheme variants and hooks.

    uhat_mode: "minus" (consistent extrapolation, default) or "plus".
    forcing_mode: "div-phiphi" (conservative surface tension), "phi-grad-mu"
        (non-conservative variant) or "none".
    forcing: callable(x, t) -> dict(momentum=(m, d), ch=(m,), potential=(m,))
        evaluated at quadrature points, entering the weak forms additively.
    include_vms_stab: drop the pressure-Poisson fine-scale term when False
        (checkerboard diagnosis only; it is essential for stability).
    vu_fine_scale: subtract tau*R_m in the velocity update, folding the fine
        scales back into the updated velocity.  Off by default: at desk
        resolutions this feedback destabilizes the velocity/pressure pair
        over long step counts, while the pressure-Poisson term above carries
        the stabilization that matters.
    """

    uhat_mode: str = "minus"
    forcing_mode: str = "div-phiphi"
    forcing: callable = None
    include_vms_stab: bool = True
    vu_fine_scale: bool = False


class ElementOps:
    """Batched quadrature operations on all leaves for one Gauss rule."""

    def __init__(self, tree: Octree, nq: int):
        d = tree.d
        tab = shape_table(d, 1, nq)
        self.tab = tab
        self.d = d
        self.w = tab.quad_weights
        self.N = tab.values                      # (nq, nloc)
        h = tree.cell_h()                        # (n_e, d)
        self.jac = np.prod(h / 2.0, axis=1)      # (n_e,)
        scale = 2.0 / h                          # (n_e, d)
        self.dN = tab.gradients[None, :, :, :] * scale[:, None, None, :]
        self.metric = scale ** 2                 # (n_e, d) diagonal G
        origin = tree.cell_origin()
        self.xq = origin[:, None, :] + (tab.quad_points[None, :, :] + 1.0) * 0.5 * h[:, None, :]
        self.wjac = self.w[None, :] * self.jac[:, None]   # (n_e, nq)

    # Field evaluation ----------------------------------------------------
    def val(self, loc):
        return np.einsum("qa,ea->eq", self.N, loc)

    def vec_val(self, loc):
        return np.einsum("qa,eac->eqc", self.N, loc)

    def grad(self, loc):
        return np.einsum("eqaj,ea->eqj", self.dN, loc)

    def vec_grad(self, loc):
        """(n_e, nq, c, j) = d(loc_c)/dx_j."""
        return np.einsum("eqaj,eac->eqcj", self.dN, loc)

    # Weak-form integrals -> per-element contributions ---------------------
    def int_n(self, f):
        return np.einsum("eq,qa,eq->ea", self.wjac, self.N, f)

    def int_n_vec(self, fv):
        return np.einsum("eq,qa,eqc->eac", self.wjac, self.N, fv)

    def int_gradn_dot(self, g):
        return np.einsum("eq,eqaj,eqj->ea", self.wjac, self.dN, g)

    # Element matrices ------------------------------------------------------
    def mat_mass(self, c):
        return np.einsum("eq,qa,qb,eq->eab", self.wjac, self.N, self.N, c)

    def mat_conv(self, c, vel):
        vb = np.einsum("eqbj,eqj->eqb", self.dN, vel)
        return np.einsum("eq,qa,eqb,eq->eab", self.wjac, self.N, vb, c)

    def mat_stiff(self, c):
        return np.einsum("eq,eqaj,eqbj,eq->eab", self.wjac, self.dN, self.dN, c)

    def mat_streamline(self, test_vec, rho_over_dt, mvec):
        """(V.grad(N_a)) * [rho/dt N_b + m.grad(N_b)] integrated."""
        ta = np.einsum("eqaj,eqj->eqa", self.dN, test_vec)
        rb = np.einsum("eq,qb->eqb", rho_over_dt, self.N) \
            + np.einsum("eqbj,eqj->eqb", self.dN, mvec)
        return np.einsum("eq,eqa,eqb->eab", self.wjac, ta, rb)

    def int_streamline(self, test_vec, f):
        """Contribution of (V.grad(N_a)) * f for scalar per-qp f."""
        ta = np.einsum("eqaj,eqj->eqa", self.dN, test_vec)
        return np.einsum("eq,eqa,eq->ea", self.wjac, ta, f)


def momentum_strong_residual(point, params: PhysicalParams, dt: float):
    """Strong-form momentum residual R_m at evaluation points.

    ``point`` maps names to arrays broadcastable over leading axes with a
    trailing component axis where noted: rho, v_new (d), u_k (d), uhat (d),
    flux (d), grad_vtheta (d, d) = d(vtheta_i)/dx_j of the midpoint velocity,
    st (d) strong surface-tension term, grad_p (d), grad_eta (d),
    forcing (d, optional).
    """
    rho = np.asarray(point["rho"])
    g = params.gravity
    conv = np.einsum("...ij,...j->...i", point["grad_vtheta"], point["uhat"])
    fluxc = np.einsum("...ij,...j->...i", point["grad_vtheta"], point["flux"])
    visc = np.einsum("...ij,...j->...i", point["grad_vtheta"], point["grad_eta"])
    r = (rho[..., None] * (point["v_new"] - point["u_k"]) / dt
         + rho[..., None] * conv
         + fluxc / params.pe
         + point["st"]
         + point["grad_p"]
         - visc / params.re
         - rho[..., None] * g / params.fr)
    if "forcing" in point and point["forcing"] is not None:
        r = r + point["forcing"]
    return r


class ProjectionStepper:
    """Assembles and advances the block-iterated projection scheme on a
    fixed mesh."""

    def __init__(self, tree: Octree, table: NodeTable, params: PhysicalParams,
                 dt: float, velocity_bc: VelocityBC,
                 solvers: SolverSuite = None, options: SchemeOptions = None):
        if velocity_bc is None:
            raise ConfigError("velocity boundary specification is required")
        if dt <= 0:
            raise ConfigError("dt must be positive")
        self.tree = tree
        self.table = table
        self.params = params
        self.dt = float(dt)
        self.bc = velocity_bc
        self.solvers = solvers or SolverSuite()
        self.options = options or SchemeOptions()
        if self.options.forcing_mode not in ("div-phiphi", "phi-grad-mu", "none"):
            raise ConfigError(f"unknown forcing mode {self.options.forcing_mode!r}")
        self.d = tree.d
        self.n = table.n_nodes
        self.ops = ElementOps(tree, 2)
        self.ops_ch = ElementOps(tree, 3)
        # Lumped mass (shape-function integrals) for nodal gradient projection.
        lump = self.ops.int_n(np.ones_like(self.ops.wjac))
        self.lumped_mass = scatter_add(table, lump[:, :, None], 1)
        self.coords = table.coords[:table.n_nodes]

    # ------------------------------------------------------------------
    # Field helpers

    def _loc(self, x, ndof=1):
        loc = gather_local(self.table, x, ndof)
        return loc[:, :, 0] if ndof == 1 else loc

    def project_gradient(self, nodal_scalar) -> np.ndarray:
        """Lumped L2 projection of the element gradient onto the nodes."""
        loc = self._loc(nodal_scalar)
        g = self.ops.grad(loc)
        num = scatter_add(self.table, self.ops.int_n_vec(g), self.d)
        return (num.reshape(self.n, self.d)
                / self.lumped_mass.reshape(self.n, 1))

    def reconstructed_laplacian(self, vec_nodal) -> np.ndarray:
        """Element-wise Laplacian of a velocity field from first derivatives
        of the projected nodal gradient (cG(1) has no element second
        derivatives), (n_e, nq, d)."""
        n_e, nq = self.ops.wjac.shape
        out = np.zeros((n_e, nq, self.d))
        for i in range(self.d):
            g = self.project_gradient(vec_nodal[:, i])
            gg = self.ops.vec_grad(self._loc(g.reshape(-1), self.d))
            out[:, :, i] = np.einsum("eqjj->eq", gg)
        return out

    def _forcing_at(self, xq, t):
        if self.options.forcing is None:
            return None
        flat = xq.reshape(-1, self.d)
        out = self.options.forcing(flat, t)
        return {k: (None if v is None else np.asarray(v).reshape(
            xq.shape[0], xq.shape[1], -1)) for k, v in out.items()}

    # ------------------------------------------------------------------
    # Shared per-pass quadrature data

    def _pass_fields(self, u_k, u_km1, p_k, phi_k, phi_new, mu_k, mu_new, t_mid):
        ops = self.ops
        p = self.params
        phi_t = theta_average(phi_k, phi_new)
        mu_t = theta_average(mu_k, mu_new)
        eta_nodal = mixture_viscosity(phi_t, p)
        uhat = extrapolated_velocity(u_k, u_km1, self.options.uhat_mode)

        loc_phi_t = self._loc(phi_t)
        loc_mu_t = self._loc(mu_t)
        loc_uk = self._loc(u_k, self.d)
        loc_uhat = self._loc(uhat, self.d)
        loc_pk = self._loc(p_k)
        loc_eta = self._loc(eta_nodal)

        data = {}
        data["phi_t_q"] = ops.val(loc_phi_t)
        data["grad_phi_t"] = ops.grad(loc_phi_t)
        data["grad_mu_t"] = ops.grad(loc_mu_t)
        data["uk_q"] = ops.vec_val(loc_uk)
        data["grad_uk"] = ops.vec_grad(loc_uk)
        data["uhat_q"] = ops.vec_val(loc_uhat)
        data["grad_p"] = ops.grad(loc_pk)
        data["grad_eta"] = ops.grad(loc_eta)
        data["rho_q"] = mixture_density(data["phi_t_q"], p)
        data["eta_q"] = mixture_viscosity(data["phi_t_q"], p)
        data["flux_q"] = p.flux_coefficient * data["grad_mu_t"]
        data["tau_q"] = compute_tau_m(ops.metric[:, None, :], self.dt,
                                      data["uhat_q"], data["flux_q"],
                                      data["rho_q"], data["eta_q"], p)
        # Surface tension: weak data and strong reconstruction for R_m.
        if self.options.forcing_mode == "phi-grad-mu":
            st = (data["phi_t_q"][:, :, None] * data["grad_mu_t"]) / (p.cn * p.we)
            data["st_strong"] = st
            data["st_weak_gal"] = st           # plain Galerkin term (w, st)
            data["st_weak_grad"] = None
        else:
            gp = data["grad_phi_t"]
            data["st_weak_grad"] = (p.cn / p.we) * np.einsum("eqi,eqj->eqij", gp, gp)
            gnodal = self.project_gradient(phi_t)
            loc_g = self._loc(gnodal.reshape(-1), self.d)
            gq = ops.vec_val(loc_g)
            grad_g = ops.vec_grad(loc_g)      # (e, q, i, j)
            div_g = np.einsum("eqii->eq", grad_g)
            strong = np.einsum("eqij,eqj->eqi", grad_g, gq) \
                + gq * div_g[:, :, None]
            data["st_strong"] = (p.cn / p.we) * strong
            data["st_weak_gal"] = None
        fz = self._forcing_at(ops.xq, t_mid)
        data["f_mom"] = None if fz is None else fz.get("momentum")
        # Linear-in-v advective vector of the strong residual.
        data["m_q"] = (0.5 * data["rho_q"][:, :, None] * data["uhat_q"]
                       + data["flux_q"] / (2.0 * p.pe)
                       - data["grad_eta"] / (2.0 * p.re))
        # Constant part of R_m (independent of the new prediction).  The
        # viscous Laplacian is reconstructed at the extrapolated advecting
        # velocity (the midpoint velocity to the order of the scheme); the
        # grad(eta).grad(v) part stays split between matrix and rhs.
        point = dict(rho=data["rho_q"], v_new=np.zeros_like(data["uk_q"]),
                     u_k=data["uk_q"], uhat=data["uhat_q"], flux=data["flux_q"],
                     grad_vtheta=0.5 * data["grad_uk"], st=data["st_strong"],
                     grad_p=data["grad_p"], grad_eta=data["grad_eta"],
                     forcing=data["f_mom"])
        data["lap_uhat"] = self.reconstructed_laplacian(uhat)
        data["r_const"] = momentum_strong_residual(point, p, self.dt) \
            - data["eta_q"][:, :, None] * data["lap_uhat"] / p.re
        # Fine-scale test vector tau*(uhat/2 + J/(2 Pe rho)).
        data["vms_test"] = data["tau_q"][:, :, None] * (
            0.5 * data["uhat_q"]
            + data["flux_q"] / (2.0 * p.pe * data["rho_q"][:, :, None]))
        return data

    def _rm_full(self, data, v_nodal):
        """R_m evaluated at the solved prediction."""
        loc_v = self._loc(v_nodal, self.d)
        vq = self.ops.vec_val(loc_v)
        gv = self.ops.vec_grad(loc_v)
        lin = (data["rho_q"][:, :, None] * vq / self.dt
               + np.einsum("eqij,eqj->eqi", gv, data["m_q"]))
        return data["r_const"] + lin, vq, gv

    # ------------------------------------------------------------------
    # Block assemblies

    def assemble_velocity_prediction(self, data):
        """Linear system for the predicted velocity; one scalar operator reused
        for every component, one rhs per component."""
        ops = self.ops
        p = self.params
        rho, eta = data["rho_q"], data["eta_q"]
        mats = ops.mat_mass(rho / self.dt)
        mats += ops.mat_conv(0.5 * rho, data["uhat_q"])
        mats += ops.mat_conv(np.full_like(rho, 1.0 / (2.0 * p.pe)), data["flux_q"])
        mats += ops.mat_stiff(eta / (2.0 * p.re))
        mats += ops.mat_streamline(data["vms_test"], rho / self.dt, data["m_q"])
        a = assemble_from_element_matrices(self.table, mats, 1)

        conv_k = np.einsum("eqij,eqj->eqi", data["grad_uk"], data["uhat_q"])
        fluxconv_k = np.einsum("eqij,eqj->eqi", data["grad_uk"], data["flux_q"])
        g = p.gravity
        rhs = np.zeros((self.n, self.d))
        for i in range(self.d):
            known = (rho * data["uk_q"][:, :, i] / self.dt
                     - 0.5 * rho * conv_k[:, :, i]
                     - fluxconv_k[:, :, i] / (2.0 * p.pe)
                     - data["grad_p"][:, :, i]
                     + rho * g[i] / p.fr)
            if data["f_mom"] is not None:
                known = known - data["f_mom"][:, :, i]
            if data["st_weak_gal"] is not None:
                known = known - data["st_weak_gal"][:, :, i]
            contrib = ops.int_n(known)
            if data["st_weak_grad"] is not None:
                contrib += ops.int_gradn_dot(data["st_weak_grad"][:, :, i, :])
            contrib -= ops.int_gradn_dot(
                (eta / (2.0 * p.re))[:, :, None] * data["grad_uk"][:, :, i, :])
            contrib -= ops.int_streamline(data["vms_test"], data["r_const"][:, :, i])
            rhs[:, i] = scatter_add(self.table, contrib[:, :, None], 1)
        return a, rhs

    def assemble_pressure_poisson(self, data, v_nodal, p_k, include_stab=None):
        ops = self.ops
        if include_stab is None:
            include_stab = self.options.include_vms_stab
        inv_rho = 1.0 / data["rho_q"]
        mats = ops.mat_stiff(inv_rho)
        a = assemble_from_element_matrices(self.table, mats, 1)
        rm, vq, gv = self._rm_full(data, v_nodal)
        div_v = np.einsum("eqii->eq", gv)
        contrib = ops.int_n(-(2.0 / self.dt) * div_v)
        contrib += ops.int_gradn_dot(inv_rho[:, :, None] * data["grad_p"])
        if include_stab:
            contrib += ops.int_gradn_dot(
                -(2.0 / self.dt) * (data["tau_q"] * inv_rho)[:, :, None] * rm)
        b = scatter_add(self.table, contrib[:, :, None], 1)
        return a, b, rm

    def assemble_velocity_update(self, data, v_nodal, p_new, p_k, rm=None):
        ops = self.ops
        if rm is None:
            rm, vq, _ = self._rm_full(data, v_nodal)
        else:
            vq = ops.vec_val(self._loc(v_nodal, self.d))
        dp_loc = self._loc(np.asarray(p_new) - np.asarray(p_k))
        grad_dp = ops.grad(dp_loc)
        mats = ops.mat_mass(data["rho_q"])
        a = assemble_from_element_matrices(self.table, mats, 1)
        rhs = np.zeros((self.n, self.d))
        fine = rm if self.options.vu_fine_scale else np.zeros_like(rm)
        for i in range(self.d):
            f = (data["rho_q"] * vq[:, :, i]
                 - data["tau_q"] * fine[:, :, i]
                 - 0.5 * self.dt * grad_dp[:, :, i])
            rhs[:, i] = scatter_add(self.table, ops.int_n(f)[:, :, None], 1)
        return a, rhs

    # ------------------------------------------------------------------
    # Cahn-Hilliard block

    def _ch_qp(self, phi_k, mu_k, y, u_adv, t_mid):
        ops = self.ops_ch
        n = self.n
        yv = y.reshape(n, 2)
        phi_t = theta_average(phi_k, yv[:, 0])
        mu_t = theta_average(mu_k, yv[:, 1])
        out = dict(
            phi_new_q=ops.val(self._loc(yv[:, 0])),
            phi_k_q=ops.val(self._loc(phi_k)),
            phi_t_q=ops.val(self._loc(phi_t)),
            mu_t_q=ops.val(self._loc(mu_t)),
            grad_phi_t=ops.grad(self._loc(phi_t)),
            grad_mu_t=ops.grad(self._loc(mu_t)),
            u_adv_q=ops.vec_val(self._loc(u_adv, self.d)),
        )
        fz = self._forcing_at(ops.xq, t_mid)
        out["f_phi"] = None if fz is None else fz.get("ch")
        out["f_mu"] = None if fz is None else fz.get("potential")
        return out

    def ch_residual(self, phi_k, mu_k, y, u_adv, t_mid):
        """Interleaved residual [transport; potential] per node."""
        ops = self.ops_ch
        p = self.params
        q = self._ch_qp(phi_k, mu_k, y, u_adv, t_mid)
        kappa = 1.0 / (p.pe * p.cn)
        r_phi = ops.int_n((q["phi_new_q"] - q["phi_k_q"]) / self.dt)
        r_phi -= ops.int_gradn_dot(q["u_adv_q"] * q["phi_t_q"][:, :, None])
        r_phi += kappa * ops.int_gradn_dot(q["grad_mu_t"])
        if q["f_phi"] is not None:
            r_phi += ops.int_n(q["f_phi"][:, :, 0])
        r_mu = ops.int_n(-q["mu_t_q"] + free_energy_prime(q["phi_t_q"]))
        r_mu += p.cn ** 2 * ops.int_gradn_dot(q["grad_phi_t"])
        if q["f_mu"] is not None:
            r_mu += ops.int_n(q["f_mu"][:, :, 0])
        contrib = np.stack([r_phi, r_mu], axis=2)
        return scatter_add(self.table, contrib, 2)

    def ch_jacobian(self, phi_k, mu_k, y, u_adv, t_mid):
        ops = self.ops_ch
        p = self.params
        n_loc = ops.N.shape[1]
        q = self._ch_qp(phi_k, mu_k, y, u_adv, t_mid)
        kappa = 1.0 / (p.pe * p.cn)
        ones = np.ones_like(q["phi_t_q"])
        mass = ops.mat_mass(ones)
        stiff = ops.mat_stiff(ones)
        conv = ops.mat_conv(ones, q["u_adv_q"])  # N_a (u.grad N_b)
        # Transport row: d/dphi = M/dt - 0.5*conv^T ; d/dmu = kappa/2 K.
        # (grad N_a . u) N_b is the transpose of conv.
        convT = np.swapaxes(conv, 1, 2)
        j_pp = mass / self.dt - 0.5 * convT
        j_pm = 0.5 * kappa * stiff
        j_mp = 0.5 * ops.mat_mass(free_energy_second(q["phi_t_q"])) \
            + 0.5 * p.cn ** 2 * stiff
        j_mm = -0.5 * mass
        nld = 2 * n_loc
        mats = np.zeros((self.tree.n_leaves, nld, nld))
        mats[:, 0::2, 0::2] = j_pp
        mats[:, 0::2, 1::2] = j_pm
        mats[:, 1::2, 0::2] = j_mp
        mats[:, 1::2, 1::2] = j_mm
        return assemble_from_element_matrices(self.table, mats, 2)

    def solve_ch(self, phi_k, mu_k, u_adv, t_mid, y0=None):
        y0 = np.stack([phi_k, mu_k], axis=1).reshape(-1) if y0 is None else y0
        residual = lambda y: self.ch_residual(phi_k, mu_k, y, u_adv, t_mid)
        jacobian = lambda y: self.ch_jacobian(phi_k, mu_k, y, u_adv, t_mid)
        # The coupled phase/potential system is indefinite; retry with the
        # alternative block preconditioner before giving up.
        pcs = [self.solvers.ch.preconditioner]
        for alt in ("fieldsplit2", "nodeblock2", "bjacobi2", "none"):
            if alt not in pcs:
                pcs.append(alt)
        res = None
        for pc in pcs:
            cfg = replace(self.solvers.ch, preconditioner=pc)
            res = newton_solve(residual, jacobian, y0, cfg)
            if res.converged:
                break
        if not res.converged:
            raise SolveError(f"Cahn-Hilliard Newton failed: {res.status}",
                             block="ch", history=res.history)
        yv = res.x.reshape(self.n, 2)
        return yv[:, 0], yv[:, 1], res.iterations

    # ------------------------------------------------------------------
    # Dirichlet helpers and diagnostics

    def _apply_velocity_bc(self, a, rhs, t):
        values = self.bc.value_array(self.coords, t, self.d)
        systems = []
        for i in range(self.d):
            ai = a.copy()
            bi = ai.set_dirichlet_rows(self.bc.masks[i], values[:, i], rhs[:, i])
            systems.append((ai, bi))
        return systems

    def divergence_functional(self, u_nodal) -> np.ndarray:
        """Weak divergence vector d_a = (N_a, div u)."""
        gv = self.ops.vec_grad(self._loc(u_nodal, self.d))
        div = np.einsum("eqii->eq", gv)
        return scatter_add(self.table, self.ops.int_n(div)[:, :, None], 1)

    def initial_chemical_potential(self, phi) -> np.ndarray:
        """L2-consistent mu(0) = psi'(phi) - Cn^2 lap(phi) in weak form."""
        ops = self.ops_ch
        phi_q = ops.val(self._loc(phi))
        gphi = ops.grad(self._loc(phi))
        b = scatter_add(self.table, ops.int_n(free_energy_prime(phi_q))[:, :, None], 1)
        b += self.params.cn ** 2 * scatter_add(
            self.table, ops.int_gradn_dot(gphi)[:, :, None], 1)
        mass = assemble_from_element_matrices(
            self.table, ops.mat_mass(np.ones_like(phi_q)), 1)
        res = cg_solve(mass, b, config=SolverConfig(rtol=1e-12, atol=1e-14))
        if not res.converged:
            raise SolveError("initial chemical potential projection failed",
                             block="ch")
        return res.x

    def initial_hydrostatic_pressure(self, phi) -> np.ndarray:
        """Weak solve of grad p = rho g / Fr - surface tension (quiescent
        momentum balance, absorbed-pressure convention); without the Laplace
        jump across the interface the first steps slosh while the flow
        establishes it."""
        ops = self.ops
        p = self.params
        phi_q = ops.val(self._loc(phi))
        rho_q = mixture_density(phi_q, p)
        a = assemble_from_element_matrices(self.table, ops.mat_stiff(1.0 / rho_q), 1)
        rhs_q = np.broadcast_to(p.gravity / p.fr,
                                (self.tree.n_leaves, ops.N.shape[0], self.d)).copy()
        gnodal = self.project_gradient(phi)
        loc_g = self._loc(gnodal.reshape(-1), self.d)
        gq = ops.vec_val(loc_g)
        grad_g = ops.vec_grad(loc_g)
        div_g = np.einsum("eqii->eq", grad_g)
        st = (p.cn / p.we) * (np.einsum("eqij,eqj->eqi", grad_g, gq)
                              + gq * div_g[:, :, None])
        rhs_q = rhs_q - st / rho_q[:, :, None]
        b = scatter_add(self.table, ops.int_gradn_dot(rhs_q)[:, :, None], 1)
        res = cg_solve(a, b, config=SolverConfig(rtol=1e-11, atol=1e-13),
                       project_nullspace=True)
        if not res.converged:
            raise SolveError("hydrostatic pressure init failed", block="pp")
        return res.x

    # ------------------------------------------------------------------
    # One full time step (two block passes)

    def block_step(self, state: MixtureState):
        """Advance one step; returns (new_state, BlockTimings, stats)."""
        timings = BlockTimings()
        stats = {"ch_newton_iters": [], "div_v": None, "div_u": None,
                 "linear_iters": {}}
        u_k, u_km1 = state.u_k, state.u_km1
        phi_k, mu_k = state.phi_k, state.mu_k
        p_k = state.p_k
        t_mid = state.t + 0.5 * self.dt
        t_new = state.t + self.dt

        u_new = u_k.copy()
        phi_new, mu_new = phi_k.copy(), mu_k.copy()
        p_new = p_k.copy()
        v_pred = u_k.copy()
        y_warm = None

        for ell in range(2):
            # Cahn-Hilliard with the latest weakly solenoidal velocity.
            t0 = time.perf_counter()
            u_adv = theta_average(u_k, u_new)
            phi_new, mu_new, iters = self.solve_ch(phi_k, mu_k, u_adv, t_mid,
                                                   y0=y_warm)
            y_warm = np.stack([phi_new, mu_new], axis=1).reshape(-1)
            stats["ch_newton_iters"].append(iters)
            timings.ch += time.perf_counter() - t0

            # Velocity prediction.
            t0 = time.perf_counter()
            data = self._pass_fields(u_k, u_km1, p_k, phi_k, phi_new,
                                     mu_k, mu_new, t_mid)
            a, rhs = self.assemble_velocity_prediction(data)
            systems = self._apply_velocity_bc(a, rhs, t_new)
            v_pred = np.zeros_like(u_k)
            for i, (ai, bi) in enumerate(systems):
                res = bicgstab_solve(ai, bi, x0=u_k[:, i].copy(),
                                     config=self.solvers.momentum)
                if not res.converged:
                    raise SolveError(f"velocity prediction failed: {res.status}",
                                     block="momentum", history=res.history)
                v_pred[:, i] = res.x
                stats["linear_iters"].setdefault("momentum", []).append(res.iterations)
            timings.vp += time.perf_counter() - t0

            # Pressure Poisson.
            t0 = time.perf_counter()
            a, b, rm = self.assemble_pressure_poisson(data, v_pred, p_k)
            res = cg_solve(a, b, x0=p_k, config=self.solvers.pp,
                           project_nullspace=True)
            if not res.converged:
                raise SolveError(f"pressure Poisson failed: {res.status}",
                                 block="pp", history=res.history)
            p_new = res.x
            stats["linear_iters"].setdefault("pp", []).append(res.iterations)
            timings.pp += time.perf_counter() - t0

            # Velocity update.
            t0 = time.perf_counter()
            a, rhs = self.assemble_velocity_update(data, v_pred, p_new, p_k, rm=rm)
            systems = self._apply_velocity_bc(a, rhs, t_new)
            u_new = np.zeros_like(u_k)
            for i, (ai, bi) in enumerate(systems):
                res = cg_solve(ai, bi, x0=v_pred[:, i], config=self.solvers.vupdate)
                if not res.converged:
                    raise SolveError(f"velocity update failed: {res.status}",
                                     block="vupdate", history=res.history)
                u_new[:, i] = res.x
                stats["linear_iters"].setdefault("vupdate", []).append(res.iterations)
            timings.vu += time.perf_counter() - t0

        t0 = time.perf_counter()
        stats["div_v"] = float(np.linalg.norm(self.divergence_functional(v_pred)))
        stats["div_u"] = float(np.linalg.norm(self.divergence_functional(u_new)))
        new_state = MixtureState(u_k=u_new, u_km1=u_k.copy(), p_k=p_new,
                                 phi_k=phi_new, mu_k=mu_new, v_kp1=v_pred,
                                 t=t_new, step=state.step + 1)
        timings.equation_update += time.perf_counter() - t0
        return new_state, timings, stats

    # ------------------------------------------------------------------
    # Observables

    def diagnostics(self, state: MixtureState) -> dict:
        """Total energy, mass, bubble centroid, interface fronts, overshoot."""
        ops = self.ops_ch
        p = self.params
        phi_q = ops.val(self._loc(state.phi_k))
        rho_q = mixture_density(phi_q, p)
        u_q = ops.vec_val(self._loc(state.u_k, self.d))
        gphi = ops.grad(self._loc(state.phi_k))
        height = -np.einsum("eqj,j->eq", ops.xq, p.gravity)
        wj = ops.wjac
        kinetic = 0.5 * np.sum(wj * rho_q * np.sum(u_q ** 2, axis=2))
        mix = np.sum(wj * (free_energy(phi_q) + 0.5 * p.cn ** 2 * np.sum(gphi ** 2, axis=2)))
        potential = np.sum(wj * rho_q * height) / p.fr
        e_tot = kinetic + (mix + potential) / (p.cn * p.we)
        mass = float(np.sum(wj * phi_q))
        ind = 0.5 * (1.0 - phi_q)         # smoothed indicator of the phi<0 phase
        denom = float(np.sum(wj * ind))
        centroid = float(np.sum(wj * ind * height) / denom) if denom > 1e-14 else float("nan")
        front_top, front_bottom = self._interface_fronts(state.phi_k)
        overshoot = max(0.0, float(np.max(np.abs(state.phi_k))) - 1.0)
        return dict(e_tot=float(e_tot), mass=mass, centroid=centroid,
                    front_top=front_top, front_bottom=front_bottom,
                    overshoot=overshoot)

    def _interface_fronts(self, phi):
        """Extremal heights of phi = 0 crossings along element edges."""
        loc = self._loc(phi)
        coords = self.table.coords[self.table.elem_nodes_all]  # (n_e, nloc, d)
        height = -coords @ self.params.gravity
        d = self.d
        edges = []
        n_loc = 1 << d
        for a in range(n_loc):
            for axis in range(d):
                b = a | (1 << axis)
                if b != a:
                    edges.append((a, b))
        tops, bots = [], []
        for a, b in edges:
            fa, fb = loc[:, a], loc[:, b]
            cross = fa * fb < 0
            if not np.any(cross):
                continue
            s = fa[cross] / (fa[cross] - fb[cross])
            y = height[cross, a] + s * (height[cross, b] - height[cross, a])
            tops.append(y.max())
            bots.append(y.min())
        exact = np.any(loc == 0.0)
        if exact:
            y0 = height[loc == 0.0]
            tops.append(y0.max())
            bots.append(y0.min())
        if not tops:
            return float("nan"), float("nan")
        return float(max(tops)), float(min(bots))

    def vorticity_q(self, state: MixtureState):
        """Nodal vorticity and Q-criterion from projected velocity gradients
        (2D only)."""
        if self.d != 2:
            raise ContractError("vorticity/Q diagnostics implemented in 2D only")
        gx = self.project_gradient(state.u_k[:, 0])  # (n, 2) = grad u1
        gy = self.project_gradient(state.u_k[:, 1])
        omega = gy[:, 0] - gx[:, 1]
        # grad v as tensor L_ij = dv_i/dx_j
        l11, l12 = gx[:, 0], gx[:, 1]
        l21, l22 = gy[:, 0], gy[:, 1]
        s_sq = l11 ** 2 + l22 ** 2 + 0.5 * (l12 + l21) ** 2
        w_sq = 0.5 * (l12 - l21) ** 2
        q = 0.5 * (w_sq - s_sq)
        return omega, q
