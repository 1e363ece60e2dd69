"""Simulation drivers: build a problem from a CaseSpec, run the time loop
with optional adaptive remeshing, and orchestrate convergence studies."""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .assembly import intergrid_transfer
from .cases import CaseSpec, interface_refine_indicator, mms_exact
from .errors import ConfigError
from .linalg import SolverConfig
from .nodetable import NodeTable
from .octree import KEEP, Octree, refine_and_coarsen, uniform_tree
from .solver import (BlockTimings, MixtureState, ProjectionStepper,
                     SchemeOptions, SolverSuite, VelocityBC)


def velocity_bc_for(spec: CaseSpec, table: NodeTable) -> VelocityBC:
    d = len(spec.domain[0])
    if spec.boundary_kind == "mms":
        masks = [table.boundary_mask() for _ in range(d)]
        values = lambda coords, t: mms_exact(coords, t)["v"]
        return VelocityBC(masks=masks, values=values)
    if spec.boundary_kind == "noslip":
        return VelocityBC(masks=[table.boundary_mask() for _ in range(d)])
    if spec.boundary_kind == "free-slip-sides":
        # Normal velocity pinned on the side walls, no-slip top and bottom.
        m0 = table.boundary_mask(axis=0, side=0) | table.boundary_mask(axis=0, side=1)
        my = table.boundary_mask(axis=1, side=0) | table.boundary_mask(axis=1, side=1)
        return VelocityBC(masks=[m0 | my, my])
    raise ConfigError(f"unknown boundary kind {spec.boundary_kind!r}")


def initial_mesh(spec: CaseSpec):
    """Uniform background tree, adapted to the initial interface when AMR is
    requested (iterated to the indicator fixed point)."""
    tree = uniform_tree(spec.domain, spec.level_bkg, d=len(spec.domain[0]),
                        root_grid=spec.root_grid, max_depth=spec.max_depth)
    table = NodeTable(tree, check_balance=False)
    if not spec.amr:
        return tree, table
    levels = (spec.level_bkg, spec.level_wall, spec.level_interface)
    for _ in range(spec.level_interface - spec.level_bkg + 2):
        phi = spec.initial_phi(table.coords[:table.n_nodes])
        flags = interface_refine_indicator(tree, table, phi, levels)
        if np.all(flags == KEEP):
            break
        new_tree = refine_and_coarsen(tree, flags)
        if _same_leaves(new_tree, tree):
            break  # balance holds some leaves finer than their target
        tree = new_tree
        table = NodeTable(tree, check_balance=False)
    return tree, table


def _same_leaves(a: Octree, b: Octree) -> bool:
    return (a.n_leaves == b.n_leaves and np.array_equal(a.levels, b.levels)
            and np.array_equal(a.anchors, b.anchors))


def check_interface_resolution(spec: CaseSpec):
    width = spec.interface_width_cells()
    if width < 1.0:
        warnings.warn(
            f"interface under-resolved: Cn/h = {width:.2f} < 1 at the finest "
            "level; the diffuse profile needs ~6 cells", stacklevel=2)
    return width


def build_stepper(spec: CaseSpec, tree, table, solvers=None, options=None,
                  dt=None) -> ProjectionStepper:
    bc = velocity_bc_for(spec, table)
    opts = options or SchemeOptions(forcing_mode=spec.forcing_mode,
                                    forcing=spec.forcing())
    return ProjectionStepper(tree, table, spec.params, dt or spec.dt, bc,
                             solvers=solvers, options=opts)


def initial_state(spec: CaseSpec, stepper: ProjectionStepper) -> MixtureState:
    n = stepper.n
    coords = stepper.coords
    if spec.case_id == "MMS":
        exact = mms_exact(coords, 0.0)
        state = MixtureState.quiescent(n, stepper.d, phi=exact["phi"],
                                       mu=exact["mu"])
        state.u_k = exact["v"].copy()
        state.u_km1 = exact["v"].copy()
        state.p_k = exact["p"].copy()
        return state
    phi = spec.initial_phi(coords)
    state = MixtureState.quiescent(n, stepper.d, phi=phi)
    state.mu_k = stepper.initial_chemical_potential(phi)
    if spec.initial_pressure == "hydrostatic":
        state.p_k = stepper.initial_hydrostatic_pressure(phi)
    return state


@dataclass
class StepRecord:
    time: float
    e_tot: float
    mass: float
    centroid: float
    front_top: float
    front_bottom: float
    overshoot: float
    timings: BlockTimings
    ch_newton_iters: tuple
    div_v: float
    div_u: float


@dataclass
class RunResult:
    spec: CaseSpec
    records: list
    state: MixtureState
    stepper: ProjectionStepper
    initial_diag: dict

    @property
    def masses(self):
        return np.array([r.mass for r in self.records])

    @property
    def energies(self):
        return np.array([r.e_tot for r in self.records])


def remesh(spec: CaseSpec, stepper: ProjectionStepper, state: MixtureState,
           solvers, options):
    """Adapt the mesh to the current interface (iterated to the indicator
    fixed point), transfer all fields, and rebuild the stepper."""
    tree, table = stepper.tree, stepper.table
    levels = (spec.level_bkg, spec.level_wall, spec.level_interface)
    changed = False
    for _ in range(spec.level_interface - spec.level_bkg + 2):
        flags = interface_refine_indicator(tree, table, state.phi_k, levels)
        if np.all(flags == KEEP):
            break
        new_tree = refine_and_coarsen(tree, flags)
        if _same_leaves(new_tree, tree):
            break
        new_table = NodeTable(new_tree, check_balance=False)

        def move(x, ndof=1):
            return intergrid_transfer(tree, table, new_tree, new_table, x, ndof)

        d = stepper.d
        state = MixtureState(
            u_k=move(state.u_k, d).reshape(-1, d),
            u_km1=move(state.u_km1, d).reshape(-1, d),
            p_k=move(state.p_k),
            phi_k=move(state.phi_k),
            mu_k=move(state.mu_k),
            v_kp1=None if state.v_kp1 is None else move(state.v_kp1, d).reshape(-1, d),
            t=state.t, step=state.step)
        tree, table = new_tree, new_table
        changed = True
    if changed:
        stepper = build_stepper(spec, tree, table, solvers=solvers,
                                options=options, dt=stepper.dt)
    return stepper, state


def run_case(spec: CaseSpec, solvers: SolverSuite = None,
             options: SchemeOptions = None, n_steps=None,
             on_step=None) -> RunResult:
    """Advance the case for its configured number of steps.

    ``on_step(step_index, state, record, stepper)`` is invoked after every
    completed step (output hooks live there)."""
    check_interface_resolution(spec)
    tree, table = initial_mesh(spec)
    solvers = solvers or default_solvers(spec)
    options = options or SchemeOptions(forcing_mode=spec.forcing_mode,
                                       forcing=spec.forcing())
    stepper = build_stepper(spec, tree, table, solvers=solvers, options=options)
    state = initial_state(spec, stepper)
    records = []
    initial_diag = stepper.diagnostics(state)
    total = spec.n_steps if n_steps is None else n_steps
    for k in range(total):
        t_remesh = 0.0
        if spec.amr and k > 0 and k % spec.remesh_every == 0:
            t0 = time.perf_counter()
            stepper, state = remesh(spec, stepper, state, solvers, options)
            t_remesh = time.perf_counter() - t0
        state, timings, stats = stepper.block_step(state)
        timings.remesh = t_remesh
        diag = stepper.diagnostics(state)
        rec = StepRecord(time=state.t, e_tot=diag["e_tot"], mass=diag["mass"],
                         centroid=diag["centroid"],
                         front_top=diag["front_top"],
                         front_bottom=diag["front_bottom"],
                         overshoot=diag["overshoot"], timings=timings,
                         ch_newton_iters=tuple(stats["ch_newton_iters"]),
                         div_v=stats["div_v"], div_u=stats["div_u"])
        records.append(rec)
        if on_step is not None:
            on_step(k, state, rec, stepper)
    return RunResult(spec=spec, records=records, state=state, stepper=stepper,
                     initial_diag=initial_diag)


def default_solvers(spec: CaseSpec) -> SolverSuite:
    """Per-case solver settings (tolerance roles mirror the per-case
    configurations used for the reference experiments)."""
    if spec.case_id == "MMS":
        return SolverSuite(
            momentum=SolverConfig(rtol=1e-10, atol=1e-11, max_iters=4000,
                                  preconditioner="jacobi"),
            pp=SolverConfig(rtol=1e-10, atol=1e-11, max_iters=8000,
                            preconditioner="jacobi"),
            vupdate=SolverConfig(rtol=1e-10, atol=1e-11, max_iters=4000,
                                 preconditioner="jacobi"),
            ch=SolverConfig(rtol=1e-7, atol=1e-10, max_iters=6000,
                            preconditioner="nodeblock2",
                            newton_rtol=1e-9, newton_atol=3e-10))
    return SolverSuite(
        momentum=SolverConfig(rtol=1e-8, atol=1e-10, max_iters=4000,
                              preconditioner="jacobi"),
        pp=SolverConfig(rtol=1e-8, atol=1e-10, max_iters=8000,
                        preconditioner="jacobi"),
        vupdate=SolverConfig(rtol=1e-8, atol=1e-10, max_iters=4000,
                             preconditioner="jacobi"),
        ch=SolverConfig(rtol=1e-8, atol=1e-11, max_iters=6000,
                        preconditioner="fieldsplit2",
                        newton_rtol=1e-9, newton_atol=1e-10))


# ---------------------------------------------------------------------------
# Convergence studies


@dataclass
class ConvergenceReport:
    study: str
    resolutions: list
    errors: dict = field(default_factory=dict)
    slopes: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)

    def fit_slopes(self, drop_finest=()):
        """Least-squares slopes of log(error) vs log(resolution); fields in
        ``drop_finest`` exclude the finest-resolution point (spatial-error
        tapering)."""
        res = np.log(np.asarray(self.resolutions, dtype=float))
        for name, errs in self.errors.items():
            e = np.log(np.maximum(np.asarray(errs, dtype=float), 1e-300))
            sel = slice(None, -1) if name in drop_finest else slice(None)
            a = np.vstack([res[sel], np.ones_like(res[sel])]).T
            slope, _ = np.linalg.lstsq(a, e[sel], rcond=None)[0]
            self.slopes[name] = float(slope)
        return self.slopes

    def to_csv(self) -> str:
        fields = sorted(self.errors)
        lines = ["resolution," + ",".join(fields)]
        for i, r in enumerate(self.resolutions):
            lines.append(",".join([f"{r:.17g}"] +
                                  [f"{self.errors[f][i]:.17g}" for f in fields]))
        lines.append("slope," + ",".join(f"{self.slopes.get(f, float('nan')):.6g}"
                                         for f in fields))
        return "\n".join(lines) + "\n"


def mms_errors(stepper: ProjectionStepper, state: MixtureState) -> dict:
    """L2 errors against the exact fields at the state's time, by quadrature."""
    ops = stepper.ops_ch
    exact_q = mms_exact(ops.xq.reshape(-1, 2), state.t)
    nq = ops.N.shape[0]
    n_e = stepper.tree.n_leaves

    def l2(num_loc_q, exact_flat):
        diff = num_loc_q - exact_flat.reshape(n_e, nq)
        return float(np.sqrt(np.sum(stepper.ops_ch.wjac * diff ** 2)))

    u_q = ops.vec_val(stepper._loc(state.u_k, stepper.d))
    p_q = ops.val(stepper._loc(state.p_k - state.p_k.mean()))
    phi_q = ops.val(stepper._loc(state.phi_k))
    mu_q = ops.val(stepper._loc(state.mu_k))
    p_exact = exact_q["p"] - exact_q["p"].mean()
    return {
        "v1": l2(u_q[:, :, 0], exact_q["v"][:, 0]),
        "v2": l2(u_q[:, :, 1], exact_q["v"][:, 1]),
        "p": l2(p_q, p_exact),
        "phi": l2(phi_q, exact_q["phi"]),
        "mu": l2(mu_q, exact_q["mu"]),
    }


def run_convergence(study: str, resolutions=None, level=7, dt=5e-4,
                    n_steps=200, end_time=np.pi, forcing_mode="div-phiphi",
                    solvers=None) -> ConvergenceReport:
    """Temporal or spatial manufactured-solution study.

    temporal: fixed mesh ``level``, dt ladder ``resolutions``, run to
    ``end_time`` (step counts rounded).  spatial: fixed ``dt`` for
    ``n_steps``, mesh sizes h = 1/2**k matching ``resolutions``.
    """
    from .cases import mms_setup
    if study == "temporal":
        resolutions = resolutions or [0.4, 0.2, 0.1, 0.05]
        report = ConvergenceReport(study=study, resolutions=[])
        for dt_req in resolutions:
            spec = mms_setup(level=level, dt=dt_req, end_time=end_time,
                             forcing_mode=forcing_mode)
            try:
                result = run_case(spec, solvers=solvers)
                errs = mms_errors(result.stepper, result.state)
            except Exception as exc:  # record and continue the ladder
                report.failures[dt_req] = repr(exc)
                continue
            report.resolutions.append(spec.dt)
            for k, v in errs.items():
                report.errors.setdefault(k, []).append(v)
        report.fit_slopes()
        return report
    if study == "spatial":
        resolutions = resolutions or [1 / 16, 1 / 32, 1 / 64]
        report = ConvergenceReport(study=study, resolutions=[])
        for h in resolutions:
            lev = int(round(np.log2(1.0 / h)))
            spec = mms_setup(level=lev, dt=dt, n_steps=n_steps,
                             forcing_mode=forcing_mode)
            try:
                result = run_case(spec, solvers=solvers)
                errs = mms_errors(result.stepper, result.state)
            except Exception as exc:
                report.failures[h] = repr(exc)
                continue
            report.resolutions.append(h)
            for k, v in errs.items():
                report.errors.setdefault(k, []).append(v)
        report.fit_slopes()
        return report
    raise ConfigError(f"unknown study {study!r} (use temporal or spatial)")
