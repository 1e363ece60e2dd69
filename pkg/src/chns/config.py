"""Run configuration: block-structured text format, parsing and serialization.

Format: named blocks with one ``key = value`` pair per line, ``#`` comments.
Unknown keys fail fast (a mistyped tolerance must not pass silently), as do
duplicate keys and missing required blocks.

    case {
        type = mms            # mms | bubble1 | bubble2 | rt2d
        level = 7
        dt = 0.05
        steps = 63
    }
    solver_pp {
        rtol = 1e-10
    }
    output {
        dir = out
    }
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cases import CaseSpec, bubble_setup, mms_setup, rt2d_setup
from .errors import ConfigError
from .linalg import SolverConfig
from .solver import SchemeOptions, SolverSuite

_BLOCKS = ("case", "solver_momentum", "solver_pp", "solver_vupdate",
           "solver_ch", "output")

_CASE_KEYS = {
    "type": str, "level": int, "levels": "ints", "dt": float, "steps": int,
    "end_time": float, "forcing": str, "uhat": str, "cn": float, "re": float,
    "we": float, "pe": "float_or_auto", "fr": float, "rho_ratio": float,
    "nu_ratio": float, "amr": bool, "remesh_every": int, "at": float,
    "bubble": int,
}
_SOLVER_KEYS = {
    "rtol": float, "atol": float, "max_iters": int, "pc": str,
    "omega": float, "newton_rtol": float, "newton_atol": float,
    "newton_max_iters": int,
}
_OUTPUT_KEYS = {"dir": str, "cadence": int, "vtk": bool, "prefix": str,
                "threads": int}


@dataclass
class RunConfig:
    case: CaseSpec
    solvers: SolverSuite
    uhat_mode: str = "minus"
    output_dir: str = "out"
    cadence: int = 10
    write_vtk: bool = False
    prefix: str = "run"
    threads: int = 1
    raw_case: dict = field(default_factory=dict)
    raw_solvers: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.cadence < 1:
            raise ConfigError("output cadence must be >= 1")
        if self.uhat_mode not in ("minus", "plus"):
            raise ConfigError(f"unknown uhat mode {self.uhat_mode!r}")

    def scheme_options(self) -> SchemeOptions:
        return SchemeOptions(uhat_mode=self.uhat_mode,
                             forcing_mode=self.case.forcing_mode,
                             forcing=self.case.forcing())

    def __eq__(self, other):
        if not isinstance(other, RunConfig):
            return NotImplemented
        return (self.case == other.case and self.solvers == other.solvers
                and self.uhat_mode == other.uhat_mode
                and self.output_dir == other.output_dir
                and self.cadence == other.cadence
                and self.write_vtk == other.write_vtk
                and self.prefix == other.prefix
                and self.threads == other.threads)


def _parse_value(raw, kind, path, lineno):
    raw = raw.strip()
    try:
        if kind is bool:
            if raw.lower() in ("true", "on", "yes", "1"):
                return True
            if raw.lower() in ("false", "off", "no", "0"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind == "float_or_auto":
            return "auto" if raw.lower() == "auto" else float(raw)
        if kind == "ints":
            return tuple(int(v) for v in raw.split(","))
        return raw.strip('"')
    except ValueError as exc:
        raise ConfigError(f"{path}:{lineno}: cannot parse value {raw!r}") from exc


def _tokenize(text, path="<config>"):
    """Blocks -> {key: (value-string, lineno)} with duplicate detection."""
    blocks = {}
    current = None
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.endswith("{"):
            name = line[:-1].strip()
            if name not in _BLOCKS:
                raise ConfigError(f"{path}:{lineno}: unknown block {name!r}")
            if name in blocks:
                raise ConfigError(f"{path}:{lineno}: duplicate block {name!r}")
            blocks[name] = {}
            current = name
            continue
        if line == "}":
            current = None
            continue
        if current is None:
            raise ConfigError(f"{path}:{lineno}: statement outside any block")
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key in blocks[current]:
            first = blocks[current][key][1]
            raise ConfigError(
                f"{path}:{lineno}: duplicate key {key!r} in block "
                f"{current!r} (first set on line {first})")
        blocks[current][key] = (val, lineno)
    return blocks


def _typed_block(blocks, name, schema, path):
    out = {}
    for key, (val, lineno) in blocks.get(name, {}).items():
        if key not in schema:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r} in "
                              f"block {name!r}")
        out[key] = _parse_value(val, schema[key], path, lineno)
    return out


def _build_case(c) -> CaseSpec:
    kind = c.get("type", "mms").lower()
    overrides = {k: c[k] for k in ("re", "we", "fr", "rho_ratio", "nu_ratio")
                 if k in c}
    if kind == "mms":
        kw = dict(level=c.get("level", 7), dt=c.get("dt", 0.05),
                  forcing_mode=c.get("forcing", "div-phiphi"))
        if "cn" in c:
            overrides["cn"] = c["cn"]
        pe = c.get("pe")
        if pe == "auto":
            from .materials import auto_peclet
            overrides["pe"] = auto_peclet(overrides.get("cn", 1.0))
        elif pe is not None:
            overrides["pe"] = pe
        if "end_time" in c:
            kw["end_time"] = c["end_time"]
        elif "steps" in c:
            kw["n_steps"] = c["steps"]
        return mms_setup(**kw, **overrides)
    if kind in ("bubble1", "bubble2"):
        case = 1 if kind == "bubble1" else 2
        bad = set(overrides) | ({"at"} & set(c))
        if bad:
            raise ConfigError(f"keys {sorted(bad)} not applicable to {kind}")
        levels = c.get("levels")
        if levels is None and "level" in c:
            levels = (c["level"],) * 3
        spec = bubble_setup(case=case, cn=c.get("cn"), levels=levels,
                            dt=c.get("dt"), n_steps=c.get("steps"),
                            amr=c.get("amr", False))
    elif kind == "rt2d":
        spec = rt2d_setup(at=c.get("at", 0.5), cn=c.get("cn", 0.02),
                          levels=c.get("levels", (4, 5, 7)),
                          dt=c.get("dt", 1e-3), n_steps=c.get("steps", 200),
                          re=c.get("re", 3000.0), we=c.get("we", 100.0),
                          amr=c.get("amr", True))
        if "rho_ratio" in c:  # exact round-trip of the stored ratio
            spec.params.rho_ratio = c["rho_ratio"]
    else:
        raise ConfigError(f"unknown case type {kind!r}")
    if "remesh_every" in c:
        spec.remesh_every = c["remesh_every"]
    return spec


def _build_solver(kv, base: SolverConfig) -> SolverConfig:
    rename = {"pc": "preconditioner"}
    kw = {rename.get(k, k): v for k, v in kv.items()}
    merged = dict(rtol=base.rtol, atol=base.atol, max_iters=base.max_iters,
                  preconditioner=base.preconditioner, omega=base.omega,
                  newton_rtol=base.newton_rtol, newton_atol=base.newton_atol,
                  newton_max_iters=base.newton_max_iters)
    merged.update(kw)
    return SolverConfig(**merged)


def parse_config(text, path="<config>") -> RunConfig:
    blocks = _tokenize(text, path)
    if "case" not in blocks:
        raise ConfigError(f"{path}: missing required block 'case'")
    c = _typed_block(blocks, "case", _CASE_KEYS, path)
    spec = _build_case(c)
    from .driver import default_solvers
    base = default_solvers(spec)
    solvers = SolverSuite(
        momentum=_build_solver(_typed_block(blocks, "solver_momentum",
                                            _SOLVER_KEYS, path), base.momentum),
        pp=_build_solver(_typed_block(blocks, "solver_pp", _SOLVER_KEYS, path),
                         base.pp),
        vupdate=_build_solver(_typed_block(blocks, "solver_vupdate",
                                           _SOLVER_KEYS, path), base.vupdate),
        ch=_build_solver(_typed_block(blocks, "solver_ch", _SOLVER_KEYS, path),
                         base.ch),
    )
    o = _typed_block(blocks, "output", _OUTPUT_KEYS, path)
    return RunConfig(case=spec, solvers=solvers,
                     uhat_mode=c.get("uhat", "minus"),
                     output_dir=o.get("dir", "out"),
                     cadence=o.get("cadence", 10),
                     write_vtk=o.get("vtk", False),
                     prefix=o.get("prefix", "run"),
                     threads=o.get("threads", 1),
                     raw_case=c,
                     raw_solvers={})


def serialize_config(rc: RunConfig) -> str:
    """Canonical text form; parse(serialize(parse(t))) == parse(t)."""
    spec = rc.case
    lines = ["case {"]
    kind = spec.case_id.lower()
    lines.append(f"    type = {kind}")
    p = spec.params
    if kind == "mms":
        lines.append(f"    level = {spec.level_bkg}")
        lines.append(f"    forcing = {spec.forcing_mode}")
        for name, val in (("re", p.re), ("we", p.we), ("cn", p.cn),
                          ("pe", p.pe), ("fr", p.fr),
                          ("rho_ratio", p.rho_ratio),
                          ("nu_ratio", p.nu_ratio)):
            lines.append(f"    {name} = {val:.17g}")
    else:
        lines.append(f"    cn = {p.cn:.17g}")
        lines.append(f"    levels = {spec.level_bkg},{spec.level_wall},"
                     f"{spec.level_interface}")
        lines.append(f"    amr = {'true' if spec.amr else 'false'}")
        lines.append(f"    remesh_every = {spec.remesh_every}")
        if kind == "rt2d":
            lines.append(f"    rho_ratio = {p.rho_ratio:.17g}")
            lines.append(f"    re = {p.re:.17g}")
            lines.append(f"    we = {p.we:.17g}")
    lines.append(f"    dt = {spec.dt:.17g}")
    lines.append(f"    steps = {spec.n_steps}")
    lines.append(f"    uhat = {rc.uhat_mode}")
    lines.append("}")
    for name, cfg in (("solver_momentum", rc.solvers.momentum),
                      ("solver_pp", rc.solvers.pp),
                      ("solver_vupdate", rc.solvers.vupdate),
                      ("solver_ch", rc.solvers.ch)):
        lines.append(name + " {")
        lines.append(f"    rtol = {cfg.rtol:.17g}")
        lines.append(f"    atol = {cfg.atol:.17g}")
        lines.append(f"    max_iters = {cfg.max_iters}")
        lines.append(f"    pc = {cfg.preconditioner}")
        lines.append(f"    omega = {cfg.omega:.17g}")
        if name == "solver_ch":
            lines.append(f"    newton_rtol = {cfg.newton_rtol:.17g}")
            lines.append(f"    newton_atol = {cfg.newton_atol:.17g}")
            lines.append(f"    newton_max_iters = {cfg.newton_max_iters}")
        lines.append("}")
    lines.append("output {")
    lines.append(f"    dir = {rc.output_dir}")
    lines.append(f"    cadence = {rc.cadence}")
    lines.append(f"    vtk = {'true' if rc.write_vtk else 'false'}")
    lines.append(f"    prefix = {rc.prefix}")
    lines.append(f"    threads = {rc.threads}")
    lines.append("}")
    return "\n".join(lines) + "\n"
