"""INI run configuration.

Flat ``key = value`` pairs grouped in ``[sections]``.  Shapes are written as
``circle cx cy r`` or ``ellipse cx cy a b angle_deg``; several shapes are
separated by ``;``.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

from .. import eit
from ..cda import ONE_MESH, TWO_MESH, CdaConfig
from ..mesh import (circle_polygon, ellipse_polygon, generate_disk_mesh, generate_disk_polygon_mesh,
                    generate_square_mesh)

COMMANDS = ("convergence", "run", "gradcheck", "forward")


class ConfigError(ValueError):
    """Unparseable, incomplete or inconsistent configuration."""


@dataclass(frozen=True)
class Shape:
    kind: str
    params: tuple

    def polygon(self, h):
        if self.kind == "circle":
            cx, cy, r = self.params
            return circle_polygon(r, h, (cx, cy))
        cx, cy, a, b, ang = self.params
        return ellipse_polygon((cx, cy), (a, b), h, math.radians(ang))

    def sample(self, n=720):
        """Dense closed polyline of the exact curve."""
        import numpy as np

        t = np.linspace(0.0, 2 * np.pi, n + 1)
        if self.kind == "circle":
            cx, cy, r = self.params
            return np.stack([cx + r * np.cos(t), cy + r * np.sin(t)], axis=1)
        cx, cy, a, b, ang = self.params
        c, s = math.cos(math.radians(ang)), math.sin(math.radians(ang))
        x, y = a * np.cos(t), b * np.sin(t)
        return np.stack([cx + c * x - s * y, cy + s * x + c * y], axis=1)


def parse_shapes(text):
    shapes = []
    for chunk in (c.strip() for c in text.split(";")):
        if not chunk:
            continue
        kind, *nums = chunk.split()
        try:
            vals = tuple(float(v) for v in nums)
        except ValueError as exc:
            raise ConfigError(f"bad number in shape {chunk!r}") from exc
        if kind == "circle" and len(vals) == 3 and vals[2] > 0:
            shapes.append(Shape(kind, vals))
        elif kind == "ellipse" and len(vals) == 5 and vals[2] > 0 and vals[3] > 0:
            shapes.append(Shape(kind, vals))
        else:
            raise ConfigError(f"shape must be 'circle cx cy r' or 'ellipse cx cy a b angle', got {chunk!r}")
    if not shapes:
        raise ConfigError("at least one inclusion shape is required")
    return tuple(shapes)


@dataclass(frozen=True)
class Geometry:
    domain: str = "disk"
    outer: float = 5.0
    h: float = 0.5
    initial: tuple = (Shape("circle", (0.0, 0.0, 2.0)),)
    target: tuple = (Shape("circle", (0.0, 0.0, 4.0)),)
    target_h: float = 0.5

    def mesh(self, shapes=None, h=None):
        shapes = self.initial if shapes is None else shapes
        h = self.h if h is None else h
        if self.domain == "disk":
            one = len(shapes) == 1 and shapes[0].kind == "circle"
            if one and shapes[0].params[:2] == (0.0, 0.0):
                return generate_disk_mesh(self.outer, shapes[0].params[2], h)
            return generate_disk_polygon_mesh(self.outer, [s.polygon(h) for s in shapes], h)
        return generate_square_mesh(self.outer, [s.polygon(h) for s in shapes], h)

    def target_mesh(self):
        return self.mesh(self.target, self.target_h)


@dataclass(frozen=True)
class DataSpec:
    k_I: float = 10.0
    k_E: float = 1.0
    kind: str = eit.SINGLE
    count: int = 1
    mode: int = 1
    data_tol: float = 0.05

    @property
    def conductivity(self):
        return (self.k_I, self.k_E)

    def fluxes(self):
        if self.kind == eit.SINGLE:
            return [eit.boundary_data(eit.SINGLE, 0, mode=self.mode)]
        return [eit.boundary_data(eit.FAMILY, j) for j in range(1, self.count + 1)]


@dataclass(frozen=True)
class ConvergenceSpec:
    h0: float = 1.0
    levels: int = 4
    reference_levels: int = 2
    qoi_levels: int = 3


@dataclass(frozen=True)
class GradcheckSpec:
    meshes: tuple = (1.0, 0.7, 0.5)
    samples: int = 5
    steps: tuple = (1e-3, 1e-4, 1e-5)


@dataclass(frozen=True)
class RunConfig:
    command: str
    geometry: Geometry = field(default_factory=Geometry)
    data: DataSpec = field(default_factory=DataSpec)
    cda: CdaConfig = field(default_factory=CdaConfig)
    convergence: ConvergenceSpec = field(default_factory=ConvergenceSpec)
    gradcheck: GradcheckSpec = field(default_factory=GradcheckSpec)
    out: str = "results"
    seed: int = 0
    record_timing: bool = False
    name: str = "run"

    def validate(self):
        _require(self.command in COMMANDS, f"command must be one of {COMMANDS}")
        g = self.geometry
        _require(g.domain in ("disk", "square"), "domain must be 'disk' or 'square'")
        _require(g.outer > 0 and g.h > 0 and g.target_h > 0, "outer, h and target_h must be positive")
        d = self.data
        _require(d.k_I > 0 and d.k_E > 0, "conductivities must be positive")
        _require(d.kind in (eit.SINGLE, eit.FAMILY), "data kind must be SINGLE or FAMILY")
        if d.kind == eit.SINGLE:
            _require(d.count == 1, "SINGLE data has exactly one measurement")
            _require(d.mode >= 0, "mode must be >= 0")
        else:
            _require(1 <= d.count <= eit.FAMILY_SIZE, f"FAMILY count must lie in 1..{eit.FAMILY_SIZE}")
        _require(0 < d.data_tol < 1, "data_tol must lie in (0, 1)")
        c = self.convergence
        _require(c.levels >= 1 and c.reference_levels >= 1 and c.qoi_levels >= 1 and c.h0 > 0,
                 "convergence levels and h0 must be positive")
        gc = self.gradcheck
        _require(len(gc.meshes) >= 1 and all(h > 0 for h in gc.meshes), "gradcheck meshes must be positive sizes")
        _require(gc.samples >= 1 and all(t > 0 for t in gc.steps), "gradcheck samples/steps must be positive")
        try:
            self.cda.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self


def _require(ok, msg):
    if not ok:
        raise ConfigError(msg)


def _floats(text):
    try:
        return tuple(float(v) for v in text.replace(",", " ").split())
    except ValueError as exc:
        raise ConfigError(f"expected numbers, got {text!r}") from exc


def _convert(section, key, raw, default):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return low in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from exc
    return raw.strip()


def _section(parser, name, cls, special=None):
    special = special or {}
    if not parser.has_section(name):
        return cls()
    known = {f.name: f for f in fields(cls)}
    defaults = cls()
    kwargs = {}
    for key, raw in parser.items(name):
        if key not in known:
            raise ConfigError(f"[{name}] unknown key {key!r}")
        if key in special:
            kwargs[key] = special[key](raw)
        else:
            kwargs[key] = _convert(name, key, raw, getattr(defaults, key))
    return cls(**kwargs)


def parse_config(text, source="<string>"):
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";;"), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    extra = set(parser.sections()) - {"run", "geometry", "data", "cda", "convergence", "gradcheck"}
    if extra:
        raise ConfigError(f"unknown sections: {sorted(extra)}")
    if not parser.has_option("run", "command"):
        raise ConfigError("[run] command is required")
    run = dict(parser.items("run"))
    unknown = set(run) - {"command", "out", "seed", "record_timing", "name"}
    if unknown:
        raise ConfigError(f"[run] unknown keys {sorted(unknown)}")

    geometry = _section(parser, "geometry", Geometry, {"initial": parse_shapes, "target": parse_shapes})
    data = _section(parser, "data", DataSpec, {"kind": lambda s: s.strip().upper()})
    cda = _section(parser, "cda", CdaConfig, {"strategy": lambda s: s.strip().upper()})
    conv = _section(parser, "convergence", ConvergenceSpec)
    grad = _section(parser, "gradcheck", GradcheckSpec,
                    {"meshes": _floats, "steps": _floats})
    cfg = RunConfig(
        command=run["command"].strip(),
        geometry=geometry, data=data, cda=cda, convergence=conv, gradcheck=grad,
        out=run.get("out", "results").strip(),
        seed=_convert("run", "seed", run.get("seed", "0"), 0),
        record_timing=_convert("run", "record_timing", run.get("record_timing", "false"), False),
        name=run.get("name", Path(source).stem if source != "<string>" else "run").strip(),
    )
    return cfg.validate()


def bundled_configs():
    """Names of the configurations shipped with the package."""
    root = resources.files("cda_eit") / "configs"
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".ini"))


def load_config(path_or_name):
    """Read a config file; bare names resolve to the bundled configs."""
    p = Path(path_or_name)
    if not p.exists() and p.suffix == "" and str(path_or_name) in bundled_configs():
        res = resources.files("cda_eit") / "configs" / f"{path_or_name}.ini"
        return parse_config(res.read_text(), source=f"{path_or_name}.ini")
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    return parse_config(text, source=str(p))


__all__ = ["COMMANDS", "ConfigError", "ConvergenceSpec", "DataSpec", "Geometry", "GradcheckSpec", "RunConfig",
           "Shape", "bundled_configs", "load_config", "parse_config", "parse_shapes", "ONE_MESH", "TWO_MESH"]
