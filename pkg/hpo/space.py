"""
Bounded hyperparameter spaces.

Each dimension is optimized over a coordinate x in [lo, hi] and mapped to
the value handed to a training run by its scale:

    linear          value = x
    exp-negative    value = exp(-x)        (learning rates)
    one-minus-exp   value = 1 - exp(-x)    (momenta)

The search itself works in the unit hypercube, u = (x - lo) / (hi - lo).
"""
import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from distill.families import StudentFamily
from distill.students import HARD_HYPER_BOUNDS, STUDENT_HYPER_BOUNDS
from engine.errors import BoundsError
from engine.model import dropout_site_names

SCALES = ("linear", "exp-negative", "one-minus-exp")
_TOLERANCE = 1e-9


@dataclass(frozen=True)
class ParamDef:
    name: str
    lo: float
    hi: float
    scale: str = "linear"

    def __post_init__(self):
        if self.scale not in SCALES:
            raise ValueError(f"{self.name}: unknown scale {self.scale!r}")
        if not self.lo < self.hi:
            raise ValueError(f"{self.name}: empty range [{self.lo}, {self.hi}]")

    @classmethod
    def from_values(cls, name: str, value_lo: float, value_hi: float, scale: str) -> "ParamDef":
        """Build a dimension from the value range rather than the optimized coordinate."""
        probe = cls(name, 0.0, 1.0, scale)
        ends = sorted((probe.coordinate(value_lo), probe.coordinate(value_hi)))
        return cls(name, ends[0], ends[1], scale)

    def value(self, x: float) -> float:
        if self.scale == "exp-negative":
            return math.exp(-x)
        if self.scale == "one-minus-exp":
            return 1.0 - math.exp(-x)
        return x

    def coordinate(self, value: float) -> float:
        if self.scale == "exp-negative":
            return -math.log(value)
        if self.scale == "one-minus-exp":
            return -math.log1p(-value)
        return value

    @property
    def value_bounds(self) -> tuple:
        ends = sorted((self.value(self.lo), self.value(self.hi)))
        return ends[0], ends[1]

    def transform(self, value: float) -> float:
        """Value -> unit coordinate; BoundsError outside the range."""
        try:
            x = self.coordinate(value)
        except (ValueError, OverflowError):
            x = math.nan
        span = self.hi - self.lo
        if not (self.lo - _TOLERANCE * span <= x <= self.hi + _TOLERANCE * span):
            lo, hi = self.value_bounds
            raise BoundsError(f"{self.name}={value!r} outside [{lo:g}, {hi:g}]")
        return min(1.0, max(0.0, (x - self.lo) / span))

    def untransform(self, u: float) -> float:
        return self.value(self.lo + float(u) * (self.hi - self.lo))


@dataclass(frozen=True)
class Space:
    name: str
    dims: tuple

    def __post_init__(self):
        names = [d.name for d in self.dims]
        if len(set(names)) != len(names):
            raise ValueError(f"space {self.name}: duplicate dimension names")

    def __len__(self):
        return len(self.dims)

    @property
    def names(self) -> list:
        return [d.name for d in self.dims]

    def to_dict(self) -> dict:
        return {"name": self.name, "dims": [asdict(d) for d in self.dims]}

    @classmethod
    def from_dict(cls, payload: dict) -> "Space":
        return cls(payload["name"], tuple(ParamDef(**d) for d in payload["dims"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def load(cls, path) -> "Space":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()

    def transform_point(self, point: dict) -> np.ndarray:
        missing = [n for n in self.names if n not in point]
        if missing:
            raise BoundsError(f"space {self.name}: point lacks {missing}")
        return np.array([d.transform(point[d.name]) for d in self.dims])

    def untransform_point(self, unit) -> dict:
        unit = np.asarray(unit, dtype=float)
        if unit.shape != (len(self.dims),):
            raise BoundsError(f"space {self.name}: expected {len(self.dims)} coordinates, got {unit.shape}")
        if np.any(unit < -_TOLERANCE) or np.any(unit > 1 + _TOLERANCE):
            raise BoundsError(f"space {self.name}: unit point outside [0, 1]")
        return {d.name: d.untransform(min(1.0, max(0.0, u))) for d, u in zip(self.dims, unit)}

    def check(self, point: dict) -> dict:
        """Validate a point, returning it unchanged."""
        self.transform_point(point)
        return point


# ---------------------------------------------------------------------------
# Built-in spaces
# ---------------------------------------------------------------------------

_TEACHER_DIMS = (
    ParamDef("lr", 3.0, 4.6, "exp-negative"),
    ParamDef("momentum", math.log(5.0), math.log(1 / 0.09), "one-minus-exp"),
    ParamDef("weight_decay", 5e-5, 4e-4),
    ParamDef("init_scale", 0.8, 1.35),
    ParamDef("DOc1", 0.1, 0.3),
    ParamDef("DOc2", 0.25, 0.35),
    ParamDef("DOc3", 0.3, 0.44),
    ParamDef("DOf1", 0.2, 0.65),
    ParamDef("DOf2", 0.2, 0.65),
    ParamDef("D_h", 0.03, 0.11),
    ParamDef("D_s", 0.2, 0.3),
    ParamDef("D_v", 0.0, 0.2),
    ParamDef("A_s", 0.2, 0.3),
    ParamDef("A_v", 0.03, 0.2),
    ParamDef("C1", 0.0, 1.0),
    ParamDef("C2", 0.0, 1.0),
    ParamDef("C3", 0.0, 1.0),
    ParamDef("H1", 0.0, 1.0),
)
_DESK_TEACHER_DROPS = {"C3", "DOc3", "DOf2"}

_HARD_DROPOUT = {"DOc1": (0.05, 0.4), "DOc2": (0.1, 0.6), "DOc3": (0.1, 0.7), "DOf1": (0.1, 0.7)}


def teacher_space(family: str = "teacher-full") -> Space:
    if family == "teacher-desk":
        return Space("teacher-desk", tuple(d for d in _TEACHER_DIMS if d.name not in _DESK_TEACHER_DROPS))
    if family != "teacher-full":
        raise BoundsError(f"no built-in space for teacher family {family!r}")
    return Space("teacher-full", _TEACHER_DIMS)


def _hyper_dims(bounds: dict) -> list:
    scales = {"lr": "exp-negative", "momentum": "one-minus-exp"}
    dims = []
    for name, (lo, hi) in bounds.items():
        scale = scales.get(name, "linear")
        dims.append(ParamDef.from_values(name, lo, hi, scale) if scale != "linear" else ParamDef(name, lo, hi))
    return dims


def _width_dims(family: StudentFamily) -> list:
    return [ParamDef(key, 0.0, 1.0) for key in family.width_keys]


def student_space(family_id: str) -> Space:
    family = StudentFamily(family_id, 1_000_000)
    return Space(f"student:{family_id}", tuple(_hyper_dims(STUDENT_HYPER_BOUNDS) + _width_dims(family)))


def hard_space(family_id: str) -> Space:
    """Hard-target twin: lr, momentum, one rate per dropout site, widths."""
    family = StudentFamily(family_id, 1_000_000)
    sites = dropout_site_names(family.template)
    dropout = [ParamDef(site, *_HARD_DROPOUT.get(site, _HARD_DROPOUT["DOf1"])) for site in sites]
    return Space(f"hard:{family_id}", tuple(_hyper_dims(HARD_HYPER_BOUNDS) + dropout + _width_dims(family)))


def branin_space() -> Space:
    return Space("branin", (ParamDef("x1", -5.0, 10.0), ParamDef("x2", 0.0, 15.0)))


def branin(point: dict) -> float:
    """Branin-Hoo; global minimum 0.397887 at three points."""
    x1, x2 = point["x1"], point["x2"]
    b, c = 5.1 / (4 * math.pi ** 2), 5 / math.pi
    return (x2 - b * x1 ** 2 + c * x1 - 6) ** 2 + 10 * (1 - 1 / (8 * math.pi)) * math.cos(x1) + 10


BRANIN_MINIMUM = 0.397887


def get_space(name: str) -> Space:
    """Resolve 'teacher-full', 'teacher-desk', 'student:<family>', 'hard:<family>' or 'branin'."""
    if name.startswith("teacher"):
        return teacher_space("teacher-full" if name == "teacher" else name)
    if name.startswith("student:"):
        return student_space(name.split(":", 1)[1])
    if name.startswith("hard:"):
        return hard_space(name.split(":", 1)[1])
    if name == "branin":
        return branin_space()
    raise BoundsError(f"unknown space {name!r}")
