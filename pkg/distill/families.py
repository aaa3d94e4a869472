"""
Student and teacher architecture families.

Student bounds per (family, budget) for the four reference budgets are kept
verbatim below. Any other budget (the desk budgets) derives its bounds from
the 1M row: conv widths scale with sqrt(budget / 1M), fully-connected widths
with budget / 1M, never below MIN_WIDTH.

Student convs use 5x5 kernels. Families with zero or one conv layer carry a
linear bottleneck whose width is the dependent one; deeper families solve
their single fully-connected layer instead.
"""
import math
from dataclasses import dataclass

import numpy as np

from arch.grammar import (ArchSpec, bind_widths, count_params, parse_template, solve_dependent_width,
                          widths_from_ratios, widths_from_scalars)
from engine.errors import BoundsError, BudgetError
from engine.model import Model, build_model

MIN_WIDTH = 4
MAX_MLP_DEPTH = 5
REFERENCE_BUDGET = 1_000_000

# family -> (template, dependent kind, kinds of the searched widths)
TEMPLATES = {
    "MLP-1": ("lfc-fc", "lfc", ("fc",)),
    "CNN-1": ("k5-c-mp3-lfc-fc", "lfc", ("c", "fc")),
    "CNN-2": ("k5-c-mp-c-mp-fc", "fc", ("c", "c")),
    "CNN-3": ("k5-c-mp-c-mp-c-mp-fc", "fc", ("c", "c", "c")),
    "CNN-4": ("k5-c-mp-c-c-mp-c-mp-fc", "fc", ("c", "c", "c", "c")),
}

STUDENT_BOUNDS = {
    "MLP-1": {
        1_000_000: ((500, 5000),),
        3_160_000: ((1000, 20000),),
        10_000_000: ((5000, 30000),),
        31_600_000: ((5000, 45000),),
    },
    "CNN-1": {
        1_000_000: ((40, 150), (200, 1600)),
        3_160_000: ((50, 300), (100, 4000)),
        10_000_000: ((50, 450), (500, 20000)),
        31_600_000: ((200, 600), (1000, 4100)),
    },
    "CNN-2": {
        1_000_000: ((20, 120), (20, 120)),
        3_160_000: ((50, 250), (20, 120)),
        10_000_000: ((50, 350), (20, 120)),
        31_600_000: ((50, 800), (20, 120)),
    },
    "CNN-3": {
        1_000_000: ((20, 110), (20, 110), (20, 110)),
        3_160_000: ((40, 200), (40, 200), (40, 200)),
        10_000_000: ((50, 350), (50, 350), (50, 350)),
        31_600_000: ((50, 650), (50, 650), (50, 650)),
    },
    "CNN-4": {
        1_000_000: ((25, 100), (25, 100), (25, 100), (25, 100)),
        3_160_000: ((50, 150), (50, 150), (50, 200), (50, 200)),
        10_000_000: ((50, 300), (50, 300), (50, 350), (50, 350)),
        31_600_000: ((50, 500), (50, 500), (50, 650), (50, 650)),
    },
}

STUDENT_FAMILIES = ["MLP-1", "MLP-2", "MLP-3", "MLP-4", "MLP-5", "CNN-1", "CNN-2", "CNN-3", "CNN-4"]


def _scaled(bound: tuple, factor: float) -> tuple:
    lo = max(MIN_WIDTH, round(bound[0] * factor))
    return lo, max(lo, round(bound[1] * factor))


def student_bounds(family: str, budget: int) -> tuple:
    """Width bounds for the searched widths of (family, budget); empty for ratio-allocated MLPs."""
    if family not in STUDENT_FAMILIES:
        raise BoundsError(f"unknown student family {family!r}; choose from {STUDENT_FAMILIES}")
    if family not in STUDENT_BOUNDS:
        return ()
    table = STUDENT_BOUNDS[family]
    if budget in table:
        return table[budget]
    ratio = budget / REFERENCE_BUDGET
    kinds = TEMPLATES[family][2]
    return tuple(_scaled(b, math.sqrt(ratio) if kind == "c" else ratio)
                 for b, kind in zip(table[REFERENCE_BUDGET], kinds))


@dataclass(frozen=True)
class StudentFamily:
    family_id: str
    budget: int

    def __post_init__(self):
        if self.family_id not in STUDENT_FAMILIES:
            raise BoundsError(f"unknown student family {self.family_id!r}; choose from {STUDENT_FAMILIES}")
        if self.budget < 1:
            raise BudgetError(f"budget must be positive, got {self.budget}")

    @property
    def kind(self) -> str:
        return self.family_id.split("-")[0]

    @property
    def depth(self) -> int:
        """ReLU layers for MLPs, conv layers for CNNs."""
        return int(self.family_id.split("-")[1])

    @property
    def n_conv(self) -> int:
        return self.depth if self.kind == "CNN" else 0

    @property
    def bottleneck(self) -> bool:
        return self.n_conv <= 1

    @property
    def ratio_allocated(self) -> bool:
        return self.kind == "MLP" and self.depth >= 2

    @property
    def bounds(self) -> tuple:
        return student_bounds(self.family_id, self.budget)

    @property
    def width_keys(self) -> list:
        """Hyperparameter names of the searched width values, in template order."""
        if self.ratio_allocated:
            return [f"r{i}" for i in range(self.depth + 1)]
        return [f"w{i + 1}" for i in range(len(self.bounds))]

    @property
    def template(self) -> ArchSpec:
        if self.ratio_allocated:
            return parse_template("-".join(["lfc"] + ["fc"] * self.depth))
        text, dependent, _ = TEMPLATES[self.family_id]
        return parse_template(text, dependent)

    def __str__(self):
        return f"{self.family_id}@{self.budget:,}"


def _check_widths(family: StudentFamily, widths: list):
    for i, (width, (lo, hi)) in enumerate(zip(widths, family.bounds)):
        if not lo <= width <= hi:
            raise BoundsError(f"{family}: width {family.width_keys[i]}={width} outside [{lo}, {hi}]")


def student_spec(family: StudentFamily, values=None, widths=None) -> ArchSpec:
    """
    Resolve a student architecture under its budget.

    values are the searched scalars in [0, 1] (ratios for MLP-2..5); widths
    may instead give the searched widths directly and are bounds-checked.
    """
    template = family.template
    if family.ratio_allocated:
        if values is None or len(values) != family.depth + 1:
            raise BoundsError(f"{family}: expected {family.depth + 1} width ratios")
        allocated = widths_from_ratios(values, family.budget, depth=family.depth + 1)
        spec = bind_widths(template, allocated)
    else:
        if widths is None:
            if values is None:
                raise BoundsError(f"{family}: pass width scalars or explicit widths")
            widths = widths_from_scalars(values, family.bounds)
        widths = [int(w) for w in widths]
        if len(widths) != len(family.bounds):
            raise BoundsError(f"{family}: expected {len(family.bounds)} widths, got {len(widths)}")
        _check_widths(family, widths)
        spec = solve_dependent_width(bind_widths(template, widths), family.budget)
    if count_params(spec) > family.budget:
        raise BudgetError(f"{family}: resolved model exceeds its budget")
    return spec


def make_student(family: StudentFamily, rng: np.random.Generator, values=None, widths=None,
                 init_scale: float = 1.0, dropout_rates=None) -> Model:
    """Instantiate a student; dropout_rates is only for hard-target twins."""
    return build_model(student_spec(family, values, widths), rng, init_scale, dropout_rates)


# ---------------------------------------------------------------------------
# Teachers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TeacherFamily:
    name: str
    template: str
    groups: tuple          # (lo, hi) width range per width token
    scalar_names: tuple    # hyperparameters choosing a point in each range

    def spec(self, point: dict) -> ArchSpec:
        scalars = [point[name] for name in self.scalar_names]
        return bind_widths(parse_template(self.template), widths_from_scalars(scalars, self.groups))


TEACHER_FAMILIES = {
    "teacher-full": TeacherFamily("teacher-full", "c^2-mp-c^2-mp-c^4-mp-fc^2",
                                  ((32, 96), (64, 192), (128, 384), (512, 1536)), ("C1", "C2", "C3", "H1")),
    "teacher-desk": TeacherFamily("teacher-desk", "c-mp-c-mp-fc",
                                  ((8, 24), (16, 48), (64, 192)), ("C1", "C2", "H1")),
}


def teacher_family(name: str) -> TeacherFamily:
    if name not in TEACHER_FAMILIES:
        raise BoundsError(f"unknown teacher family {name!r}; choose from {sorted(TEACHER_FAMILIES)}")
    return TEACHER_FAMILIES[name]
