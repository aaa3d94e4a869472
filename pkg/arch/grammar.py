"""
Architecture string grammar.

Tokens are joined by '-':

    k5          kernel size for every conv layer (optional, first token; default 3)
    76c, 76c^2  conv layer(s) with 76 filters
    mp, mp3     max-pooling over 2x2 (mp) or 3x3 (mp3) windows
    1200fc^2    ReLU fully-connected layer(s)
    400lfc      linear bottleneck layer
    c, fc, lfc  width-free token: the dependent width in a strict parse,
                a free slot in a template

Superscript repeats ("148c⁴") are accepted and rendered as "^4". The 10-way
output layer is implicit.
"""
import re
from dataclasses import dataclass, field, replace

from engine.errors import ArchParseError, BoundsError, BudgetError

NUM_CLASSES = 10
INPUT_SHAPE = (3, 32, 32)
WIDTH_KINDS = ("conv", "fc", "lfc")

_TOKEN_KIND = {"c": "conv", "fc": "fc", "lfc": "lfc"}
_KIND_TOKEN = {v: k for k, v in _TOKEN_KIND.items()}
_SUPERSCRIPTS = str.maketrans("⁰¹²³⁴⁵⁶⁷⁸⁹", "0123456789")
_TOKEN_RE = re.compile(
    r"^(?:(?P<width>\d+)?(?P<kind>lfc|fc|c)(?:\^(?P<repeat>\d+))?"
    r"|mp(?P<window>\d)?"
    r"|k(?P<kernel>\d+))$"
)


@dataclass(frozen=True)
class LayerNode:
    kind: str  # conv | pool | fc | lfc | output
    width: int = None
    repeat: int = 1
    window: int = 2
    dependent: bool = False

    def __post_init__(self):
        if self.repeat < 1:
            raise ValueError(f"repeat must be >= 1, got {self.repeat}")

    @property
    def has_width(self) -> bool:
        return self.kind in WIDTH_KINDS

    @property
    def is_free(self) -> bool:
        return self.has_width and self.width is None and not self.dependent


@dataclass(frozen=True)
class ArchSpec:
    nodes: tuple
    kernel: int = 3
    input_shape: tuple = INPUT_SHAPE

    @property
    def body(self) -> tuple:
        """Nodes without the implicit output layer."""
        return self.nodes[:-1]

    @property
    def dependent_index(self):
        for i, node in enumerate(self.nodes):
            if node.dependent:
                return i
        return None

    @property
    def free_indices(self) -> list:
        return [i for i, node in enumerate(self.nodes) if node.is_free]

    @property
    def resolved(self) -> bool:
        return all(node.width is not None for node in self.nodes if node.has_width)

    @property
    def n_conv(self) -> int:
        return sum(n.repeat for n in self.nodes if n.kind == "conv")

    @property
    def has_bottleneck(self) -> bool:
        return any(n.kind == "lfc" for n in self.nodes)

    def with_dependent(self, width: int) -> "ArchSpec":
        index = self.dependent_index
        if index is None:
            raise BudgetError("architecture has no dependent width")
        nodes = list(self.nodes)
        nodes[index] = replace(nodes[index], width=int(width), dependent=False)
        return replace(self, nodes=tuple(nodes))

    def __str__(self):
        return render(self)


@dataclass(frozen=True)
class WidthScalars:
    """Searched width constants, each in [0, 1]."""

    values: tuple
    names: tuple = field(default=None)

    def __post_init__(self):
        for i, value in enumerate(self.values):
            if not 0.0 <= value <= 1.0:
                name = self.names[i] if self.names else f"#{i}"
                raise BoundsError(f"width scalar {name}={value} outside [0, 1]")


# ---------------------------------------------------------------------------
# Parsing and rendering
# ---------------------------------------------------------------------------

def _normalize(text: str) -> str:
    text = re.sub(r"[⁰¹²³⁴⁵⁶⁷⁸⁹]+", lambda m: "^" + m.group(0).translate(_SUPERSCRIPTS), text)
    return text.replace(" ", "")


def _tokenize(text: str) -> tuple:
    text = _normalize(text)
    if not text:
        raise ArchParseError("empty architecture string", 0)
    nodes = []
    kernel = 3
    position = 0
    seen_fc = False
    for index, token in enumerate(text.split("-")):
        match = _TOKEN_RE.match(token)
        if match is None:
            raise ArchParseError(f"unknown token {token!r}", position)
        if match.group("kernel") is not None:
            if index != 0:
                raise ArchParseError("kernel token must come first", position)
            kernel = int(match.group("kernel"))
            if kernel % 2 == 0 or kernel < 1:
                raise ArchParseError(f"kernel size must be odd, got {kernel}", position)
        elif token.startswith("mp"):
            window = int(match.group("window") or 2)
            if window not in (2, 3):
                raise ArchParseError(f"pool window must be 2 or 3, got {window}", position)
            if seen_fc:
                raise ArchParseError("pooling after a fully-connected layer", position)
            nodes.append((LayerNode("pool", window=window), position))
        else:
            kind = _TOKEN_KIND[match.group("kind")]
            width = match.group("width")
            repeat = int(match.group("repeat") or 1)
            if repeat < 1:
                raise ArchParseError("repeat must be >= 1", position)
            if width is not None and int(width) < 1:
                raise ArchParseError("width must be >= 1", position)
            if kind == "conv" and seen_fc:
                raise ArchParseError("convolution after a fully-connected layer", position)
            seen_fc = seen_fc or kind != "conv"
            nodes.append((LayerNode(kind, None if width is None else int(width), repeat), position))
        position += len(token) + 1
    if not nodes:
        raise ArchParseError("architecture has no layers", 0)
    return nodes, kernel


def parse(text: str) -> ArchSpec:
    """Strict parse: at most one width-free token, which becomes the dependent width."""
    tokens, kernel = _tokenize(text)
    nodes = []
    dependent_seen = False
    for node, position in tokens:
        if node.has_width and node.width is None:
            if dependent_seen:
                raise ArchParseError("more than one dependent width", position)
            dependent_seen = True
            node = replace(node, dependent=True)
        nodes.append(node)
    nodes.append(LayerNode("output", width=NUM_CLASSES))
    return ArchSpec(tuple(nodes), kernel=kernel)


def parse_template(text: str, dependent: str = None, occurrence: int = -1) -> ArchSpec:
    """
    Parse a shape template whose width-free tokens are free slots.

    dependent names the kind ("c", "fc" or "lfc") of the one slot solved for
    the budget; occurrence picks among several width-free tokens of that kind.
    """
    tokens, kernel = _tokenize(text)
    nodes = [node for node, _ in tokens]
    if dependent is not None:
        kind = _TOKEN_KIND.get(dependent, dependent)
        candidates = [i for i, n in enumerate(nodes) if n.kind == kind and n.width is None]
        if not candidates:
            raise ArchParseError(f"no width-free {dependent!r} slot to make dependent", 0)
        index = candidates[occurrence]
        nodes[index] = replace(nodes[index], dependent=True)
    nodes.append(LayerNode("output", width=NUM_CLASSES))
    return ArchSpec(tuple(nodes), kernel=kernel)


def render(spec: ArchSpec) -> str:
    tokens = [] if spec.kernel == 3 else [f"k{spec.kernel}"]
    for node in spec.body:
        if node.kind == "pool":
            tokens.append("mp" if node.window == 2 else f"mp{node.window}")
            continue
        token = ("" if node.width is None else str(node.width)) + _KIND_TOKEN[node.kind]
        if node.repeat > 1:
            token += f"^{node.repeat}"
        tokens.append(token)
    return "-".join(tokens)


def canonical(text: str) -> str:
    return render(parse(text))


def bind_widths(template: ArchSpec, widths) -> ArchSpec:
    """Fill the template's free slots, in order, with concrete widths."""
    free = template.free_indices
    widths = [int(w) for w in widths]
    if len(widths) != len(free):
        raise BoundsError(f"template has {len(free)} free widths, got {len(widths)}")
    nodes = list(template.nodes)
    for index, width in zip(free, widths):
        if width < 1:
            raise BoundsError(f"width must be >= 1, got {width}")
        nodes[index] = replace(nodes[index], width=width)
    return replace(template, nodes=tuple(nodes))


# ---------------------------------------------------------------------------
# Parameter counting
# ---------------------------------------------------------------------------

def layer_params(spec: ArchSpec) -> list:
    """Per-layer (label, parameter count), repeats unrolled, same-padded convs."""
    if not spec.resolved:
        raise BudgetError(f"unresolved width in {render(spec)!r}")
    channels, height, width = spec.input_shape
    features = None
    rows = []
    for node in spec.nodes:
        for _ in range(node.repeat):
            if node.kind == "conv":
                rows.append((f"{node.width}c", (channels * spec.kernel ** 2 + 1) * node.width))
                channels = node.width
            elif node.kind == "pool":
                height, width = height // node.window, width // node.window
                if height == 0 or width == 0:
                    raise BudgetError(f"pooling shrinks the feature map to nothing in {render(spec)!r}")
                rows.append(("mp" if node.window == 2 else f"mp{node.window}", 0))
            else:
                if features is None:
                    features = channels * height * width
                label = {"fc": f"{node.width}fc", "lfc": f"{node.width}lfc", "output": "out"}[node.kind]
                rows.append((label, (features + 1) * node.width))
                features = node.width
    return rows


def count_params(spec: ArchSpec) -> int:
    return sum(count for _, count in layer_params(spec))


def describe(spec: ArchSpec) -> dict:
    rows = layer_params(spec)
    return {
        "arch": render(spec),
        "kernel": spec.kernel,
        "nodes": [label for label, _ in rows],
        "widths": [n.width for n in spec.nodes if n.has_width for _ in range(n.repeat)],
        "params": [count for _, count in rows],
        "total": sum(count for _, count in rows),
    }


# ---------------------------------------------------------------------------
# Width solvers
# ---------------------------------------------------------------------------

def round_half_up(value: float) -> int:
    return int(value + 0.5) if value >= 0 else -int(-value + 0.5)


def _largest_fitting(count, budget: int, what: str) -> int:
    """Largest w >= 1 with count(w) <= budget, for count non-decreasing in w."""
    if count(1) > budget:
        raise BudgetError(f"budget {budget:,} too small: {what} needs {count(1):,} parameters at width 1")
    lo, hi = 1, 2
    while count(hi) <= budget:
        lo, hi = hi, hi * 2
        if hi > 1 << 40:
            raise BudgetError(f"{what}: width unbounded under budget {budget:,}")
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if count(mid) <= budget:
            lo = mid
        else:
            hi = mid
    return lo


def solve_dependent_width(template: ArchSpec, budget: int) -> ArchSpec:
    """Resolve the dependent width to the largest value that keeps the model within budget."""
    if template.dependent_index is None:
        raise BudgetError(f"{render(template)!r} has no dependent width")
    if template.free_indices:
        raise BudgetError(f"{render(template)!r} still has unbound free widths")
    width = _largest_fitting(lambda w: count_params(template.with_dependent(w)), budget, render(template))
    return template.with_dependent(width)


def widths_from_scalars(scalars, bounds) -> list:
    """Map each scalar in [0, 1] affinely onto its [lo, hi] bound, rounding half up."""
    values = scalars.values if isinstance(scalars, WidthScalars) else tuple(scalars)
    WidthScalars(values)
    if len(values) != len(bounds):
        raise BoundsError(f"{len(values)} scalars for {len(bounds)} bounds")
    widths = []
    for value, (lo, hi) in zip(values, bounds):
        if lo > hi:
            raise BoundsError(f"bound [{lo}, {hi}] is empty")
        widths.append(round_half_up(lo + value * (hi - lo)))
    return widths


def chain_params(widths, input_features: int = 3 * 32 * 32, classes: int = NUM_CLASSES) -> int:
    """Parameters of a fully-connected chain input -> widths... -> classes."""
    total, previous = 0, input_features
    for width in list(widths) + [classes]:
        total += (previous + 1) * width
        previous = width
    return total


def ratio_widths(ratios, scale: int) -> list:
    """Widths for a given size of the largest layer: max(1, round(scale * r / max r))."""
    peak = max(ratios)
    return [max(1, round_half_up(scale * r / peak)) for r in ratios]


def widths_from_ratios(ratios, budget: int, depth: int = None, input_features: int = 3 * 32 * 32,
                       classes: int = NUM_CLASSES) -> list:
    """
    Allocate hidden widths for a fully-connected student from searched ratios.

    Ratios are normalized by their maximum and scaled by the largest factor that
    keeps the chain within budget; leftover budget then goes to the largest layer.
    """
    ratios = [float(r) for r in ratios]
    if depth is not None and depth != len(ratios):
        raise BoundsError(f"depth {depth} but {len(ratios)} ratios")
    if len(ratios) < 2:
        raise BoundsError("ratio allocation needs at least two layers")
    WidthScalars(tuple(ratios))
    if max(ratios) <= 0:
        raise BudgetError("all width ratios are zero")

    def count(scale):
        return chain_params(ratio_widths(ratios, scale), input_features, classes)

    scale = _largest_fitting(count, budget, "ratio-allocated MLP")
    widths = ratio_widths(ratios, scale)
    largest = ratios.index(max(ratios))
    while True:
        trial = list(widths)
        trial[largest] += 1
        if chain_params(trial, input_features, classes) > budget:
            return widths
        widths = trial
