"""
Model graph: an ordered list of layers, each owning its parameters.

Reverse-mode differentiation walks the layer list backwards; every layer
caches what its backward pass needs during forward.
"""
import logging

import numpy as np

from arch.grammar import ArchSpec, NUM_CLASSES, render
from engine.errors import BudgetError, ShapeError
from engine.layers import Affine, Conv2D, Dropout, Flatten, MaxPool2D
from engine.tensor import check_finite, expect_shape, resolve_dtype

logger = logging.getLogger(__name__)


class Model:
    def __init__(self, layers: list, arch: str = None):
        self.layers = list(layers)
        self.arch = arch
        self.training = False

    # -- modes -------------------------------------------------------------

    def train(self) -> "Model":
        self.training = True
        return self

    def eval(self) -> "Model":
        self.training = False
        return self

    # -- parameters --------------------------------------------------------

    def parameters(self) -> list:
        return [p for layer in self.layers for p in layer.parameters()]

    def named_parameters(self) -> dict:
        return {p.name: p for p in self.parameters()}

    def zero_grad(self):
        for param in self.parameters():
            param.zero_grad()

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    @property
    def dtype(self) -> np.dtype:
        params = self.parameters()
        return params[0].value.dtype if params else np.dtype(np.float32)

    def state_dict(self) -> dict:
        return {name: p.value.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict):
        params = self.named_parameters()
        if set(state) != set(params):
            missing, extra = set(params) - set(state), set(state) - set(params)
            raise ShapeError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, value in state.items():
            expect_shape(value, params[name].shape, name)
            params[name].value[...] = value

    # -- passes ------------------------------------------------------------

    def forward(self, x: np.ndarray, rng: np.random.Generator = None) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x, training=self.training, rng=rng)
        return check_finite(x, "forward")

    __call__ = forward

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        for param in self.parameters():
            check_finite(param.grad, f"backward ({param.name})")
        return grad

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Evaluation-mode logits, computed in fixed-size batches."""
        was_training = self.training
        self.eval()
        try:
            out = [self.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
        finally:
            self.training = was_training
        if not out:
            return np.zeros((0, NUM_CLASSES), dtype=self.dtype)
        return np.concatenate(out)

    def __repr__(self):
        return f"Model({self.arch or len(self.layers)}, params={self.num_params:,})"


def dropout_site_names(spec: ArchSpec) -> list:
    """Dropout sites in network order: DOc<i> after each pool, DOf<j> after each ReLU FC layer."""
    names, pools, fcs = [], 0, 0
    for node in spec.body:
        for _ in range(node.repeat):
            if node.kind == "pool":
                pools += 1
                names.append(f"DOc{pools}")
            elif node.kind == "fc":
                fcs += 1
                names.append(f"DOf{fcs}")
    return names


def build_model(spec: ArchSpec, rng: np.random.Generator, init_scale: float = 1.0,
                dropout_rates=None, precision=32) -> Model:
    """
    Instantiate a model from a resolved architecture.

    dropout_rates is either a list with one rate per site (see
    dropout_site_names) or a dict keyed by site name; omitted sites get none.
    """
    if not spec.resolved:
        raise BudgetError(f"cannot build {render(spec)!r}: unresolved width")
    dtype = resolve_dtype(precision)
    sites = dropout_site_names(spec)
    if dropout_rates is None:
        rates = {}
    elif isinstance(dropout_rates, dict):
        rates = dict(dropout_rates)
    else:
        if len(dropout_rates) != len(sites):
            raise ShapeError(f"{len(dropout_rates)} dropout rates for {len(sites)} sites {sites}")
        rates = dict(zip(sites, dropout_rates))

    channels = spec.input_shape[0]
    features = None
    layers = []
    site = iter(sites)
    counters = {"conv": 0, "pool": 0, "fc": 0, "lfc": 0}

    def add_dropout(name):
        rate = rates.get(name, 0.0)
        if rate > 0:
            layers.append(Dropout(f"drop_{name}", rate))

    height, width = spec.input_shape[1:]
    for node in spec.nodes:
        for _ in range(node.repeat):
            if node.kind == "conv":
                layers.append(Conv2D(f"conv{counters['conv']}", channels, node.width, spec.kernel, rng,
                                     init_scale, dtype))
                counters["conv"] += 1
                channels = node.width
                continue
            if node.kind == "pool":
                layers.append(MaxPool2D(f"pool{counters['pool']}", node.window))
                counters["pool"] += 1
                height, width = height // node.window, width // node.window
                add_dropout(next(site))
                continue
            if features is None:
                layers.append(Flatten("flatten"))
                features = channels * height * width
            if node.kind == "output":
                layers.append(Affine("out", features, node.width, "linear", rng, init_scale, dtype))
            else:
                activation = "relu" if node.kind == "fc" else "linear"
                layers.append(Affine(f"{node.kind}{counters[node.kind]}", features, node.width, activation,
                                     rng, init_scale, dtype))
                counters[node.kind] += 1
                if node.kind == "fc":
                    add_dropout(next(site))
            features = node.width
    model = Model(layers, arch=render(spec))
    logger.debug("built %s with %s parameters", model.arch, f"{model.num_params:,}")
    return model
