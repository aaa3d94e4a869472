"""Fold a trained linear bottleneck into the layer that follows it."""
import logging
from dataclasses import replace

import numpy as np

from arch.grammar import parse, render
from engine.errors import ShapeError
from engine.layers import Affine
from engine.model import Model

logger = logging.getLogger(__name__)


def _bottleneck_position(model: Model) -> int:
    for i, layer in enumerate(model.layers):
        if isinstance(layer, Affine) and layer.name.startswith("lfc"):
            return i
    raise ShapeError(f"{model.arch}: no linear bottleneck to absorb")


def _absorbed_arch(arch: str) -> str:
    if not arch:
        return arch
    spec = parse(arch)
    nodes = [node for node in spec.nodes if node.kind != "lfc"]
    return render(replace(spec, nodes=tuple(nodes)))


def absorb_bottleneck(model: Model) -> Model:
    """
    Return an equivalent model with the bottleneck merged away.

    x.W1 + b1 followed by (.)W2 + b2 equals x.(W1 W2) + (b1 W2 + b2); the
    product is formed in float64 and cast back to the model's precision.
    """
    index = _bottleneck_position(model)
    linear = model.layers[index]
    if linear.activation != "linear":
        raise ShapeError(f"{linear.name} is not linear; cannot absorb it")
    if index + 1 >= len(model.layers) or not isinstance(model.layers[index + 1], Affine):
        raise ShapeError(f"{linear.name} is not directly followed by an affine layer")
    after = model.layers[index + 1]

    w1, b1 = linear.weight.value.astype(np.float64), linear.bias.value.astype(np.float64)
    w2, b2 = after.weight.value.astype(np.float64), after.bias.value.astype(np.float64)
    dtype = after.weight.value.dtype
    merged = Affine.from_arrays(after.name, (w1 @ w2).astype(dtype), (b1 @ w2 + b2).astype(dtype),
                                after.activation)

    layers = model.layers[:index] + [merged] + model.layers[index + 2:]
    absorbed = Model(layers, arch=_absorbed_arch(model.arch))
    logger.info("Absorbed %s: %s -> %s parameters", linear.name, f"{model.num_params:,}",
                f"{absorbed.num_params:,}")
    return absorbed
