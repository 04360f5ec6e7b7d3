"""Exact cost accounting: parameters, FLOPs, and activation memory.

Conventions (also embedded in every report):
  - FLOPs are 2x multiply-accumulates, counted for convolutions and linear
    layers only; elementwise and pooling work is excluded.
  - Activation memory follows the training schedule, which retains every
    intermediate tensor for the backward pass, so the peak equals the sum
    of all activations (input included). Flatten is a zero-copy view.
    Elements are 8-byte doubles.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import PlanError
from .graph import AvgPool, Conv, Flatten, Linear, NetworkGraph, Relu, ResidualBlock

__all__ = ["CostReport", "count_costs", "apply_plan_shapes", "factorization_variant"]

ELEMENT_BYTES = 8

CONVENTIONS = {
    "flops": "2 * multiply-accumulates; convolution and linear layers only",
    "activation_memory": (
        "sum of all live activation tensors under the retain-for-backward "
        "training schedule, including the input; flatten is a free view"
    ),
    "element_bytes": ELEMENT_BYTES,
}


class CostReport:
    def __init__(self, param_count, flops, activation_elements, batch, per_layer):
        self.param_count = int(param_count)
        self.flops = int(flops)
        self.activation_elements = int(activation_elements)
        self.peak_activation_bytes = int(activation_elements) * ELEMENT_BYTES
        self.batch = int(batch)
        self.per_layer = list(per_layer)

    def to_dict(self):
        return {
            "schema_version": 1,
            "param_count": self.param_count,
            "flops": self.flops,
            "peak_activation_bytes": self.peak_activation_bytes,
            "activation_elements": self.activation_elements,
            "batch": self.batch,
            "conventions": CONVENTIONS,
            "per_layer": self.per_layer,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2) + "\n"


def _conv_row(conv, h, w, batch):
    oh = (h + 2 * conv.padding - conv.k) // conv.stride + 1
    ow = (w + 2 * conv.padding - conv.k) // conv.stride + 1
    if oh <= 0 or ow <= 0:
        raise PlanError(f"conv {conv.name}: output dims collapse to {oh}x{ow}")
    flops = 2 * conv.c_out * conv.c_in * conv.k * conv.k * oh * ow * batch
    params = conv.w.data.size + conv.b.data.size
    acts = conv.c_out * oh * ow * batch
    row = {
        "name": conv.name,
        "kind": "conv",
        "params": int(params),
        "flops": int(flops),
        "activation_elements": int(acts),
    }
    return row, (conv.c_out, oh, ow)


def count_costs(net, batch=1, input_shape=None):
    """Walk the graph once, accumulating exact per-layer costs."""
    if not net.layers:
        return CostReport(0, 0, 0, batch, [])
    c, h, w = input_shape if input_shape is not None else net.input_shape
    rows = [
        {
            "name": "input",
            "kind": "input",
            "params": 0,
            "flops": 0,
            "activation_elements": int(c * h * w * batch),
        }
    ]

    def emit(name, kind, params, flops, acts):
        rows.append(
            {
                "name": name,
                "kind": kind,
                "params": int(params),
                "flops": int(flops),
                "activation_elements": int(acts),
            }
        )

    flat = None
    for layer in net.layers:
        if isinstance(layer, Conv):
            row, (c, h, w) = _conv_row(layer, h, w, batch)
            rows.append(row)
        elif isinstance(layer, Relu):
            emit(layer.name, "relu", 0, 0, c * h * w * batch)
        elif isinstance(layer, AvgPool):
            h, w = h // layer.k, w // layer.k
            emit(layer.name, "avg_pool", 0, 0, c * h * w * batch)
        elif isinstance(layer, Flatten):
            flat = c * h * w
            emit(layer.name, "flatten", 0, 0, 0)
        elif isinstance(layer, Linear):
            n_in, n_out = layer.in_features, layer.out_features
            emit(
                layer.name,
                "linear",
                layer.w.data.size + layer.b.data.size,
                2 * n_in * n_out * batch,
                n_out * batch,
            )
            flat = n_out
        elif isinstance(layer, ResidualBlock):
            in_dims = (c, h, w)
            bc, bh, bw = in_dims
            for i, conv in enumerate(layer.convs):
                row, (bc, bh, bw) = _conv_row(conv, bh, bw, batch)
                rows.append(row)
                if i < len(layer.convs) - 1:
                    emit(f"{conv.name}.act", "relu", 0, 0, bc * bh * bw * batch)
            if layer.downsample is not None:
                row, _ = _conv_row(layer.downsample, in_dims[1], in_dims[2], batch)
                rows.append(row)
            # The skip add produces a fresh tensor, then the block ReLU another.
            emit(f"{layer.name}.add", "add", 0, 0, bc * bh * bw * batch)
            emit(layer.name, "relu", 0, 0, bc * bh * bw * batch)
            c, h, w = bc, bh, bw
        else:
            raise TypeError(f"unknown layer type {type(layer).__name__}")

    params = sum(r["params"] for r in rows)
    flops = sum(r["flops"] for r in rows)
    acts = sum(r["activation_elements"] for r in rows)
    return CostReport(params, flops, acts, batch, rows)


def apply_plan_shapes(net, plan):
    """Shape-only compression: slice channel dims per plan, values untouched.

    Produces the skeleton whose costs equal the actually compressed
    network's costs; useful before any training happens.
    """
    ranks = plan.resolved_ranks(net)
    skeleton = net.clone()
    for site, r in ranks.items():
        producer = skeleton.conv_by_name(site)
        c_old = producer.c_out
        if r == c_old:
            continue
        kind, consumer = skeleton.consumer_of(site)
        producer.w.data = producer.w.data[:r].copy()
        producer.b.data = producer.b.data[:r].copy()
        if kind == "conv":
            consumer.w.data = consumer.w.data[:, :r].copy()
        else:
            out_f, in_f = consumer.w.data.shape
            # Features flatten channel-major: index = channel * (h*w) + pixel.
            hw = in_f // c_old
            sliced = consumer.w.data.reshape(out_f, c_old, hw)[:, :r, :]
            consumer.w.data = sliced.reshape(out_f, r * hw).copy()
    return skeleton


def factorization_variant(net, plan):
    """The low-rank baseline that keeps an explicit reprojection convolution.

    Each planned site becomes conv[r, c_in, k, k] followed by a k x k
    reprojection conv[c_old, r, k, k] restoring the original width; the
    consumer is untouched. This is the architecture whose pair cost the
    two-sided fold halves. Only chain sites are supported; the comparison
    is not defined for residual-internal sites here.
    """
    ranks = plan.resolved_ranks(net)
    variant = net.clone()
    for site, r in ranks.items():
        if variant.block_of(site) is not None:
            raise PlanError(
                f"factorization variant supports chain sites only, got {site}"
            )
        producer = variant.conv_by_name(site)
        c_old = producer.c_out
        if r == c_old:
            continue
        k = producer.k
        producer.w.data = producer.w.data[:r].copy()
        producer.b.data = producer.b.data[:r].copy()
        reproj = Conv(
            f"{site}.reproj",
            np.zeros((c_old, r, k, k)),
            np.zeros(c_old),
            stride=1,
            padding=k // 2,
        )
        idx = next(
            i for i, layer in enumerate(variant.layers)
            if isinstance(layer, Conv) and layer.name == site
        )
        variant.layers.insert(idx + 1, reproj)
    return variant
