"""Network graphs: layer specs, forward with projection overlays, builders.

A network is an ordered list of layers; residual blocks group their convs
and carry the skip edge internally. Compression touches networks through a
small vocabulary:

  sites()        convolutions whose outputs may be projected,
  protected()    layers that must not be (with the structural reason),
  consumer_of()  the layer that reads a site's channels,
  target_tap()   the tap name whose activations serve as teacher targets.

During projection training the forward pass accepts ``projections``, a
mapping from site name to an orthonormal-column matrix P. The site's output
is mixed down to r channels right after the convolution, and mixed back up
with P^T immediately before the consumer, which is the two-sided composition
that kernel folding later absorbs into the weights.
"""

from __future__ import annotations

import hashlib

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import PlanError, ShapeError

__all__ = [
    "Conv",
    "Relu",
    "AvgPool",
    "Flatten",
    "Linear",
    "ResidualBlock",
    "NetworkGraph",
    "build_small_vgg",
    "build_small_resnet",
]


class Conv:
    def __init__(self, name, w, b, stride=1, padding=1):
        self.name = name
        self.w = w if isinstance(w, Tensor) else Tensor(w, requires_grad=True)
        self.b = b if isinstance(b, Tensor) else Tensor(b, requires_grad=True)
        self.stride = int(stride)
        self.padding = int(padding)

    @property
    def c_out(self):
        return self.w.data.shape[0]

    @property
    def c_in(self):
        return self.w.data.shape[1]

    @property
    def k(self):
        return self.w.data.shape[2]

    def forward(self, x):
        return ad.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class Relu:
    def __init__(self, name):
        self.name = name


class AvgPool:
    def __init__(self, name, k):
        self.name = name
        self.k = int(k)


class Flatten:
    def __init__(self, name):
        self.name = name


class Linear:
    def __init__(self, name, w, b):
        self.name = name
        self.w = w if isinstance(w, Tensor) else Tensor(w, requires_grad=True)
        self.b = b if isinstance(b, Tensor) else Tensor(b, requires_grad=True)

    @property
    def in_features(self):
        return self.w.data.shape[1]

    @property
    def out_features(self):
        return self.w.data.shape[0]

    def forward(self, x):
        return ad.linear(x, self.w, self.b)


class ResidualBlock:
    """Two or more convs with a skip edge; ReLU between convs and after add."""

    def __init__(self, name, convs, downsample=None):
        if len(convs) < 2:
            raise ValueError(f"residual block {name} needs at least 2 convs")
        self.name = name
        self.convs = list(convs)
        self.downsample = downsample

    def forward(self, x, projections, taps):
        h = x
        pending = None
        for i, conv in enumerate(self.convs):
            if pending is not None:
                h = ad.channel_project(h, ad.transpose2d(pending))
                pending = None
            h = conv.forward(h)
            if taps is not None:
                taps[conv.name] = h
            if projections is not None and conv.name in projections:
                p = projections.pop(conv.name)
                h = ad.channel_project(h, p)
                pending = p
            if i < len(self.convs) - 1:
                h = ad.relu(h)
                if taps is not None:
                    taps[f"{conv.name}.act"] = (
                        ad.channel_project(h, ad.transpose2d(pending))
                        if pending is not None
                        else h
                    )
        if pending is not None:
            raise PlanError(
                f"projection on block-final conv {self.convs[-1].name} has no consumer"
            )
        skip = self.downsample.forward(x) if self.downsample is not None else x
        if taps is not None and self.downsample is not None:
            taps[self.downsample.name] = skip
        out = ad.relu(ad.add(h, skip))
        if taps is not None:
            taps[self.name] = out
        return out


class NetworkGraph:
    def __init__(self, layers, input_shape, arch):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.arch = dict(arch)

    # ------------------------------------------------------------------
    # forward

    def forward(self, x, projections=None, record_taps=False):
        """Run the network; returns (output, taps dict).

        ``projections`` maps site name -> orthonormal-column Tensor P. Each
        named site must exist and be consumed downstream; leftovers raise.
        Activation taps always record the full-width boundary signal: for a
        projected conv that is the transpose-restored activation, so taps
        stay comparable against an uncompressed run.
        """
        t = x if isinstance(x, Tensor) else Tensor(x)
        proj = dict(projections) if projections else None
        taps = {} if record_taps else None
        pending = None
        for layer in self.layers:
            if isinstance(layer, Conv):
                if pending is not None:
                    t = ad.channel_project(t, ad.transpose2d(pending))
                    pending = None
                t = layer.forward(t)
                if taps is not None:
                    taps[layer.name] = t
                if proj is not None and layer.name in proj:
                    p = proj.pop(layer.name)
                    t = ad.channel_project(t, p)
                    pending = p
            elif isinstance(layer, Relu):
                t = ad.relu(t)
                if taps is not None:
                    taps[layer.name] = (
                        ad.channel_project(t, ad.transpose2d(pending))
                        if pending is not None
                        else t
                    )
            elif isinstance(layer, AvgPool):
                t = ad.avg_pool(t, layer.k)
                if taps is not None:
                    taps[layer.name] = t
            elif isinstance(layer, Flatten):
                if pending is not None:
                    t = ad.channel_project(t, ad.transpose2d(pending))
                    pending = None
                t = ad.flatten(t)
                if taps is not None:
                    taps[layer.name] = t
            elif isinstance(layer, Linear):
                t = layer.forward(t)
                if taps is not None:
                    taps[layer.name] = t
            elif isinstance(layer, ResidualBlock):
                if pending is not None:
                    t = ad.channel_project(t, ad.transpose2d(pending))
                    pending = None
                t = layer.forward(t, proj, taps)
            else:
                raise TypeError(f"unknown layer type {type(layer).__name__}")
        if proj:
            raise PlanError(f"unknown projection site(s): {sorted(proj)}")
        return t, (taps if taps is not None else {})

    # ------------------------------------------------------------------
    # structure queries

    def convs(self):
        """All convolutions in execution order (block internals included)."""
        out = []
        for layer in self.layers:
            if isinstance(layer, Conv):
                out.append(layer)
            elif isinstance(layer, ResidualBlock):
                out.extend(layer.convs)
                if layer.downsample is not None:
                    out.append(layer.downsample)
        return out

    def linears(self):
        return [l for l in self.layers if isinstance(l, Linear)]

    def protected(self):
        """Map from layer name to the structural reason it is off-limits."""
        reasons = {}
        convs = self.convs()
        if convs:
            reasons[convs[0].name] = "first_conv"
        for layer in self.layers:
            if isinstance(layer, ResidualBlock):
                reasons[layer.convs[-1].name] = "residual_block_final"
                if layer.downsample is not None:
                    reasons[layer.downsample.name] = "downsample"
            elif isinstance(layer, Linear):
                reasons[layer.name] = "classifier_head"
        return reasons

    def sites(self):
        """Names of compressible convolutions, in execution order."""
        off = self.protected()
        names = []
        for layer in self.layers:
            if isinstance(layer, Conv) and layer.name not in off:
                names.append(layer.name)
            elif isinstance(layer, ResidualBlock):
                names.extend(
                    c.name for c in layer.convs if c.name not in off
                )
        return names

    def conv_by_name(self, name):
        for conv in self.convs():
            if conv.name == name:
                return conv
        raise KeyError(f"no conv named {name}")

    def block_of(self, site):
        """The residual block owning a conv name, or None for chain convs."""
        for layer in self.layers:
            if isinstance(layer, ResidualBlock):
                if any(c.name == site for c in layer.convs):
                    return layer
        return None

    def consumer_of(self, site):
        """The layer that reads a site's output channels.

        Returns (kind, layer) with kind in {"conv", "linear"}.
        """
        block = self.block_of(site)
        if block is not None:
            names = [c.name for c in block.convs]
            idx = names.index(site)
            if idx + 1 >= len(names):
                raise PlanError(f"{site} is the final conv of {block.name}")
            return "conv", block.convs[idx + 1]
        walking = False
        for layer in self.layers:
            if isinstance(layer, Conv) and layer.name == site:
                walking = True
                continue
            if not walking:
                continue
            if isinstance(layer, Conv):
                return "conv", layer
            if isinstance(layer, Linear):
                return "linear", layer
            if isinstance(layer, ResidualBlock):
                raise PlanError(
                    f"{site} feeds residual block {layer.name} and is protected"
                )
        raise PlanError(f"no consumer found for site {site}")

    def target_tap(self, site):
        """Tap name whose teacher activations are the training target."""
        block = self.block_of(site)
        if block is not None:
            return block.name
        kind, consumer = self.consumer_of(site)
        if kind == "linear":
            return consumer.name
        # Post-activation of the consumer conv.
        names = [l.name for l in self.layers]
        want = f"{consumer.name}.act"
        if want not in names:
            raise PlanError(f"no activation tap after {consumer.name}")
        return want

    # ------------------------------------------------------------------
    # parameters

    def named_parameters(self):
        """Ordered (name, Tensor) pairs; names are '<layer>.w' / '<layer>.b'."""
        out = []
        for layer in self.layers:
            if isinstance(layer, (Conv, Linear)):
                out.append((f"{layer.name}.w", layer.w))
                out.append((f"{layer.name}.b", layer.b))
            elif isinstance(layer, ResidualBlock):
                pieces = list(layer.convs)
                if layer.downsample is not None:
                    pieces.append(layer.downsample)
                for conv in pieces:
                    out.append((f"{conv.name}.w", conv.w))
                    out.append((f"{conv.name}.b", conv.b))
        return out

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def param_count(self):
        return int(sum(t.data.size for t in self.parameters()))

    def param_hash(self):
        h = hashlib.sha256()
        for name, t in sorted(self.named_parameters()):
            h.update(name.encode())
            h.update(str(t.data.shape).encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def clone(self):
        spec = self.to_spec()
        values = {n: t.data.copy() for n, t in self.named_parameters()}
        net = NetworkGraph.from_spec(spec)
        net.load_values(values)
        return net

    def load_values(self, values):
        for name, t in self.named_parameters():
            if name not in values:
                raise KeyError(f"missing parameter {name}")
            arr = np.asarray(values[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ShapeError(
                    f"parameter {name}: shape {arr.shape} != {t.data.shape}"
                )
            t.data = arr.copy()

    # ------------------------------------------------------------------
    # serialization

    def to_spec(self):
        def conv_spec(c):
            return {
                "kind": "conv",
                "name": c.name,
                "w_shape": list(c.w.data.shape),
                "stride": c.stride,
                "padding": c.padding,
            }

        layers = []
        for layer in self.layers:
            if isinstance(layer, Conv):
                layers.append(conv_spec(layer))
            elif isinstance(layer, Relu):
                layers.append({"kind": "relu", "name": layer.name})
            elif isinstance(layer, AvgPool):
                layers.append({"kind": "avg_pool", "name": layer.name, "k": layer.k})
            elif isinstance(layer, Flatten):
                layers.append({"kind": "flatten", "name": layer.name})
            elif isinstance(layer, Linear):
                layers.append(
                    {
                        "kind": "linear",
                        "name": layer.name,
                        "w_shape": list(layer.w.data.shape),
                    }
                )
            elif isinstance(layer, ResidualBlock):
                layers.append(
                    {
                        "kind": "residual_block",
                        "name": layer.name,
                        "convs": [conv_spec(c) for c in layer.convs],
                        "downsample": (
                            conv_spec(layer.downsample)
                            if layer.downsample is not None
                            else None
                        ),
                    }
                )
        return {
            "input_shape": list(self.input_shape),
            "arch": self.arch,
            "layers": layers,
        }

    @staticmethod
    def from_spec(spec):
        def make_conv(s):
            co, ci, k, _ = s["w_shape"]
            return Conv(
                s["name"],
                np.zeros((co, ci, k, k)),
                np.zeros(co),
                stride=s["stride"],
                padding=s["padding"],
            )

        layers = []
        for s in spec["layers"]:
            kind = s["kind"]
            if kind == "conv":
                layers.append(make_conv(s))
            elif kind == "relu":
                layers.append(Relu(s["name"]))
            elif kind == "avg_pool":
                layers.append(AvgPool(s["name"], s["k"]))
            elif kind == "flatten":
                layers.append(Flatten(s["name"]))
            elif kind == "linear":
                o, i = s["w_shape"]
                layers.append(Linear(s["name"], np.zeros((o, i)), np.zeros(o)))
            elif kind == "residual_block":
                convs = [make_conv(c) for c in s["convs"]]
                down = make_conv(s["downsample"]) if s["downsample"] else None
                layers.append(ResidualBlock(s["name"], convs, down))
            else:
                raise ValueError(f"unknown layer kind {kind}")
        return NetworkGraph(layers, tuple(spec["input_shape"]), dict(spec["arch"]))


# ---------------------------------------------------------------------------
# builders


def _he_conv(rng, name, c_in, c_out, k, stride=1, padding=1):
    std = np.sqrt(2.0 / (c_in * k * k))
    w = rng.normal(0.0, std, size=(c_out, c_in, k, k))
    return Conv(name, w, np.zeros(c_out), stride=stride, padding=padding)


def _he_linear(rng, name, n_in, n_out):
    std = np.sqrt(2.0 / n_in)
    return Linear(name, rng.normal(0.0, std, size=(n_out, n_in)), np.zeros(n_out))


def build_small_vgg(width_multiplier=1.0, num_classes=4, seed=0):
    """Plain 4-conv chain: two 3->w->w convs per stage, 2x pool after each."""
    if width_multiplier <= 0:
        raise ValueError(f"width_multiplier must be positive, got {width_multiplier}")
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    w1 = max(1, int(round(16 * width_multiplier)))
    w2 = max(1, int(round(32 * width_multiplier)))
    rng = np.random.default_rng(seed)
    layers = [
        _he_conv(rng, "conv1", 3, w1, 3),
        Relu("conv1.act"),
        _he_conv(rng, "conv2", w1, w1, 3),
        Relu("conv2.act"),
        AvgPool("pool1", 2),
        _he_conv(rng, "conv3", w1, w2, 3),
        Relu("conv3.act"),
        _he_conv(rng, "conv4", w2, w2, 3),
        Relu("conv4.act"),
        AvgPool("pool2", 2),
        Flatten("flatten"),
        _he_linear(rng, "linear", w2 * 8 * 8, num_classes),
    ]
    return NetworkGraph(
        layers,
        (3, 32, 32),
        {"family": "small_vgg", "width_multiplier": width_multiplier,
         "num_classes": num_classes},
    )


def _basic_block(rng, name, c_in, c_out, stride):
    convs = [
        _he_conv(rng, f"{name}.conv1", c_in, c_out, 3, stride=stride),
        _he_conv(rng, f"{name}.conv2", c_out, c_out, 3),
    ]
    down = None
    if stride != 1 or c_in != c_out:
        down = _he_conv(rng, f"{name}.down", c_in, c_out, 1, stride=stride, padding=0)
    return ResidualBlock(name, convs, down)


def build_small_resnet(depth="18-lite", num_classes=4, seed=0):
    """Two-conv basic blocks with identity or 1x1-conv skips.

    18-lite: stem + 2 blocks (16, 32), pool to 1x1.
    56-lite: stem + 3 stages x 2 blocks (16, 32, 64), pool to 1x1.
    """
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    rng = np.random.default_rng(seed)
    if depth == "18-lite":
        layers = [
            _he_conv(rng, "stem", 3, 16, 3),
            Relu("stem.act"),
            _basic_block(rng, "block1", 16, 16, 1),
            _basic_block(rng, "block2", 16, 32, 2),
            AvgPool("avgpool", 16),
            Flatten("flatten"),
            _he_linear(rng, "linear", 32, num_classes),
        ]
    elif depth == "56-lite":
        layers = [_he_conv(rng, "stem", 3, 16, 3), Relu("stem.act")]
        widths = [16, 32, 64]
        c_in = 16
        for s, width in enumerate(widths, start=1):
            for b in range(1, 3):
                stride = 2 if (b == 1 and s > 1) else 1
                layers.append(
                    _basic_block(rng, f"stage{s}.block{b}", c_in, width, stride)
                )
                c_in = width
        layers += [
            AvgPool("avgpool", 8),
            Flatten("flatten"),
            _he_linear(rng, "linear", 64, num_classes),
        ]
    else:
        raise ValueError(f"unsupported depth {depth!r}; use '18-lite' or '56-lite'")
    return NetworkGraph(
        layers,
        (3, 32, 32),
        {"family": "small_resnet", "depth": depth, "num_classes": num_classes},
    )
