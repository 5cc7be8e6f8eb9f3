"""Small FCN-style encoder/decoder with named, tappable blocks.

Block order for ``depth=3``::

    enc1 (H/2) -> enc2 (H/4) -> enc3 (H/8) -> ctx (H/8)
      -> dec2 (H/4, + enc2 skip) -> dec1 (H/2, + enc1 skip) -> head (H/2)
      -> logits (H)

The two decoder fusions mirror FCN-8s, which merges the two finer pooling
stages into the coarse score map. Taps are the last ``tap_count`` blocks and
are recorded after their nonlinearity.
"""

import hashlib
import os
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensorio import read_tensor, write_tensor


@dataclass
class Layer:
    name: str
    kind: str
    in_channels: int
    out_channels: int
    stride: int = 1
    kernel: int = 3
    skip: str = None
    scale: int = 1

    def describe(self):
        parts = [self.name, self.kind, f"in={self.in_channels}", f"out={self.out_channels}",
                 f"k={self.kernel}", f"stride={self.stride}"]
        if self.skip:
            parts.append(f"skip={self.skip}")
        if self.scale != 1:
            parts.append(f"up={self.scale}")
        return " ".join(parts)


@dataclass
class SegNetwork:
    num_classes: int
    channels_base: int
    depth: int
    layers: list
    params: "OrderedDict[str, T.Tensor]"
    tap_names: list
    seed: int = 0
    upsample_mode: str = "bilinear"
    extra: dict = field(default_factory=dict)

    @property
    def parameters(self):
        return list(self.params.values())

    @property
    def layer_names(self):
        return [layer.name for layer in self.layers]

    def parameter_count(self):
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def snapshot(self):
        """Detached copy of the network, safe to hand to another worker."""
        params = OrderedDict((k, T.Tensor(v.data.copy(), requires_grad=True, name=k))
                             for k, v in self.params.items())
        return SegNetwork(self.num_classes, self.channels_base, self.depth, list(self.layers),
                          params, list(self.tap_names), self.seed, self.upsample_mode)

    def config_hash(self):
        text = "\n".join([f"num_classes={self.num_classes}", f"channels_base={self.channels_base}",
                          f"depth={self.depth}", f"taps={','.join(self.tap_names)}",
                          f"upsample={self.upsample_mode}"] + [l.describe() for l in self.layers])
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _topology(num_classes, channels_base, depth):
    c = channels_base
    enc_ch = [c * 2 ** i for i in range(depth)]
    layers = []
    in_ch = 3
    for i, ch in enumerate(enc_ch, start=1):
        layers.append(Layer(f"enc{i}", "conv_relu", in_ch, ch, stride=2))
        in_ch = ch
    layers.append(Layer("ctx", "conv_relu", in_ch, in_ch))
    for i in (depth - 1, depth - 2):
        layers.append(Layer(f"dec{i}", "up_fuse", in_ch, enc_ch[i - 1], kernel=1, skip=f"enc{i}", scale=2))
        in_ch = enc_ch[i - 1]
    layers.append(Layer("head", "conv_relu", in_ch, in_ch))
    layers.append(Layer("logits", "score_up", in_ch, num_classes, kernel=1, scale=2 ** (depth - 2)))
    return layers


def build(num_classes, channels_base=8, depth=3, tap_count=5, seed=0, upsample_mode="bilinear"):
    """Construct a network with He-style fan-in initialisation from ``seed``."""
    if depth < 3:
        raise ConfigError(f"depth must be >= 3, got {depth}")
    if num_classes < 2 or channels_base < 1:
        raise ConfigError("need num_classes >= 2 and channels_base >= 1")
    layers = _topology(num_classes, channels_base, depth)
    if not 1 <= tap_count <= len(layers):
        raise ConfigError(f"tap_count must be in [1, {len(layers)}], got {tap_count}")
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    for layer in layers:
        fan_in = layer.in_channels * layer.kernel * layer.kernel
        w = rng.standard_normal((layer.out_channels, layer.in_channels, layer.kernel, layer.kernel))
        params[f"{layer.name}.weight"] = T.parameter(w * np.sqrt(2.0 / fan_in), name=f"{layer.name}.weight")
        params[f"{layer.name}.bias"] = T.parameter(np.zeros(layer.out_channels), name=f"{layer.name}.bias")
    taps = [layer.name for layer in layers[-tap_count:]]
    return SegNetwork(num_classes, channels_base, depth, layers, params, taps, seed, upsample_mode)


def _upsample(x, factor, mode):
    n, c, h, w = x.shape
    return T.resize2d(x, h * factor, w * factor, mode=mode)


def forward(net, image, record_all=False):
    """Run the network; returns ``(logits, acts)`` with acts keyed by tap name."""
    if not isinstance(image, T.Tensor):
        image = T.Tensor(image)
    if image.ndim != 4 or image.shape[1] != 3:
        raise DimensionError(f"expected N x 3 x H x W input, got {image.shape}")
    h, w = image.shape[2:]
    unit = 2 ** net.depth
    if h % unit:
        raise DimensionError(f"height axis (2): {h} not divisible by {unit}")
    if w % unit:
        raise DimensionError(f"width axis (3): {w} not divisible by {unit}")
    p = net.params
    outputs = {}
    x = image
    for layer in net.layers:
        wgt, b = p[f"{layer.name}.weight"], p[f"{layer.name}.bias"]
        if layer.kind == "conv_relu":
            x = T.relu(T.conv2d(x, wgt, b, stride=layer.stride, pad=layer.kernel // 2))
        elif layer.kind == "up_fuse":
            x = T.relu(_upsample(T.conv2d(x, wgt, b), layer.scale, net.upsample_mode) + outputs[layer.skip])
        elif layer.kind == "score_up":
            x = T.conv2d(x, wgt, b)
            if layer.scale != 1:
                x = _upsample(x, layer.scale, net.upsample_mode)
        else:  # pragma: no cover
            raise ConfigError(f"unknown layer kind {layer.kind}")
        outputs[layer.name] = x
    keep = net.layer_names if record_all else net.tap_names
    acts = OrderedDict((name, outputs[name]) for name in keep)
    return x, acts


def predict(net, images):
    """Argmax class ids for a float image batch, without building a graph."""
    params = net.params
    detached = OrderedDict((k, T.Tensor(v.data)) for k, v in params.items())
    probe = SegNetwork(net.num_classes, net.channels_base, net.depth, net.layers, detached,
                       net.tap_names, net.seed, net.upsample_mode)
    logits, _ = forward(probe, T.Tensor(images))
    return logits.data.argmax(axis=1)


# checkpoints ----------------------------------------------------------------


def save_checkpoint(net, directory, config_hash=None):
    os.makedirs(directory, exist_ok=True)
    lines = ["# drpc checkpoint", f"num_classes={net.num_classes}", f"channels_base={net.channels_base}",
             f"depth={net.depth}", f"seed={net.seed}", f"upsample={net.upsample_mode}",
             f"taps={','.join(net.tap_names)}", f"network_hash={net.config_hash()}",
             f"config_hash={config_hash or ''}"]
    lines += [f"layer {layer.describe()}" for layer in net.layers]
    for name, tensor in net.params.items():
        fname = name.replace(".", "_") + ".drpc"
        write_tensor(os.path.join(directory, fname), tensor.data)
        lines.append(f"param {name} {fname}")
    with open(os.path.join(directory, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(directory):
    path = os.path.join(directory, "manifest.txt")
    meta, files = {}, OrderedDict()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("layer "):
                continue
            if line.startswith("param "):
                _, name, fname = line.split()
                files[name] = fname
            else:
                key, _, value = line.partition("=")
                meta[key] = value
    taps = meta["taps"].split(",")
    net = build(int(meta["num_classes"]), int(meta["channels_base"]), int(meta["depth"]),
                tap_count=len(taps), seed=int(meta["seed"]), upsample_mode=meta.get("upsample", "bilinear"))
    if net.tap_names != taps or net.config_hash() != meta["network_hash"]:
        raise ConfigError(f"checkpoint topology in {directory} does not match this network builder")
    for name, fname in files.items():
        data = read_tensor(os.path.join(directory, fname))
        if data.shape != net.params[name].shape:
            raise DimensionError(f"parameter {name}: stored shape {data.shape}, expected {net.params[name].shape}")
        net.params[name].data = data.astype(np.float64)
    net.extra["config_hash"] = meta.get("config_hash", "")
    return net
