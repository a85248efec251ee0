"""Encoder and discriminator networks built from the autodiff primitives.

The encoder maps a batch of inputs to three things: the softmax prediction z
(rows sum to one), a "deep" feature d tapped from a late layer, and a
"shallow" feature s tapped from an early layer. Tap positions are part of
the configuration. The discriminator scores concatenated (d, s) pairs for
the mutual-information objective.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError

LAYER_KINDS = ("conv", "maxpool", "avgpool", "linear", "relu", "affine")


@dataclass(frozen=True)
class Layer:
    """One encoder layer. Fields beyond ``kind`` apply only where relevant."""

    kind: str
    out: int = 0          # conv: output channels; linear: output width
    ksize: int = 3        # conv kernel size
    padding: str = "same" # conv padding
    size: int = 2         # pooling window
    stride: int = 0       # pooling stride; 0 means equal to size

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}

    @staticmethod
    def from_dict(d: dict) -> "Layer":
        return Layer(**d)


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture description: layer list, tap indices, class count.

    ``shallow_tap`` and ``deep_tap`` index into the layer list; the flattened
    outputs of those layers become s and d. The final layer must be
    ``linear`` with ``out == num_classes``; a softmax is applied after it.
    """

    input_shape: tuple
    layers: tuple
    shallow_tap: int
    deep_tap: int
    num_classes: int
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.validate()

    def validate(self):
        if not self.layers:
            raise ConfigError("encoder needs at least one layer")
        for layer in self.layers:
            if layer.kind not in LAYER_KINDS:
                raise ConfigError(f"unknown layer kind {layer.kind!r}")
        last = self.layers[-1]
        if last.kind != "linear" or last.out != self.num_classes:
            raise ConfigError(
                "final layer must be linear with width num_classes "
                f"(got {last.kind}({last.out}), num_classes={self.num_classes})"
            )
        n = len(self.layers)
        if not (0 <= self.shallow_tap < self.deep_tap < n):
            raise ConfigError(
                f"taps must satisfy shallow < deep < {n} "
                f"(got shallow={self.shallow_tap}, deep={self.deep_tap})"
            )
        self.trace_shapes()  # raises on inconsistent layer chains

    def trace_shapes(self):
        """Per-layer output shapes (excluding batch), from input_shape."""
        shapes = []
        cur = tuple(self.input_shape)
        for i, layer in enumerate(self.layers):
            if layer.kind == "conv":
                if len(cur) != 3:
                    raise ConfigError(f"layer {i}: conv needs a C,H,W input, got {cur}")
                c, h, w = cur
                if layer.padding == "valid":
                    h, w = h - layer.ksize + 1, w - layer.ksize + 1
                if h < 1 or w < 1:
                    raise ConfigError(f"layer {i}: conv shrinks input below 1x1")
                cur = (layer.out, h, w)
            elif layer.kind in ("maxpool", "avgpool"):
                if len(cur) != 3:
                    raise ConfigError(f"layer {i}: pool needs a C,H,W input, got {cur}")
                c, h, w = cur
                s = layer.stride or layer.size
                if h < layer.size or (h - layer.size) % s or (w - layer.size) % s:
                    raise ConfigError(
                        f"layer {i}: pool {layer.size}/{s} does not tile {h}x{w}"
                    )
                cur = (c, (h - layer.size) // s + 1, (w - layer.size) // s + 1)
            elif layer.kind == "linear":
                cur = (layer.out,)
            elif layer.kind in ("relu", "affine"):
                pass
            shapes.append(cur)
        return shapes

    @property
    def shallow_dim(self) -> int:
        return int(np.prod(self.trace_shapes()[self.shallow_tap]))

    @property
    def deep_dim(self) -> int:
        return int(np.prod(self.trace_shapes()[self.deep_tap]))

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": [l.to_dict() for l in self.layers],
            "shallow_tap": self.shallow_tap,
            "deep_tap": self.deep_tap,
            "num_classes": self.num_classes,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "EncoderConfig":
        return EncoderConfig(
            input_shape=tuple(d["input_shape"]),
            layers=tuple(Layer.from_dict(ld) for ld in d["layers"]),
            shallow_tap=int(d["shallow_tap"]),
            deep_tap=int(d["deep_tap"]),
            num_classes=int(d["num_classes"]),
            seed=int(d.get("seed", 0)),
        )


def conv_encoder_config(input_shape, num_classes, seed=0) -> EncoderConfig:
    """Default image encoder: two conv+affine+relu blocks with pooling, then
    a 64-wide fully connected layer. Shallow tap after the second block's
    relu, deep tap after the fully connected relu."""
    layers = (
        Layer("conv", out=16, ksize=3, padding="same"),
        Layer("affine"),
        Layer("relu"),
        Layer("maxpool", size=2),
        Layer("conv", out=32, ksize=3, padding="same"),
        Layer("affine"),
        Layer("relu"),        # shallow tap
        Layer("maxpool", size=2),
        Layer("linear", out=64),
        Layer("relu"),        # deep tap
        Layer("linear", out=num_classes),
    )
    return EncoderConfig(
        input_shape=tuple(input_shape),
        layers=layers,
        shallow_tap=6,
        deep_tap=9,
        num_classes=num_classes,
        seed=seed,
    )


def mlp_encoder_config(input_shape, num_classes, hidden=(64, 64), seed=0) -> EncoderConfig:
    """Fully connected encoder for vector-like data. Shallow tap after the
    first hidden relu, deep tap after the last."""
    if not hidden:
        raise ConfigError("mlp encoder needs at least one hidden layer for the taps")
    layers = []
    for width in hidden:
        layers.append(Layer("linear", out=width))
        layers.append(Layer("relu"))
    layers.append(Layer("linear", out=num_classes))
    # with a single hidden layer, tap the linear output (shallow) and its relu (deep)
    shallow = 1 if len(hidden) > 1 else 0
    return EncoderConfig(
        input_shape=tuple(input_shape),
        layers=tuple(layers),
        shallow_tap=shallow,
        deep_tap=2 * len(hidden) - 1,
        num_classes=num_classes,
        seed=seed,
    )


def _uniform_init(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class EncoderState:
    """Named parameter tensors plus the config they were built from."""

    config: EncoderConfig
    params: dict = field(default_factory=dict)

    def parameter_checksum(self) -> float:
        return float(sum(np.abs(t.data).sum() for t in self.params.values()))


@dataclass
class DiscriminatorState:
    """Three-layer scorer on concatenated (deep, shallow) features."""

    in_dim: int
    hidden: int
    seed: int
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"in_dim": self.in_dim, "hidden": self.hidden, "seed": self.seed}


def init_encoder(config: EncoderConfig, seed: int | None = None) -> EncoderState:
    """Fresh encoder parameters; the same seed reproduces them bit for bit."""
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    params = {}
    cur = tuple(config.input_shape)
    for i, layer in enumerate(config.layers):
        name = f"layer{i}"
        if layer.kind == "conv":
            c = cur[0]
            k = layer.ksize
            fan_in, fan_out = c * k * k, layer.out * k * k
            params[f"{name}.weight"] = Tensor(
                _uniform_init(rng, (layer.out, c, k, k), fan_in, fan_out),
                requires_grad=True,
            )
            params[f"{name}.bias"] = Tensor(np.zeros(layer.out), requires_grad=True)
            h = cur[1] if layer.padding == "same" else cur[1] - k + 1
            w = cur[2] if layer.padding == "same" else cur[2] - k + 1
            cur = (layer.out, h, w)
        elif layer.kind == "affine":
            c = cur[0]
            params[f"{name}.scale"] = Tensor(np.ones(c), requires_grad=True)
            params[f"{name}.shift"] = Tensor(np.zeros(c), requires_grad=True)
        elif layer.kind == "linear":
            fan_in = int(np.prod(cur))
            params[f"{name}.weight"] = Tensor(
                _uniform_init(rng, (layer.out, fan_in), fan_in, layer.out),
                requires_grad=True,
            )
            params[f"{name}.bias"] = Tensor(np.zeros(layer.out), requires_grad=True)
            cur = (layer.out,)
        elif layer.kind in ("maxpool", "avgpool"):
            s = layer.stride or layer.size
            cur = (cur[0], (cur[1] - layer.size) // s + 1, (cur[2] - layer.size) // s + 1)
    return EncoderState(config=config, params=params)


def init_discriminator(in_dim: int, hidden: int = 128, seed: int = 0) -> DiscriminatorState:
    rng = np.random.default_rng(seed)
    params = {
        "fc0.weight": Tensor(_uniform_init(rng, (hidden, in_dim), in_dim, hidden), requires_grad=True),
        "fc0.bias": Tensor(np.zeros(hidden), requires_grad=True),
        "fc1.weight": Tensor(_uniform_init(rng, (hidden, hidden), hidden, hidden), requires_grad=True),
        "fc1.bias": Tensor(np.zeros(hidden), requires_grad=True),
        "fc2.weight": Tensor(_uniform_init(rng, (1, hidden), hidden, 1), requires_grad=True),
        "fc2.bias": Tensor(np.zeros(1), requires_grad=True),
    }
    return DiscriminatorState(in_dim=in_dim, hidden=hidden, seed=seed, params=params)


def _flatten_batch(x: Tensor) -> Tensor:
    if x.ndim == 2:
        return x
    return x.reshape((x.shape[0], int(np.prod(x.shape[1:]))))


def _layer_forward(layer: Layer, x: Tensor, params: dict, name: str) -> Tensor:
    if layer.kind == "conv":
        w = params[f"{name}.weight"]
        b = params[f"{name}.bias"]
        y = ad.conv2d(x, w, padding=layer.padding)
        return y + b.reshape((1, b.shape[0], 1, 1))
    if layer.kind == "affine":
        scale = params[f"{name}.scale"]
        shift = params[f"{name}.shift"]
        c = scale.shape[0]
        return x * scale.reshape((1, c, 1, 1)) + shift.reshape((1, c, 1, 1))
    if layer.kind == "linear":
        flat = _flatten_batch(x)
        w = params[f"{name}.weight"]
        if flat.shape[1] != w.shape[1]:
            raise DimensionError(
                f"{name}: linear expects width {w.shape[1]}, got {flat.shape[1]}"
            )
        return flat @ w.T + params[f"{name}.bias"]
    if layer.kind == "relu":
        return ad.relu(x)
    if layer.kind == "maxpool":
        return ad.maxpool2d(x, layer.size, layer.stride or layer.size)
    if layer.kind == "avgpool":
        return ad.avgpool2d(x, layer.size, layer.stride or layer.size)
    raise ConfigError(f"unknown layer kind {layer.kind!r}")


def encoder_activations(state: EncoderState, batch: Tensor) -> list:
    """All per-layer outputs, softmax prediction appended last."""
    cfg = state.config
    if tuple(batch.shape[1:]) != cfg.input_shape:
        raise DimensionError(
            f"batch shape {tuple(batch.shape[1:])} does not match "
            f"encoder input {cfg.input_shape}"
        )
    acts = []
    cur = batch
    for i, layer in enumerate(cfg.layers):
        cur = _layer_forward(layer, cur, state.params, f"layer{i}")
        acts.append(cur)
    acts.append(ad.softmax(cur))
    return acts


def encoder_forward(state: EncoderState, batch: Tensor):
    """Run the encoder; returns (z, d, s).

    z is the softmax prediction (B x K), d and s the flattened deep and
    shallow tap activations. Deterministic in (state, batch).
    """
    acts = encoder_activations(state, batch)
    cfg = state.config
    z = acts[-1]
    d = _flatten_batch(acts[cfg.deep_tap])
    s = _flatten_batch(acts[cfg.shallow_tap])
    return z, d, s


def discriminator_score(state: DiscriminatorState, d: Tensor, s: Tensor) -> Tensor:
    """One scalar score per (d, s) row pair; differentiable in everything."""
    if d.shape[0] != s.shape[0]:
        raise DimensionError(
            f"discriminator: {d.shape[0]} deep rows vs {s.shape[0]} shallow rows"
        )
    x = ad.concat([d, s], axis=1)
    if x.shape[1] != state.in_dim:
        raise DimensionError(
            f"discriminator: expected concatenated width {state.in_dim}, got {x.shape[1]}"
        )
    p = state.params
    h = ad.relu(x @ p["fc0.weight"].T + p["fc0.bias"])
    h = ad.relu(h @ p["fc1.weight"].T + p["fc1.bias"])
    out = h @ p["fc2.weight"].T + p["fc2.bias"]
    return out.reshape((out.shape[0],))
