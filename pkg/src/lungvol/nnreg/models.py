"""Regression architectures: single-view CNN, dual-view CNN, ensemble averaging.

The six-stage backbone doubles its channel count per stage starting at 32 and
halves the spatial size per stage, so the input side must be divisible by
2**stages.  The regression head maps the pooled (default) or flattened features
through 512 and 128 units to a single output in liters.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from .layers import (
    BatchNorm2d,
    Conv2d,
    Flatten,
    GlobalAvgPool,
    Layer,
    Linear,
    MaxPool2d,
    ReLU,
)

VARIANTS = ("frontal", "lateral", "dual")
HEAD_MODES = ("pool", "flatten")
FIRST_STAGE_CHANNELS = 32
HEAD_WIDTHS = (512, 128)


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description; instantiate_model turns it into a network."""

    variant: str = "frontal"
    backbone: str = "six_layer"
    input_size: int = 128
    in_channels: int = 1
    stages: int = 6
    head: str = "pool"

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.backbone not in _BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}; registered: {sorted(_BACKBONES)}")
        if self.head not in HEAD_MODES:
            raise ValueError(f"head must be one of {HEAD_MODES}, got {self.head!r}")
        if self.stages < 1:
            raise ValueError("stages must be >= 1")
        div = 2 ** self.stages
        if self.input_size <= 0 or self.input_size % div:
            raise ValueError(f"input size {self.input_size} not divisible by 2^{self.stages}")

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def build_six_layer_cnn(view: str = "frontal", input_size: int = 128,
                        in_channels: int = 1, head: str = "pool",
                        stages: int = 6) -> ModelSpec:
    spec = ModelSpec(variant=view, backbone="six_layer", input_size=input_size,
                     in_channels=in_channels, stages=stages, head=head)
    spec.validate()
    return spec


def build_dual_cnn(backbone: ModelSpec) -> ModelSpec:
    """Dual network: two independent-weight branches of `backbone`, features concatenated."""
    backbone.validate()
    if backbone.variant == "dual":
        raise ValueError("dual backbone cannot itself be dual")
    spec = ModelSpec(variant="dual", backbone=backbone.backbone,
                     input_size=backbone.input_size, in_channels=backbone.in_channels,
                     stages=backbone.stages, head=backbone.head)
    spec.validate()
    return spec


# ---------------------------------------------------------------------------
# Backbone registry (plug-in point for alternative architectures)
# ---------------------------------------------------------------------------

def _six_layer_trunk(spec: ModelSpec, rng: np.random.Generator, dtype):
    layers: list[tuple[str, Layer]] = []
    cin = spec.in_channels
    for i in range(spec.stages):
        cout = FIRST_STAGE_CHANNELS * 2 ** i
        layers.append((f"conv{i + 1}", Conv2d(cin, cout, rng, dtype=dtype,
                                              compute_input_grad=i > 0)))
        layers.append((f"relu{i + 1}", ReLU()))
        layers.append((f"bn{i + 1}", BatchNorm2d(cout, dtype=dtype)))
        layers.append((f"pool{i + 1}", MaxPool2d()))
        cin = cout
    side = spec.input_size // 2 ** spec.stages
    if spec.head == "pool":
        layers.append(("gap", GlobalAvgPool()))
        feat = cin
    else:
        layers.append(("flatten", Flatten()))
        feat = cin * side * side
    return layers, feat


_BACKBONES = {"six_layer": _six_layer_trunk}


def register_backbone(name: str, builder) -> None:
    """Register a trunk builder: fn(spec, rng, dtype) -> (named layer list, feature length)."""
    if name in _BACKBONES:
        raise ValueError(f"backbone {name!r} already registered")
    _BACKBONES[name] = builder


def _build_head(feat: int, rng: np.random.Generator, dtype):
    return [
        ("fc1", Linear(feat, HEAD_WIDTHS[0], rng, dtype=dtype)),
        ("fc1_relu", ReLU()),
        ("fc2", Linear(HEAD_WIDTHS[0], HEAD_WIDTHS[1], rng, dtype=dtype)),
        ("fc2_relu", ReLU()),
        ("fc3", Linear(HEAD_WIDTHS[1], 1, rng, dtype=dtype)),
    ]


def _to_channels_last(x: np.ndarray, spec: ModelSpec) -> np.ndarray:
    """Validate an interface (B, C, H, W) tensor and convert to internal layout."""
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ValueError(f"expected (B,{spec.in_channels},H,W) input, got {x.shape}")
    _, _, h, w = x.shape
    div = 2 ** spec.stages
    if h % div or w % div:
        raise ValueError(f"input {h}x{w} not divisible by 2^{spec.stages}")
    if spec.head == "flatten" and (h != spec.input_size or w != spec.input_size):
        raise ValueError(f"flatten head requires {spec.input_size}x{spec.input_size} inputs, got {h}x{w}")
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def _to_interface(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


class _Network:
    """Shared plumbing over named layer stacks."""

    spec: ModelSpec

    def _stacks(self) -> list[tuple[str, list[tuple[str, Layer]]]]:
        raise NotImplementedError

    def parameters(self) -> list[tuple[str, "Parameter"]]:
        out = []
        for prefix, stack in self._stacks():
            for lname, layer in stack:
                for pname, p in layer.parameters():
                    out.append((f"{prefix}{lname}.{pname}", p))
        return out

    def state_records(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for prefix, stack in self._stacks():
            for lname, layer in stack:
                for pname, p in layer.parameters():
                    out.append((f"{prefix}{lname}.{pname}", p.data))
                for bname, b in layer.buffers():
                    out.append((f"{prefix}{lname}.{bname}", b))
        return out

    def load_state_records(self, records: dict[str, np.ndarray]) -> None:
        expected = [name for name, _ in self.state_records()]
        missing = [n for n in expected if n not in records]
        extra = [n for n in records if n not in expected]
        if missing or extra:
            raise ValueError(f"state mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for prefix, stack in self._stacks():
            for lname, layer in stack:
                for pname, p in layer.parameters():
                    value = records[f"{prefix}{lname}.{pname}"]
                    if value.shape != p.data.shape:
                        raise ValueError(f"shape mismatch for {prefix}{lname}.{pname}: "
                                         f"{value.shape} vs {p.data.shape}")
                    p.data = value.astype(p.data.dtype)
                    p.grad = np.zeros_like(p.data)
                for bname, _ in layer.buffers():
                    layer.load_buffer(bname, records[f"{prefix}{lname}.{bname}"])

    def zero_grad(self) -> None:
        for _, p in self.parameters():
            p.zero_grad()

    def set_dtype(self, dtype) -> None:
        for _, stack in self._stacks():
            for _, layer in stack:
                layer.set_dtype(dtype)

    def set_output_bias(self, value: float) -> None:
        """Initialize the regression output bias (e.g. to the training-label mean)."""
        fc3 = dict(self._stacks()[-1][1])["fc3"]
        fc3.bias.data[...] = value

    def num_parameters(self) -> int:
        return sum(p.data.size for _, p in self.parameters())


class SingleViewCNN(_Network):
    def __init__(self, spec: ModelSpec, seed: int, dtype=np.float32):
        spec.validate()
        if spec.variant == "dual":
            raise ValueError("use DualViewCNN for the dual variant")
        self.spec = spec
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0)))
        self.trunk, feat = _BACKBONES[spec.backbone](spec, rng, dtype)
        self.feature_len = feat
        self.head = _build_head(feat, rng, dtype)

    def _stacks(self):
        return [("", self.trunk), ("", self.head)]

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        x = _to_channels_last(x, self.spec)
        for _, layer in self.trunk:
            x = layer.forward(x, training)
        for _, layer in self.head:
            x = layer.forward(x, training)
        return x

    def backward(self, grad_out: np.ndarray) -> np.ndarray | None:
        g = grad_out
        for _, layer in reversed(self.head):
            g = layer.backward(g)
        for _, layer in reversed(self.trunk):
            g = layer.backward(g)
        return None if g is None else _to_interface(g)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x, training=False)[:, 0]


class DualViewCNN(_Network):
    """Two independent-weight branches; concatenated features feed one head."""

    def __init__(self, spec: ModelSpec, seed: int, dtype=np.float32):
        spec.validate()
        if spec.variant != "dual":
            raise ValueError("DualViewCNN requires a dual spec")
        self.spec = spec
        branch_spec = ModelSpec(variant="frontal", backbone=spec.backbone,
                                input_size=spec.input_size, in_channels=spec.in_channels,
                                stages=spec.stages, head=spec.head)
        rng_f = np.random.default_rng(np.random.SeedSequence((seed, 1)))
        rng_l = np.random.default_rng(np.random.SeedSequence((seed, 2)))
        rng_h = np.random.default_rng(np.random.SeedSequence((seed, 3)))
        self.branch_frontal, feat_f = _BACKBONES[spec.backbone](branch_spec, rng_f, dtype)
        self.branch_lateral, feat_l = _BACKBONES[spec.backbone](branch_spec, rng_l, dtype)
        if feat_f != feat_l:
            raise ValueError(f"branch feature lengths differ: {feat_f} vs {feat_l}")
        self.feature_len = feat_f + feat_l
        self.head = _build_head(self.feature_len, rng_h, dtype)

    def _stacks(self):
        return [("frontal.", self.branch_frontal), ("lateral.", self.branch_lateral),
                ("head.", self.head)]

    def forward(self, x: tuple[np.ndarray, np.ndarray], training: bool = False) -> np.ndarray:
        xf = _to_channels_last(x[0], self.spec)
        xl = _to_channels_last(x[1], self.spec)
        for _, layer in self.branch_frontal:
            xf = layer.forward(xf, training)
        for _, layer in self.branch_lateral:
            xl = layer.forward(xl, training)
        z = np.concatenate([xf, xl], axis=1)
        for _, layer in self.head:
            z = layer.forward(z, training)
        return z

    def backward(self, grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        g = grad_out
        for _, layer in reversed(self.head):
            g = layer.backward(g)
        half = self.feature_len // 2
        gf, gl = g[:, :half], g[:, half:]
        for _, layer in reversed(self.branch_frontal):
            gf = layer.backward(gf)
        for _, layer in reversed(self.branch_lateral):
            gl = layer.backward(gl)
        return (None if gf is None else _to_interface(gf),
                None if gl is None else _to_interface(gl))

    def predict(self, x: tuple[np.ndarray, np.ndarray]) -> np.ndarray:
        return self.forward(x, training=False)[:, 0]


def instantiate_model(spec: ModelSpec, seed: int, dtype=np.float32):
    spec.validate()
    if spec.variant == "dual":
        return DualViewCNN(spec, seed, dtype)
    return SingleViewCNN(spec, seed, dtype)


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient with respect to pred."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    diff = pred - target
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    grad = (2.0 / diff.size) * diff
    return loss, grad


def ensemble_predict(y_frontal, y_lateral):
    """Arithmetic mean of the two single-view outputs (liters)."""
    yf = np.asarray(y_frontal, dtype=np.float64)
    yl = np.asarray(y_lateral, dtype=np.float64)
    if yf.shape != yl.shape:
        raise ValueError(f"shape mismatch: {yf.shape} vs {yl.shape}")
    if not (np.all(np.isfinite(yf)) and np.all(np.isfinite(yl))):
        raise ValueError("ensemble inputs must be finite")
    out = (yf + yl) / 2.0
    return float(out) if out.ndim == 0 else out
