"""Network zoo, perturbation generator, deterministic initialization, and the
flat parameter/gradient access the objectives are built on.

All networks are GroupNorm-based so a forward pass never mutates hidden state
and reruns are bit-reproducible; parameters come from an explicit per-spec
generator stream.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import Dataset, PerturbationBudget
from .seeding import fingerprint_arrays, torch_stream

NETWORK_FAMILIES = ("plain-cnn", "resnet-small", "resnet-18-like", "tiny-mlp")


@dataclass(frozen=True)
class NetworkSpec:
    family: str
    num_classes: int
    width_scale: float = 1.0
    seed: int = 0
    in_shape: tuple = (32, 32, 3)  # H, W, C

    def __post_init__(self):
        if self.family not in NETWORK_FAMILIES:
            raise ValueError(f"unknown network family {self.family!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        object.__setattr__(self, "in_shape", tuple(int(v) for v in self.in_shape))

    def label(self) -> str:
        return f"{self.family}-w{self.width_scale:g}-s{self.seed}"


@dataclass(frozen=True)
class GeneratorSpec:
    num_res_blocks: int = 6
    base_channels: int = 32
    bounding_mode: str = "smooth"
    seed: int = 0

    def __post_init__(self):
        if self.num_res_blocks < 0:
            raise ValueError("num_res_blocks must be >= 0")
        if self.bounding_mode not in ("smooth", "hard"):
            raise ValueError(f"unknown bounding_mode {self.bounding_mode!r}")


def _width(base: int, scale: float) -> int:
    return max(4, int(round(base * scale)))


def _gn(channels: int) -> nn.GroupNorm:
    groups = 1
    for g in range(min(8, channels), 0, -1):
        if channels % g == 0:
            groups = g
            break
    return nn.GroupNorm(groups, channels)


def _conv_block(cin: int, cout: int, kernel: int = 3, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel, stride=stride, padding=kernel // 2),
        _gn(cout),
        nn.ReLU(),
    )


class TinyMLP(nn.Module):
    """Flatten, one tanh hidden layer, linear head. The workhorse of the
    finite-difference oracles (smooth activations, ~2k parameters)."""

    def __init__(self, in_features: int, hidden: int, num_classes: int):
        super().__init__()
        self.hidden = nn.Linear(in_features, hidden)
        self.head = nn.Linear(hidden, num_classes)

    def forward(self, x):
        z = torch.tanh(self.hidden(x.flatten(1)))
        return self.head(z)


class PlainCNN(nn.Module):
    def __init__(self, in_channels: int, num_classes: int, width_scale: float = 1.0):
        super().__init__()
        c1, c2, c3 = (_width(c, width_scale) for c in (16, 32, 64))
        self.features = nn.Sequential(
            _conv_block(in_channels, c1),
            _conv_block(c1, c2, stride=2),
            _conv_block(c2, c3, stride=2),
        )
        self.head = nn.Linear(c3, num_classes)

    def forward(self, x):
        z = self.features(x)
        z = z.mean(dim=(2, 3))
        return self.head(z)


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.norm1 = _gn(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = _gn(cout)
        self.shortcut = (
            nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride), _gn(cout))
            if stride != 1 or cin != cout
            else nn.Identity()
        )

    def forward(self, x):
        z = F.relu(self.norm1(self.conv1(x)))
        z = self.norm2(self.conv2(z))
        return F.relu(z + self.shortcut(x))


class ResNetClassifier(nn.Module):
    def __init__(self, in_channels, num_classes, stage_widths, blocks_per_stage):
        super().__init__()
        self.stem = _conv_block(in_channels, stage_widths[0])
        stages = []
        cin = stage_widths[0]
        for i, cout in enumerate(stage_widths):
            for b in range(blocks_per_stage):
                stride = 2 if (i > 0 and b == 0) else 1
                stages.append(BasicBlock(cin, cout, stride=stride))
                cin = cout
        self.stages = nn.Sequential(*stages)
        self.head = nn.Linear(cin, num_classes)

    def forward(self, x):
        z = self.stages(self.stem(x))
        z = z.mean(dim=(2, 3))
        return self.head(z)


def build_network(spec: NetworkSpec, dtype: torch.dtype = torch.float32) -> nn.Module:
    """Build and deterministically initialize a classifier for ``spec``."""
    h, w, c = spec.in_shape
    if spec.family == "tiny-mlp":
        hidden = max(1, int(round(8 * spec.width_scale)))
        net = TinyMLP(h * w * c, hidden, spec.num_classes)
    elif spec.family == "plain-cnn":
        net = PlainCNN(c, spec.num_classes, spec.width_scale)
    elif spec.family == "resnet-small":
        widths = [_width(b, spec.width_scale) for b in (16, 32, 64)]
        net = ResNetClassifier(c, spec.num_classes, widths, blocks_per_stage=1)
    elif spec.family == "resnet-18-like":
        widths = [_width(b, spec.width_scale) for b in (64, 128, 256, 512)]
        net = ResNetClassifier(c, spec.num_classes, widths, blocks_per_stage=2)
    else:  # pragma: no cover - guarded by the spec dataclass
        raise ValueError(f"unknown network family {spec.family!r}")
    net = net.to(dtype)
    init_parameters(net, spec.seed)
    net.eval()
    return net


def init_parameters(module: nn.Module, seed: int) -> None:
    """Fan-in-scaled normal init for weights, zeros for biases, identity for
    norm layers; fully determined by the seed."""
    gen = torch_stream(seed, "init")
    with torch.no_grad():
        for name, param in module.named_parameters():
            if param.ndim >= 2:  # conv / linear weights
                fan_in = int(np.prod(param.shape[1:]))
                std = float(np.sqrt(2.0 / fan_in))
                values = torch.randn(param.shape, generator=gen, dtype=torch.float64) * std
                param.copy_(values.to(param.dtype))
            elif "weight" in name:  # norm scales
                param.fill_(1.0)
            else:
                param.zero_()


# ---------------------------------------------------------------------------
# Generator


class ResidualGeneratorBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            _gn(channels),
            nn.LeakyReLU(0.2),
            nn.Conv2d(channels, channels, 3, padding=1),
            _gn(channels),
        )

    def forward(self, x):
        return x + self.body(x)


class PerturbationGenerator(nn.Module):
    """Image-to-image residual generator with a built-in budget bound.

    Trunk: 7x7 conv stem, two stride-2 conv blocks, ``num_res_blocks``
    residual blocks, two transpose-conv upsampling blocks, final 3x3 conv.
    Smooth mode emits x + rho*tanh(trunk(x)) clamped to valid pixels, so the
    L-inf guarantee holds for any parameter values and stays differentiable;
    hard mode clamps the raw residual to the budget box instead.
    """

    def __init__(self, spec: GeneratorSpec, budget: PerturbationBudget, in_channels: int):
        super().__init__()
        b = spec.base_channels
        lrelu = nn.LeakyReLU(0.2)
        self.encode = nn.Sequential(
            nn.Conv2d(in_channels, b, 7, padding=3), _gn(b), lrelu,
            nn.Conv2d(b, 2 * b, 3, stride=2, padding=1), _gn(2 * b), lrelu,
            nn.Conv2d(2 * b, 4 * b, 3, stride=2, padding=1), _gn(4 * b), lrelu,
        )
        self.blocks = nn.Sequential(
            *[ResidualGeneratorBlock(4 * b) for _ in range(spec.num_res_blocks)]
        )
        self.decode = nn.Sequential(
            nn.ConvTranspose2d(4 * b, 2 * b, 3, stride=2, padding=1, output_padding=1),
            _gn(2 * b), lrelu,
            nn.ConvTranspose2d(2 * b, b, 3, stride=2, padding=1, output_padding=1),
            _gn(b), lrelu,
            nn.Conv2d(b, in_channels, 3, padding=1),
        )
        self.bounding_mode = spec.bounding_mode
        self.rho = float(budget.rho)

    def residual_field(self, x):
        if x.shape[-1] % 4 or x.shape[-2] % 4:
            raise ValueError("generator requires spatial sizes divisible by 4")
        return self.decode(self.blocks(self.encode(x)))

    def forward(self, x):
        r = self.residual_field(x)
        if self.bounding_mode == "smooth":
            out = x + self.rho * torch.tanh(r)
        else:
            out = torch.clamp(x + r, x - self.rho, x + self.rho)
        return torch.clamp(out, 0.0, 1.0)


def build_generator(
    spec: GeneratorSpec,
    budget: PerturbationBudget,
    in_channels: int = 3,
    dtype: torch.dtype = torch.float32,
) -> PerturbationGenerator:
    gen = PerturbationGenerator(spec, budget, in_channels).to(dtype)
    init_parameters(gen, spec.seed)
    # zero the last conv so training starts from the identity perturbation
    with torch.no_grad():
        final = gen.decode[-1]
        final.weight.zero_()
        final.bias.zero_()
    return gen


# ---------------------------------------------------------------------------
# Parameter views and flat gradients


@dataclass
class ParameterView:
    """Ordered per-layer parameter groups, each a flat vector."""

    names: tuple
    vectors: list
    shapes: tuple

    @classmethod
    def from_network(cls, net: nn.Module) -> "ParameterView":
        names, vectors, shapes = [], [], []
        for name, p in net.named_parameters():
            names.append(name)
            vectors.append(p.detach().reshape(-1).clone())
            shapes.append(tuple(p.shape))
        return cls(tuple(names), vectors, tuple(shapes))

    @classmethod
    def from_groups(cls, names, vectors, shapes) -> "ParameterView":
        return cls(tuple(names), list(vectors), tuple(tuple(s) for s in shapes))

    @property
    def total_count(self) -> int:
        return int(sum(v.numel() for v in self.vectors))

    def to_param_dict(self, dtype: torch.dtype | None = None) -> dict:
        out = {}
        for name, vec, shape in zip(self.names, self.vectors, self.shapes):
            t = vec.reshape(shape)
            if dtype is not None:
                t = t.to(dtype)
            out[name] = t
        return out

    def clone(self) -> "ParameterView":
        return ParameterView(self.names, [v.detach().clone() for v in self.vectors], self.shapes)

    def to(self, dtype: torch.dtype) -> "ParameterView":
        return ParameterView(self.names, [v.to(dtype) for v in self.vectors], self.shapes)

    def fingerprint(self) -> str:
        return fingerprint_arrays(self.vectors)


def check_compatible(net: nn.Module, view: ParameterView) -> None:
    net_names = tuple(name for name, _ in net.named_parameters())
    if net_names != view.names:
        raise ValueError(
            "incompatible parameter view: "
            f"network has groups {net_names[:3]}..., view has {view.names[:3]}..."
        )


def flat_param_gradient(
    net: nn.Module,
    theta: ParameterView,
    images: torch.Tensor,
    labels: torch.Tensor,
    create_graph: bool = False,
) -> ParameterView:
    """Per-group gradients of the mean cross-entropy of ``net`` at ``theta``.

    With create_graph=True the result stays differentiable with respect to
    ``images``, which is what the gradient-matching objective differentiates
    through. The network's own parameters are never touched.
    """
    check_compatible(net, theta)
    params = {
        name: vec.detach().clone().reshape(shape).to(images.dtype).requires_grad_(True)
        for name, vec, shape in zip(theta.names, theta.vectors, theta.shapes)
    }
    logits = torch.func.functional_call(net, params, (images,))
    loss = F.cross_entropy(logits, labels)
    grads = torch.autograd.grad(loss, list(params.values()), create_graph=create_graph)
    vectors = [g.reshape(-1) for g in grads]
    return ParameterView.from_groups(theta.names, vectors, theta.shapes)


# ---------------------------------------------------------------------------
# Tensor bridging and evaluation helpers

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def batch_to_tensor(images: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """N x H x W x C float array -> N x C x H x W tensor."""
    arr = np.ascontiguousarray(np.transpose(np.asarray(images), (0, 3, 1, 2)))
    if not arr.flags.writeable:
        arr = arr.copy()
    return torch.from_numpy(arr).to(dtype)


def tensor_to_batch(x: torch.Tensor, dtype=np.float32) -> np.ndarray:
    return np.transpose(x.detach().cpu().numpy(), (0, 2, 3, 1)).astype(dtype)


def evaluate_accuracy(
    net: nn.Module, dataset: Dataset, batch_size: int = 256, dtype: torch.dtype = torch.float32
) -> float:
    net.eval()
    correct = 0
    with torch.no_grad():
        for start in range(0, dataset.n, batch_size):
            stop = min(start + batch_size, dataset.n)
            x = batch_to_tensor(dataset.images[start:stop], dtype)
            pred = net(x).argmax(dim=1).numpy()
            correct += int((pred == dataset.labels[start:stop]).sum())
    return correct / dataset.n


# ---------------------------------------------------------------------------
# Snapshot container: JSON header + raw little-endian group bytes

_SNAP_MAGIC = b"UGESNAP1"


def save_param_view(view: ParameterView, path, meta: dict | None = None) -> None:
    header = {
        "names": list(view.names),
        "shapes": [list(s) for s in view.shapes],
        "dtype": str(view.vectors[0].dtype).replace("torch.", "") if view.vectors else "float32",
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_SNAP_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for vec in view.vectors:
            arr = vec.detach().cpu().numpy()
            fh.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def load_param_view(path):
    """Returns (ParameterView, meta dict)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_SNAP_MAGIC))
        if magic != _SNAP_MAGIC:
            raise ValueError(f"{path} is not a parameter snapshot")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        np_dtype = np.dtype(header["dtype"]).newbyteorder("<")
        vectors = []
        for shape in header["shapes"]:
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * np_dtype.itemsize)
            arr = np.frombuffer(raw, dtype=np_dtype).astype(header["dtype"]).copy()
            vectors.append(torch.from_numpy(arr))
    view = ParameterView.from_groups(header["names"], vectors, header["shapes"])
    return view, header["meta"]


def load_params_into(net: nn.Module, view: ParameterView) -> nn.Module:
    check_compatible(net, view)
    with torch.no_grad():
        for (name, p), vec, shape in zip(net.named_parameters(), view.vectors, view.shapes):
            p.copy_(vec.reshape(shape).to(p.dtype))
    return net
