"""Localizer, classifier and baseline CNN builders plus their forward passes.

Parameters live in :class:`ModelParams`, a set of named groups (``localizer``,
``classifier`` or ``baseline``) so the training stages can update one group
while leaving the others untouched.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from .autodiff import Tensor, concat, conv2d, dense, flatten, maxpool2d, relu, softmax
from .errors import ContractError, DimensionError
from .losses import NUM_CLASSES
from .stn import CropGeometry, spatial_transform

# Images arrive in [0, 1]; networks see them shifted to be zero-centred.
INPUT_SHIFT = 0.5


@dataclass(frozen=True)
class InceptionSpec:
    """Output channels of the 1x1, 3x3, 5x5 and pooled-projection branches.

    The 3x3 and 5x5 branches are preceded by a 1x1 reduction to the same
    channel count as the branch output.
    """

    b1: int = 16
    b3: int = 16
    b5: int = 8
    pool: int = 8

    def __post_init__(self):
        if min(self.b1, self.b3, self.b5, self.pool) < 1:
            raise ContractError(f"inception branch widths must be >= 1, got {self}")

    @property
    def out_channels(self) -> int:
        return self.b1 + self.b3 + self.b5 + self.pool


@dataclass(frozen=True)
class LocalizerArch:
    conv1: int = 16
    conv1_kernel: int = 5
    conv1_stride: int = 1
    conv2: int = 32
    inception: InceptionSpec = InceptionSpec(16, 16, 8, 8)
    hidden: int = 128

    layers = ("conv", "pool", "conv", "pool", "inception", "dense", "dense")


@dataclass(frozen=True)
class ClassifierArch:
    conv1: int = 16
    conv2: int = 32
    inception: InceptionSpec = InceptionSpec(16, 16, 8, 8)
    hidden: int = 64

    layers = ("conv", "pool", "conv", "pool", "inception", "dense", "dense")


@dataclass(frozen=True)
class BaselineArch:
    widths: Tuple[int, ...] = (16, 16, 32, 32, 64)
    conv1_stride: int = 1
    hidden: int = 64

    @property
    def layers(self) -> Tuple[str, ...]:
        return ("conv", "pool") * len(self.widths) + ("dense", "dense")


@dataclass(frozen=True)
class Architecture:
    localizer: LocalizerArch = LocalizerArch()
    classifier: ClassifierArch = ClassifierArch()
    baseline: BaselineArch = BaselineArch()


STANDARD = Architecture()
# Same layer sequences with narrower layers and a stride-2 first convolution
# on the full-size patch; sized for single-core desk runs.
COMPACT = Architecture(
    localizer=LocalizerArch(conv1=8, conv1_stride=2, conv2=16, inception=InceptionSpec(8, 8, 4, 4), hidden=32),
    classifier=ClassifierArch(conv1=8, conv2=16, inception=InceptionSpec(8, 8, 4, 4), hidden=32),
    baseline=BaselineArch(widths=(8, 8, 16, 16, 32), conv1_stride=2, hidden=32),
)
ARCHITECTURES = {"standard": STANDARD, "compact": COMPACT}


class ModelParams:
    """Named groups of trainable tensors plus the architecture they belong to."""

    def __init__(self, groups: Dict[str, Dict[str, Tensor]], arch: Dict[str, dict]):
        self.groups = groups
        self.arch = arch

    def __getitem__(self, group: str) -> Dict[str, Tensor]:
        return self.groups[group]

    def __contains__(self, group: str) -> bool:
        return group in self.groups

    def merge(self, other: "ModelParams") -> "ModelParams":
        return ModelParams({**self.groups, **other.groups}, {**self.arch, **other.arch})

    def tensors(self, *groups: str) -> List[Tensor]:
        names = groups or tuple(self.groups)
        return [t for g in names for t in self.groups[g].values()]

    def count(self, *groups: str) -> int:
        return sum(t.size for t in self.tensors(*groups))

    def zero_grad(self) -> None:
        for t in self.tensors():
            t.grad = None

    def checksum(self, *groups: str) -> str:
        h = hashlib.sha256()
        for g in sorted(groups or self.groups):
            for name in sorted(self.groups[g]):
                h.update(f"{g}/{name}".encode())
                h.update(np.ascontiguousarray(self.groups[g][name].values, dtype="<f8").tobytes())
        return h.hexdigest()

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t.values)) for t in self.tensors())

    def copy(self) -> "ModelParams":
        groups = {
            g: {k: Tensor(t.values.copy(), requires_grad=True) for k, t in params.items()}
            for g, params in self.groups.items()
        }
        return ModelParams(groups, json.loads(json.dumps(self.arch)))


def _uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def _conv_params(params, name, rng, c_out, c_in, k):
    params[f"{name}.w"] = _uniform(rng, (c_out, c_in, k, k), c_in * k * k)
    params[f"{name}.b"] = _zeros((c_out,))


def _dense_params(params, name, rng, n_out, n_in):
    params[f"{name}.w"] = _uniform(rng, (n_out, n_in), n_in)
    params[f"{name}.b"] = _zeros((n_out,))


def inception_params(rng, c_in: int, spec: InceptionSpec, prefix: str = "inc") -> Dict[str, Tensor]:
    params: Dict[str, Tensor] = {}
    _conv_params(params, f"{prefix}.b1", rng, spec.b1, c_in, 1)
    _conv_params(params, f"{prefix}.b3r", rng, spec.b3, c_in, 1)
    _conv_params(params, f"{prefix}.b3", rng, spec.b3, spec.b3, 3)
    _conv_params(params, f"{prefix}.b5r", rng, spec.b5, c_in, 1)
    _conv_params(params, f"{prefix}.b5", rng, spec.b5, spec.b5, 5)
    _conv_params(params, f"{prefix}.bp", rng, spec.pool, c_in, 1)
    return params


def _conv(x, p, name, stride=1):
    return conv2d(x, p[f"{name}.w"], p[f"{name}.b"], padding="same", stride=stride)


def inception_block(x: Tensor, spec: InceptionSpec, params: Dict[str, Tensor], prefix: str = "inc") -> Tensor:
    """Four parallel branches (1x1, 1x1->3x3, 1x1->5x5, 3x3 max-pool->1x1) concatenated on channels."""
    c_in = params[f"{prefix}.b1.w"].shape[1]
    if x.shape[-3] != c_in:
        raise DimensionError(f"inception block expects {c_in} input channels, got {x.shape[-3]}")
    b1 = relu(_conv(x, params, f"{prefix}.b1"))
    b3 = relu(_conv(relu(_conv(x, params, f"{prefix}.b3r")), params, f"{prefix}.b3"))
    b5 = relu(_conv(relu(_conv(x, params, f"{prefix}.b5r")), params, f"{prefix}.b5"))
    bp = relu(_conv(maxpool2d(x, window=3, stride=1, padding="same"), params, f"{prefix}.bp"))
    return concat([b1, b3, b5, bp], axis=-3)


def _conv_out(size: int, stride: int) -> int:
    return (size - 1) // stride + 1


def build_localizer(geom: CropGeometry = CropGeometry(), seed: int = 0, arch: LocalizerArch = LocalizerArch()) -> ModelParams:
    """Two conv/pool stages, an inception block and two dense layers ending in 6 outputs.

    The last layer starts at zero weights with a bias equal to the centred
    ground-truth transform, so an untrained localizer crops the patch centre.
    """
    rng = np.random.default_rng(seed)
    p: Dict[str, Tensor] = {}
    _conv_params(p, "conv1", rng, arch.conv1, 3, arch.conv1_kernel)
    _conv_params(p, "conv2", rng, arch.conv2, arch.conv1, 3)
    p.update(inception_params(rng, arch.conv2, arch.inception))
    side = _conv_out(geom.d_i, arch.conv1_stride) // 2 // 2
    _dense_params(p, "fc1", rng, arch.hidden, arch.inception.out_channels * side * side)
    p["fc2.w"] = _zeros((6, arch.hidden))
    p["fc2.b"] = Tensor(np.array([geom.scale, 0.0, 0.0, 0.0, geom.scale, 0.0]), requires_grad=True)
    descriptor = {**asdict(arch), "layers": list(arch.layers), "input": [3, geom.d_i, geom.d_i]}
    return ModelParams({"localizer": p}, {"localizer": descriptor})


def localizer_forward(params: ModelParams, patches) -> Tensor:
    """Estimated transforms ``[N, 2, 3]`` (or ``[2, 3]`` for one patch)."""
    p = params["localizer"]
    arch = params.arch["localizer"]
    x = _as_input(patches, arch["input"])
    h = maxpool2d(relu(_conv(x, p, "conv1", stride=arch["conv1_stride"])))
    h = maxpool2d(relu(_conv(h, p, "conv2")))
    h = inception_block(h, InceptionSpec(**arch["inception"]), p)
    h = relu(dense(flatten(h), p["fc1.w"], p["fc1.b"]))
    out = dense(h, p["fc2.w"], p["fc2.b"])
    return out.reshape(2, 3) if out.ndim == 1 else out.reshape(out.shape[0], 2, 3)


def build_classifier(geom: CropGeometry = CropGeometry(), seed: int = 0, arch: ClassifierArch = ClassifierArch()) -> ModelParams:
    """Seven-layer classifier on ``d_c`` focus crops: conv, pool, conv, pool, inception, dense, dense."""
    rng = np.random.default_rng(seed)
    p: Dict[str, Tensor] = {}
    _conv_params(p, "conv1", rng, arch.conv1, 3, 5)
    _conv_params(p, "conv2", rng, arch.conv2, arch.conv1, 3)
    p.update(inception_params(rng, arch.conv2, arch.inception))
    side = geom.d_c // 4
    _dense_params(p, "fc1", rng, arch.hidden, arch.inception.out_channels * side * side)
    _dense_params(p, "fc2", rng, NUM_CLASSES, arch.hidden)
    descriptor = {**asdict(arch), "layers": list(arch.layers), "input": [3, geom.d_c, geom.d_c]}
    return ModelParams({"classifier": p}, {"classifier": descriptor})


def classifier_forward(params: ModelParams, crops) -> Tensor:
    """Class probabilities ``[N, 3]`` for focus crops ``[N, 3, d_c, d_c]``."""
    p = params["classifier"]
    arch = params.arch["classifier"]
    x = _as_input(crops, arch["input"])
    h = maxpool2d(relu(_conv(x, p, "conv1")))
    h = maxpool2d(relu(_conv(h, p, "conv2")))
    h = inception_block(h, InceptionSpec(**arch["inception"]), p)
    h = relu(dense(flatten(h), p["fc1.w"], p["fc1.b"]))
    return softmax(dense(h, p["fc2.w"], p["fc2.b"]))


def build_baseline(geom: CropGeometry = CropGeometry(), seed: int = 0, arch: BaselineArch = BaselineArch()) -> ModelParams:
    """Plain CNN: five conv/pool pairs and two dense layers (12 layers) on full patches."""
    rng = np.random.default_rng(seed)
    p: Dict[str, Tensor] = {}
    c_in = 3
    side = _conv_out(geom.d_i, arch.conv1_stride)
    for i, width in enumerate(arch.widths):
        _conv_params(p, f"conv{i + 1}", rng, width, c_in, 5 if i == 0 else 3)
        c_in = width
        side //= 2
    _dense_params(p, "fc1", rng, arch.hidden, c_in * side * side)
    _dense_params(p, "fc2", rng, NUM_CLASSES, arch.hidden)
    descriptor = {**asdict(arch), "layers": list(arch.layers), "input": [3, geom.d_i, geom.d_i]}
    return ModelParams({"baseline": p}, {"baseline": descriptor})


def baseline_forward(params: ModelParams, patches) -> Tensor:
    p = params["baseline"]
    arch = params.arch["baseline"]
    h = _as_input(patches, arch["input"])
    for i in range(len(arch["widths"])):
        stride = arch["conv1_stride"] if i == 0 else 1
        h = maxpool2d(relu(_conv(h, p, f"conv{i + 1}", stride=stride)))
    h = relu(dense(flatten(h), p["fc1.w"], p["fc1.b"]))
    return softmax(dense(h, p["fc2.w"], p["fc2.b"]))


def stn_forward(params: ModelParams, patches, geom: CropGeometry = CropGeometry()):
    """Localize, resample and classify.

    Returns ``(theta_hat, probs, focus_crop)``; the chain is differentiable
    end to end.
    """
    theta = localizer_forward(params, patches)
    focus = spatial_transform(patches, theta, geom.d_c, geom.d_c)
    probs = classifier_forward(params, focus)
    return theta, probs, focus


def _as_input(images, expected_shape) -> Tensor:
    x = images if isinstance(images, Tensor) else Tensor(images)
    if tuple(x.shape[-3:]) != tuple(expected_shape) or x.ndim not in (3, 4):
        raise DimensionError(f"expected input [(N,) {expected_shape}], got {x.shape}")
    return x - INPUT_SHIFT


# -- checkpoints ---------------------------------------------------------------

CHECKPOINT_MAGIC = b"STNCKPT\x00"
CHECKPOINT_VERSION = 1


def save_checkpoint(params: ModelParams, path) -> None:
    """Write a versioned container: magic, JSON header, raw little-endian float64 buffers."""
    entries = []
    blobs = []
    offset = 0
    for group in sorted(params.groups):
        for name in sorted(params.groups[group]):
            data = np.ascontiguousarray(params.groups[group][name].values, dtype="<f8").tobytes()
            entries.append({"group": group, "name": name, "shape": list(params.groups[group][name].shape), "offset": offset})
            blobs.append(data)
            offset += len(data)
    header = json.dumps(
        {"version": CHECKPOINT_VERSION, "arch": params.arch, "tensors": entries}, sort_keys=True
    ).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ContractError(f"{path}: not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack("<Q", raw[pos : pos + 8])
    pos += 8
    header = json.loads(raw[pos : pos + hlen])
    if header["version"] != CHECKPOINT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {header['version']}")
    body = raw[pos + hlen :]
    groups: Dict[str, Dict[str, Tensor]] = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        values = np.frombuffer(body, dtype="<f8", count=count, offset=e["offset"]).reshape(e["shape"])
        groups.setdefault(e["group"], {})[e["name"]] = Tensor(values.astype(np.float64), requires_grad=True)
    return ModelParams(groups, header["arch"])
