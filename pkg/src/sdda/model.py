"""EEGNet-style compact convolutional backbone on top of the autodiff engine.

The same architecture serves as teacher (all source channels) and student
(common channels only); the two differ only in the extent of the depthwise
spatial convolution.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor

CHECKPOINT_MAGIC = "SDDA-CKPT 1"


@dataclass(frozen=True)
class ArchConfig:
    f1: int = 8
    depth_multiplier: int = 2
    f2: int = 16
    temporal_kernel: int | None = None  # None: ceil(sampling_rate / 2)
    separable_kernel: int = 16
    pool1: int = 4
    pool2: int = 8
    dropout: float = 0.25
    sampling_rate: int = 128

    @property
    def temporal_length(self) -> int:
        if self.temporal_kernel is not None:
            return self.temporal_kernel
        return math.ceil(self.sampling_rate / 2)

    @classmethod
    def from_dict(cls, raw: dict) -> ArchConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ValueError(f"unknown ArchConfig keys: {unknown}")
        return cls(**raw)


class Network:
    """Feature extractor f (conv blocks) followed by a dense classifier g."""

    def __init__(self, channels: int, samples: int, classes: int, arch: ArchConfig, params: dict, bn: dict):
        self.channels = channels
        self.samples = samples
        self.classes = classes
        self.arch = arch
        self.params: dict[str, Tensor] = params
        self.bn: dict[str, BatchNormState] = bn

    @property
    def feature_dim(self) -> int:
        a = self.arch
        return a.f2 * ((self.samples // a.pool1) // a.pool2)

    @property
    def dtype(self):
        return self.params["temporal.weight"].dtype

    def parameter_count(self) -> dict[str, int]:
        return {name: p.data.size for name, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def _check_input(self, batch) -> Tensor:
        x = batch if isinstance(batch, Tensor) else Tensor.from_op(np.asarray(batch, dtype=self.dtype), (), None, "input")
        if x.ndim != 3 or x.shape[1] != self.channels or x.shape[2] != self.samples:
            raise ValueError(
                f"network expects batches shaped (n, {self.channels}, {self.samples}), got {tuple(x.shape)}"
            )
        return x

    def forward(self, batch, mode: str = "eval", seed=None, params: dict | None = None) -> tuple[Tensor, Tensor]:
        """Return (features, logits) for an (n, C, T) batch.

        ``mode`` is "train" (batch statistics, dropout with a mask drawn from
        ``seed``) or "eval". ``params`` overrides the stored parameter
        tensors, which is how named-leaf graphs bind into the network.
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        training = mode == "train"
        rng = None
        if training:
            rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(0 if seed is None else seed)
        p = self.params if params is None else {**self.params, **params}
        a = self.arch
        x = self._check_input(batch)
        n = x.shape[0]
        h = x.reshape(n, 1, self.channels, self.samples)
        h = ad.conv2d(h, p["temporal.weight"], padding="same")
        h = ad.batch_norm(h, p["bn1.gamma"], p["bn1.beta"], self.bn["bn1"], training)
        h = ad.conv2d(h, p["spatial.weight"], padding="valid", groups=a.f1)
        h = ad.batch_norm(h, p["bn2.gamma"], p["bn2.beta"], self.bn["bn2"], training)
        h = ad.elu(h)
        h = ad.avg_pool2d(h, (1, a.pool1))
        h = ad.dropout(h, a.dropout, rng, training)
        h = ad.conv2d(h, p["separable.depthwise"], padding="same", groups=a.f1 * a.depth_multiplier)
        h = ad.conv2d(h, p["separable.pointwise"], padding="valid")
        h = ad.batch_norm(h, p["bn3.gamma"], p["bn3.beta"], self.bn["bn3"], training)
        h = ad.elu(h)
        h = ad.avg_pool2d(h, (1, a.pool2))
        h = ad.dropout(h, a.dropout, rng, training)
        features = h.reshape(n, self.feature_dim)
        logits = features @ p["classifier.weight"] + p["classifier.bias"]
        return features, logits

    def forward_features(self, batch, mode: str = "eval", seed=None, params: dict | None = None) -> Tensor:
        return self.forward(batch, mode, seed, params)[0]

    def forward_logits(self, batch, mode: str = "eval", seed=None, params: dict | None = None) -> Tensor:
        return self.forward(batch, mode, seed, params)[1]

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Parameters and batch-norm buffers, in checkpoint order."""
        out = {f"param:{name}": p.data for name, p in self.params.items()}
        for name, st in self.bn.items():
            out[f"buffer:{name}.running_mean"] = st.running_mean
            out[f"buffer:{name}.running_var"] = st.running_var
        return out

    def copy(self) -> Network:
        with ad.precision(self.dtype.name):
            params = {k: Tensor(v.data, requires_grad=True, name=k) for k, v in self.params.items()}
        bn = {k: BatchNormState(s.running_mean.copy(), s.running_var.copy(), s.momentum, s.eps) for k, s in self.bn.items()}
        return Network(self.channels, self.samples, self.classes, self.arch, params, bn)


def minimum_samples(arch: ArchConfig) -> int:
    return arch.pool1 * arch.pool2


def build_network(
    channels: int,
    samples: int,
    classes: int,
    arch: ArchConfig | None = None,
    seed: int = 0,
    precision: str = "float32",
) -> Network:
    """Initialize a network with seeded uniform fan-in weights, zero biases."""
    arch = arch or ArchConfig()
    if channels < 1:
        raise ValueError("need at least one input channel")
    if classes < 2:
        raise ValueError("need at least two classes")
    if samples < minimum_samples(arch):
        raise ValueError(f"trials of {samples} samples are too short; the pooling pipeline needs T >= {minimum_samples(arch)}")
    rng = np.random.default_rng(seed)
    f1, d, f2 = arch.f1, arch.depth_multiplier, arch.f2
    shapes = {
        "temporal.weight": (f1, 1, 1, arch.temporal_length),
        "spatial.weight": (f1 * d, 1, channels, 1),
        "separable.depthwise": (f1 * d, 1, 1, arch.separable_kernel),
        "separable.pointwise": (f2, f1 * d, 1, 1),
    }
    feature_dim = f2 * ((samples // arch.pool1) // arch.pool2)
    with ad.precision(precision):
        params: dict[str, Tensor] = {}

        def uniform(name, shape, fan_in):
            bound = 1.0 / math.sqrt(fan_in)
            params[name] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)

        def constant(name, shape, value):
            params[name] = Tensor(np.full(shape, value), requires_grad=True, name=name)

        uniform("temporal.weight", shapes["temporal.weight"], arch.temporal_length)
        constant("bn1.gamma", f1, 1.0)
        constant("bn1.beta", f1, 0.0)
        uniform("spatial.weight", shapes["spatial.weight"], channels)
        constant("bn2.gamma", f1 * d, 1.0)
        constant("bn2.beta", f1 * d, 0.0)
        uniform("separable.depthwise", shapes["separable.depthwise"], arch.separable_kernel)
        uniform("separable.pointwise", shapes["separable.pointwise"], f1 * d)
        constant("bn3.gamma", f2, 1.0)
        constant("bn3.beta", f2, 0.0)
        uniform("classifier.weight", (feature_dim, classes), feature_dim)
        constant("classifier.bias", classes, 0.0)
        bn = {
            "bn1": BatchNormState.fresh(f1),
            "bn2": BatchNormState.fresh(f1 * d),
            "bn3": BatchNormState.fresh(f2),
        }
    return Network(channels, samples, classes, arch, params, bn)


def structural_diff(a: Network, b: Network) -> dict[str, tuple]:
    """Parameter names whose shapes differ between two networks."""
    names = set(a.params) | set(b.params)
    out = {}
    for name in sorted(names):
        sa = a.params[name].shape if name in a.params else None
        sb = b.params[name].shape if name in b.params else None
        if sa != sb:
            out[name] = (sa, sb)
    return out


# ---------------------------------------------------------------------------
# checkpoint format
#
#   SDDA-CKPT 1
#   arch <json object: channels, samples, classes, ArchConfig fields>
#   <kind>:<name> <comma-separated shape>      one line per array, in order
#   end
#   <little-endian float32 payload, arrays concatenated in manifest order>


def save_checkpoint(net: Network, path: str | Path) -> None:
    arch = {"channels": net.channels, "samples": net.samples, "classes": net.classes, **asdict(net.arch)}
    arrays = net.state_arrays()
    lines = [CHECKPOINT_MAGIC, "arch " + json.dumps(arch, sort_keys=True)]
    for name, arr in arrays.items():
        lines.append(f"{name} {','.join(str(s) for s in arr.shape)}")
    lines.append("end")
    header = ("\n".join(lines) + "\n").encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays.values())
    Path(path).write_bytes(header + payload)


def load_checkpoint(path: str | Path) -> Network:
    raw = Path(path).read_bytes()
    pos = 0
    lines = []
    while True:
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise ValueError(f"checkpoint header not terminated (byte offset {pos})")
        line = raw[pos:nl].decode("utf-8")
        pos = nl + 1
        if line == "end":
            break
        lines.append(line)
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise ValueError("not an SDDA checkpoint (bad magic line)")
    if not lines[1].startswith("arch "):
        raise ValueError("checkpoint is missing its arch line")
    arch = json.loads(lines[1][5:])
    channels, samples, classes = arch.pop("channels"), arch.pop("samples"), arch.pop("classes")
    net = build_network(channels, samples, classes, ArchConfig.from_dict(arch), precision="float32")
    for line in lines[2:]:
        name, dims = line.rsplit(" ", 1)
        shape = tuple(int(s) for s in dims.split(",")) if dims else ()
        count = math.prod(shape)
        if pos + 4 * count > len(raw):
            raise ValueError(f"checkpoint truncated while reading {name} (byte offset {pos})")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * count
        kind, key = name.split(":", 1)
        if kind == "param":
            if key not in net.params or net.params[key].shape != shape:
                raise ValueError(f"checkpoint parameter {key} {shape} does not match the architecture")
            net.params[key].data = arr
        elif kind == "buffer":
            layer, stat = key.split(".", 1)
            setattr(net.bn[layer], stat, arr)
        else:
            raise ValueError(f"unknown checkpoint entry kind {kind!r}")
    if pos != len(raw):
        raise ValueError(f"{len(raw) - pos} trailing bytes after checkpoint payload")
    return net
