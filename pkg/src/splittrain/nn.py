"""CNN model assembly, tap-point forward passes, and weight checkpoints.

A model is a flat list of layers executed in order. Feature extraction is
4 blocks of Conv(3x3, pad 1)-BatchNorm-ReLU-MaxPool; the classifier is
flatten followed by two fully connected layers with a ReLU between them.
The output of each block's maxpool is a "tap": `forward_with_tap` exposes
that activation so a second network can be trained to match it, and the
last tap doubles as the end of the feature extractor.

Checkpoints use the STWT container: little-endian, CRC32-tailed, holding
named float32 tensors.
"""

from __future__ import annotations

import io
import struct
import zlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


class CheckpointError(ValueError):
    """A weight file is malformed, corrupt, or does not fit the model."""


@dataclass
class ModelConfig:
    """Architecture knobs for the 4-block CNN.

    input_shape: (C, H, W); H and W must be multiples of 16 so four 2x2
    pools divide exactly. channel_widths: output channels of the 4 conv
    blocks. hidden_dim: width of the first fully connected layer.
    class_count: output dimension. seed: weight init seed.
    """

    input_shape: tuple[int, int, int] = (1, 64, 64)
    channel_widths: tuple[int, int, int, int] = (16, 32, 64, 128)
    hidden_dim: int = 128
    class_count: int = 3
    seed: int = 0

    def validate(self) -> None:
        if len(self.input_shape) != 3 or any(int(d) < 1 for d in self.input_shape):
            raise ValueError(f"input_shape must be 3 positive ints (C,H,W), got {self.input_shape!r}")
        C, H, W = self.input_shape
        if H % 16 or W % 16:
            raise ValueError(
                f"input height and width must be multiples of 16 (four 2x2 pools), got {H}x{W}")
        if len(self.channel_widths) != 4 or any(int(w) < 1 for w in self.channel_widths):
            raise ValueError(f"channel_widths must be 4 positive ints, got {self.channel_widths!r}")
        if self.hidden_dim < 1:
            raise ValueError(f"hidden_dim must be positive, got {self.hidden_dim}")
        if self.class_count < 2:
            raise ValueError(f"class_count must be >= 2, got {self.class_count}")


class Layer:
    """Base layer: named parameters plus a trainable flag."""

    kind = "base"

    def __init__(self, name: str):
        self.name = name
        self.trainable = True

    def params(self) -> dict[str, Tensor]:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x: Tensor, mode: str) -> Tensor:
        raise NotImplementedError


class Conv(Layer):
    kind = "conv"

    def __init__(self, name: str, weight: Tensor, bias: Tensor, padding: int):
        super().__init__(name)
        self.weight = weight
        self.bias = bias
        self.padding = padding

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x: Tensor, mode: str) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=1, padding=self.padding)


class BatchNorm(Layer):
    kind = "batchnorm"

    def __init__(self, name: str, gamma: Tensor, beta: Tensor,
                 running_mean: np.ndarray, running_var: np.ndarray):
        super().__init__(name)
        self.gamma = gamma
        self.beta = beta
        self.running_mean = running_mean
        self.running_var = running_var

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x: Tensor, mode: str) -> Tensor:
        # frozen layers keep serving (and never mutate) their running stats
        effective = mode if (mode == "train" and self.trainable) else "eval"
        return T.batchnorm2d(x, self.gamma, self.beta,
                             self.running_mean, self.running_var, mode=effective)


class ReLU(Layer):
    kind = "relu"

    def __init__(self, name: str):
        super().__init__(name)
        self.trainable = False

    def forward(self, x: Tensor, mode: str) -> Tensor:
        return T.relu(x)


class MaxPool(Layer):
    kind = "maxpool"

    def __init__(self, name: str):
        super().__init__(name)
        self.trainable = False

    def forward(self, x: Tensor, mode: str) -> Tensor:
        return T.maxpool2(x)


class Flatten(Layer):
    kind = "flatten"

    def __init__(self, name: str):
        super().__init__(name)
        self.trainable = False

    def forward(self, x: Tensor, mode: str) -> Tensor:
        return T.flatten(x)


class Linear(Layer):
    kind = "linear"

    def __init__(self, name: str, weight: Tensor, bias: Tensor):
        super().__init__(name)
        self.weight = weight
        self.bias = bias

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x: Tensor, mode: str) -> Tensor:
        return T.linear(x, self.weight, self.bias)


@dataclass
class Model:
    """Ordered layer stack with tap points after each block's maxpool.

    tap_indices: layer indices whose OUTPUT is a valid activation-matching
    target (the maxpool of each block). feature_end: index of the last
    feature layer (equal to the last tap); everything after it is the
    classifier head.
    """

    layers: list[Layer]
    config: ModelConfig
    tap_indices: tuple[int, ...]
    feature_end: int

    @property
    def class_count(self) -> int:
        return self.config.class_count

    def parameters(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out.extend(layer.params().values())
        return out

    def trainable_parameters(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            if layer.trainable:
                out.extend(layer.params().values())
        return out

    def named_tensors(self) -> dict[str, np.ndarray]:
        """Flat name -> array view of every parameter and buffer, in layer order."""
        out: dict[str, np.ndarray] = {}
        for layer in self.layers:
            for pname, p in layer.params().items():
                out[f"{layer.name}.{pname}"] = p.data
            for bname, b in layer.buffers().items():
                out[f"{layer.name}.{bname}"] = b
        return out

    def forward(self, x: Tensor, mode: str = "eval") -> Tensor:
        for layer in self.layers:
            x = layer.forward(x, mode)
        return x

    def forward_with_tap(self, x: Tensor, tap: Optional[int], mode: str = "eval",
                         stop_at_tap: bool = False):
        """Run forward, capturing the activation at layer index `tap`.

        Returns (logits, tap_activation). tap=None skips capture and
        returns (logits, None); stop_at_tap ends the pass at the tap and
        returns (None, activation).
        """
        if tap is None:
            if stop_at_tap:
                raise ValueError("stop_at_tap requires a tap index")
            return self.forward(x, mode), None
        if tap not in self.tap_indices:
            raise ValueError(f"tap must be one of {list(self.tap_indices)}, got {tap}")
        act = None
        for i, layer in enumerate(self.layers):
            x = layer.forward(x, mode)
            if i == tap:
                act = x
                if stop_at_tap:
                    return None, act
        return x, act

    def set_trainable(self, first: int, last: int, flag: bool) -> None:
        """Set the trainable flag on layers in [first, last] inclusive.

        Also flips requires_grad on their parameters so frozen segments do
        not record gradients.
        """
        if not (0 <= first <= last < len(self.layers)):
            raise IndexError(
                f"layer range [{first}, {last}] out of bounds for {len(self.layers)} layers")
        for layer in self.layers[first:last + 1]:
            layer.trainable = flag
            for p in layer.params().values():
                p.requires_grad = flag

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def build_simple_cnn(config: ModelConfig) -> Model:
    """Build the 4-block CNN with fresh seeded weights.

    Conv and linear weights are Kaiming-uniform over fan-in with zero
    biases; batch norm starts at identity (gamma 1, beta 0, running mean 0,
    running var 1). Layer index layout, per block b in 0..3: conv=4b,
    bn=4b+1, relu=4b+2, pool=4b+3 (tap); then flatten=16, fc1=17, relu=18,
    fc2=19. feature_end = 15.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    dt = T.default_dtype()

    def kaiming(shape, fan_in):
        bound = np.sqrt(6.0 / fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape).astype(dt), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=dt), requires_grad=True)

    C, H, W = config.input_shape
    layers: list[Layer] = []
    taps: list[int] = []
    c_in = C
    for b, c_out in enumerate(config.channel_widths):
        w = kaiming((c_out, c_in, 3, 3), c_in * 9)
        layers.append(Conv(f"block{b}.conv", w, zeros((c_out,)), padding=1))
        gamma = Tensor(np.ones(c_out, dtype=dt), requires_grad=True)
        layers.append(BatchNorm(f"block{b}.bn", gamma, zeros((c_out,)),
                                np.zeros(c_out, dtype=dt), np.ones(c_out, dtype=dt)))
        layers.append(ReLU(f"block{b}.relu"))
        layers.append(MaxPool(f"block{b}.pool"))
        taps.append(len(layers) - 1)
        c_in = c_out
    feature_end = taps[-1]

    layers.append(Flatten("head.flatten"))
    flat = config.channel_widths[-1] * (H // 16) * (W // 16)
    layers.append(Linear("head.fc1", kaiming((config.hidden_dim, flat), flat),
                         zeros((config.hidden_dim,))))
    layers.append(ReLU("head.relu"))
    layers.append(Linear("head.fc2",
                         kaiming((config.class_count, config.hidden_dim), config.hidden_dim),
                         zeros((config.class_count,))))

    return Model(layers=layers, config=config, tap_indices=tuple(taps),
                 feature_end=feature_end)


# ---------------------------------------------------------------------------
# STWT checkpoint format

_MAGIC = b"STWT"
_VERSION = 1


def serialize_weights(model: Model) -> bytes:
    """Encode all parameters and buffers as STWT bytes.

    Layout (little-endian): magic "STWT", u16 version, u32 tensor count;
    per tensor u16 name length, UTF-8 name, u8 rank, u32 dims, f32 data;
    then CRC32 (u32) over everything before it.
    """
    buf = io.BytesIO()
    named = model.named_tensors()
    buf.write(_MAGIC)
    buf.write(struct.pack("<H", _VERSION))
    buf.write(struct.pack("<I", len(named)))
    for name, arr in named.items():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        for d in arr.shape:
            buf.write(struct.pack("<I", d))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    payload = buf.getvalue()
    return payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


def save_weights(model: Model, path) -> None:
    """Write all parameters and buffers to an STWT file."""
    with open(path, "wb") as f:
        f.write(serialize_weights(model))


def _read_exact(f, n: int, what: str) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise CheckpointError(f"truncated file while reading {what}")
    return b


def read_weight_file(path) -> dict[str, np.ndarray]:
    """Parse an STWT file into name -> float32 array, verifying the CRC."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 14:
        raise CheckpointError(f"file too short to be a weight file: {len(raw)} bytes")
    payload, crc_bytes = raw[:-4], raw[-4:]
    (crc_stored,) = struct.unpack("<I", crc_bytes)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise CheckpointError("checksum mismatch: file is corrupt or truncated")
    f = io.BytesIO(payload)
    if _read_exact(f, 4, "magic") != _MAGIC:
        raise CheckpointError("bad magic: not a weight file")
    (version,) = struct.unpack("<H", _read_exact(f, 2, "version"))
    if version != _VERSION:
        raise CheckpointError(f"unsupported weight file version {version}")
    (count,) = struct.unpack("<I", _read_exact(f, 4, "tensor count"))
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        (nlen,) = struct.unpack("<H", _read_exact(f, 2, f"name length of tensor {i}"))
        name = _read_exact(f, nlen, f"name of tensor {i}").decode("utf-8")
        (rank,) = struct.unpack("<B", _read_exact(f, 1, f"rank of {name}"))
        dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, f"dims of {name}"))
        nvals = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = np.frombuffer(_read_exact(f, 4 * nvals, f"data of {name}"), dtype="<f4")
        if name in out:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        out[name] = data.reshape(dims).copy()
    if f.read(1):
        raise CheckpointError("trailing bytes after last tensor")
    return out


def load_weights(model: Model, path) -> None:
    """Load an STWT file into the model, atomically.

    The file must contain exactly the model's tensor names with matching
    shapes; everything is validated before any assignment, so a bad file
    leaves the model untouched.
    """
    loaded = read_weight_file(path)
    named = model.named_tensors()
    missing = sorted(set(named) - set(loaded))
    extra = sorted(set(loaded) - set(named))
    if missing or extra:
        parts = []
        if missing:
            parts.append(f"missing tensors {missing}")
        if extra:
            parts.append(f"unexpected tensors {extra}")
        raise CheckpointError("weight file does not fit the model: " + "; ".join(parts))
    for name, arr in named.items():
        if loaded[name].shape != arr.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: file has {loaded[name].shape}, "
                f"model expects {arr.shape}")
    for layer in model.layers:
        for pname, p in layer.params().items():
            p.data = loaded[f"{layer.name}.{pname}"].astype(p.data.dtype)
            p.grad = None
        for bname, b in layer.buffers().items():
            b[:] = loaded[f"{layer.name}.{bname}"].astype(b.dtype)


def clone_model(model: Model) -> Model:
    """Deep-copy a model's weights and buffers into a freshly built twin."""
    twin = build_simple_cnn(model.config)
    src = model.named_tensors()
    for layer in twin.layers:
        for pname, p in layer.params().items():
            p.data = src[f"{layer.name}.{pname}"].copy()
        for bname, b in layer.buffers().items():
            b[:] = src[f"{layer.name}.{bname}"]
    return twin
