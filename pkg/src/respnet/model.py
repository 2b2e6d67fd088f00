"""RespNet: fully convolutional 1D encoder-decoder for PPG -> respiration.

The encoder halves the signal length at every level with a strided
convolution and grows the channel count (doubling, capped). Each level ends in
a dilated residual inception block. The decoder mirrors the encoder with
transposed convolutions and concatenates the matching encoder input as a skip
connection. A 1x1 linear head maps back to one channel.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from respnet.errors import ConfigMismatch, FormatError, InvalidConfig, IoError, ShapeMismatch
from respnet.tensor import (
    ConvSpec,
    Tensor,
    add,
    batch_norm1d,
    concat_channels,
    conv1d,
    leaky_relu,
    transposed_conv1d,
)

TRAIN = "train"
EVAL = "eval"


@dataclass(frozen=True)
class ModelConfig:
    input_length: int = 2048
    levels: int = 8
    base_filters: int = 16
    max_filters: int = 512
    down_kernel: int = 4
    down_stride: int = 2
    inception_dilations: tuple = (1, 2, 4, 8)
    inception_kernel: int = 3
    merge_kernel: int = 3
    leaky_slope: float = 0.2
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "inception_dilations", tuple(int(d) for d in self.inception_dilations))
        self.validate()

    def validate(self) -> None:
        if self.levels < 1 or self.base_filters < 1 or self.max_filters < self.base_filters:
            raise InvalidConfig(f"bad level/filter settings in {self}")
        if self.down_stride < 1 or self.down_kernel < self.down_stride:
            raise InvalidConfig("down_kernel must be >= down_stride >= 1")
        if (self.down_kernel - self.down_stride) % 2:
            raise InvalidConfig("down_kernel - down_stride must be even for length-exact padding")
        if self.input_length % (self.down_stride**self.levels):
            raise InvalidConfig(
                f"input_length {self.input_length} not divisible by "
                f"{self.down_stride}^{self.levels}"
            )
        if self.inception_kernel % 2 == 0 or self.merge_kernel % 2 == 0:
            raise InvalidConfig("inception and merge kernels must be odd")
        if not self.inception_dilations or min(self.inception_dilations) < 1:
            raise InvalidConfig("inception_dilations must be non-empty positive integers")
        branches = len(self.inception_dilations)
        for c in self.channels():
            if c % branches:
                raise InvalidConfig(f"{branches} inception branches do not divide {c} channels")
        if not 0.0 < self.leaky_slope < 1.0:
            raise InvalidConfig("leaky_slope must lie in (0, 1)")

    def channels(self) -> list[int]:
        """Encoder output width per level: doubling from base_filters, capped."""
        return [min(self.base_filters * 2**j, self.max_filters) for j in range(self.levels)]

    @property
    def bottleneck_length(self) -> int:
        return self.input_length // self.down_stride**self.levels

    @property
    def down_padding(self) -> int:
        return (self.down_kernel - self.down_stride) // 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["inception_dilations"] = list(self.inception_dilations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise FormatError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class ModelParams:
    """Ordered, named parameter and buffer tensors plus the config they realise.

    Trainable tensors have ``requires_grad=True``; batch-norm running
    statistics are stored alongside them as non-trainable buffers.
    """

    def __init__(self, config: ModelConfig, tensors: Optional[dict[str, Tensor]] = None):
        self.config = config
        self.tensors: dict[str, Tensor] = dict(tensors or {})

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def trainable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.tensors.items() if t.requires_grad}

    def encoder(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.tensors.items() if k.startswith("enc")}

    def decoder(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.tensors.items() if not k.startswith("enc")}

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.trainable().values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def scope(self, prefix: str) -> "ParamScope":
        return ParamScope(self, prefix)

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: Tensor(t.data.copy(), requires_grad=t.requires_grad) for k, t in self.tensors.items()},
        )

    def _add(self, name: str, data: np.ndarray, trainable: bool = True) -> None:
        if name in self.tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        self.tensors[name] = Tensor(data, requires_grad=trainable)


class ParamScope:
    """Prefix view into a :class:`ModelParams`."""

    def __init__(self, params: ModelParams, prefix: str):
        self.params = params
        self.prefix = prefix
        self.config = params.config

    def __getitem__(self, name: str) -> Tensor:
        return self.params.tensors[f"{self.prefix}.{name}"]

    def scope(self, sub: str) -> "ParamScope":
        return ParamScope(self.params, f"{self.prefix}.{sub}")


# ---------------------------------------------------------------------------
# construction


def _uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _add_bn(params: ModelParams, name: str, c: int) -> None:
    params._add(f"{name}.gamma", np.ones(c))
    params._add(f"{name}.beta", np.zeros(c))
    params._add(f"{name}.running_mean", np.zeros(c), trainable=False)
    params._add(f"{name}.running_var", np.ones(c), trainable=False)


def _add_block(params: ModelParams, rng: np.random.Generator, name: str, c: int) -> None:
    cfg = params.config
    width = c // len(cfg.inception_dilations)
    k = cfg.inception_kernel
    for b in range(len(cfg.inception_dilations)):
        params._add(f"{name}.b{b}.weight", _uniform(rng, (width, c, k), c * k))
        _add_bn(params, f"{name}.b{b}.bn", width)


def build_model(config: ModelConfig) -> ModelParams:
    """Create a freshly initialised RespNet with fan-in-scaled uniform weights.

    Convolutions that feed a batch norm carry no bias; only the output head
    has one.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    params = ModelParams(config)
    chans = config.channels()
    k = config.down_kernel
    in_c = 1
    for j, c in enumerate(chans, start=1):
        params._add(f"enc{j}.down.weight", _uniform(rng, (c, in_c, k), in_c * k))
        _add_bn(params, f"enc{j}.down_bn", c)
        _add_block(params, rng, f"enc{j}.block", c)
        in_c = c
    x_c = chans[-1]
    for j in range(config.levels, 0, -1):
        c = chans[j - 1]
        skip_c = chans[j - 2] if j > 1 else 1
        params._add(f"dec{j}.up.weight", _uniform(rng, (x_c, c, k), x_c * k))
        mk = config.merge_kernel
        params._add(f"dec{j}.merge.weight", _uniform(rng, (c, c + skip_c, mk), (c + skip_c) * mk))
        _add_bn(params, f"dec{j}.merge_bn", c)
        _add_block(params, rng, f"dec{j}.block", c)
        x_c = c
    params._add("head.weight", _uniform(rng, (1, chans[0], 1), chans[0]))
    params._add("head.bias", _uniform(rng, (1,), chans[0]))
    return params


def expected_parameter_count(config: ModelConfig) -> int:
    """Closed-form trainable parameter count for ``config``."""
    chans = config.channels()
    k, ik, mk = config.down_kernel, config.inception_kernel, config.merge_kernel
    nb = len(config.inception_dilations)

    def block(c):
        w = c // nb
        return nb * (w * c * ik + 2 * w)

    total = 0
    prev = 1
    for c in chans:
        total += c * prev * k + 2 * c + block(c)
        prev = c
    x_c = chans[-1]
    for j in range(config.levels, 0, -1):
        c = chans[j - 1]
        skip_c = chans[j - 2] if j > 1 else 1
        total += x_c * c * k + c * (c + skip_c) * mk + 2 * c + block(c)
        x_c = c
    return total + chans[0] + 1


# ---------------------------------------------------------------------------
# forward pass


def _bn(x: Tensor, p: ParamScope, name: str, mode: str) -> Tensor:
    cfg = p.config
    training = mode == TRAIN and x.shape[0] * x.shape[2] >= 2
    return batch_norm1d(
        x,
        p[f"{name}.gamma"],
        p[f"{name}.beta"],
        p[f"{name}.running_mean"],
        p[f"{name}.running_var"],
        training=training,
        momentum=cfg.bn_momentum,
        eps=cfg.bn_eps,
    )


def dilated_residual_inception_block(x: Tensor, p: ParamScope, mode: str) -> Tensor:
    """Parallel dilated conv branches, concatenated, added to the input, activated."""
    cfg = p.config
    c = x.shape[1]
    nb = len(cfg.inception_dilations)
    if c % nb:
        raise ShapeMismatch(f"{c} channels not divisible by {nb} inception branches")
    k = cfg.inception_kernel
    merged = None
    for b, d in enumerate(cfg.inception_dilations):
        spec = ConvSpec(c, c // nb, k, stride=1, dilation=d, padding=d * (k - 1) // 2)
        h = conv1d(x, p[f"b{b}.weight"], None, spec)
        h = leaky_relu(_bn(h, p, f"b{b}.bn", mode), cfg.leaky_slope)
        merged = h if merged is None else concat_channels(merged, h)
    return leaky_relu(add(merged, x), cfg.leaky_slope)


def encoder_level(x: Tensor, p: ParamScope, mode: str) -> Tensor:
    cfg = p.config
    if x.ndim != 3 or x.shape[2] % cfg.down_stride:
        raise ShapeMismatch(f"encoder input length must be divisible by {cfg.down_stride}, got {x.shape}")
    w = p["down.weight"]
    spec = ConvSpec(w.shape[1], w.shape[0], cfg.down_kernel, stride=cfg.down_stride, padding=cfg.down_padding)
    h = conv1d(x, w, None, spec)
    h = leaky_relu(_bn(h, p, "down_bn", mode), cfg.leaky_slope)
    return dilated_residual_inception_block(h, p.scope("block"), mode)


def decoder_level(x: Tensor, skip: Tensor, p: ParamScope, mode: str) -> Tensor:
    cfg = p.config
    w = p["up.weight"]
    up_len = x.shape[2] * cfg.down_stride
    if skip.ndim != 3 or skip.shape[2] != up_len or skip.shape[0] != x.shape[0]:
        raise ShapeMismatch(f"skip {skip.shape} does not match upsampled length {up_len}")
    spec = ConvSpec(w.shape[0], w.shape[1], cfg.down_kernel, stride=cfg.down_stride, padding=cfg.down_padding)
    h = transposed_conv1d(x, w, None, spec)
    h = concat_channels(h, skip)
    mw = p["merge.weight"]
    mk = cfg.merge_kernel
    h = conv1d(h, mw, None, ConvSpec(mw.shape[1], mw.shape[0], mk, padding=(mk - 1) // 2))
    h = leaky_relu(_bn(h, p, "merge_bn", mode), cfg.leaky_slope)
    return dilated_residual_inception_block(h, p.scope("block"), mode)


def encode(params: ModelParams, x: Tensor, mode: str = EVAL) -> tuple[Tensor, list[Tensor]]:
    """Run the encoder; returns the bottleneck and the per-level skip inputs."""
    cfg = params.config
    if x.ndim != 3 or x.shape[1] != 1 or x.shape[2] != cfg.input_length:
        raise ShapeMismatch(f"expected input (N, 1, {cfg.input_length}), got {x.shape}")
    skips = []
    h = x
    for j in range(1, cfg.levels + 1):
        skips.append(h)
        h = encoder_level(h, params.scope(f"enc{j}"), mode)
    return h, skips


def forward(params: ModelParams, x: Tensor, mode: str = EVAL) -> Tensor:
    """(N, 1, input_length) PPG -> (N, 1, input_length) respiration estimate."""
    if mode not in (TRAIN, EVAL):
        raise ValueError(f"mode must be {TRAIN!r} or {EVAL!r}")
    cfg = params.config
    h, skips = encode(params, x, mode)
    for j in range(cfg.levels, 0, -1):
        h = decoder_level(h, skips[j - 1], params.scope(f"dec{j}"), mode)
    w = params["head.weight"]
    return conv1d(h, w, params["head.bias"], ConvSpec(w.shape[1], 1, 1))


def receptive_margin(config: ModelConfig) -> int:
    """Conservative one-sided reach (input samples) of any output sample."""
    reach = 0
    jump = 1
    ik = config.inception_kernel
    dmax = max(config.inception_dilations)
    for _ in range(config.levels):
        reach += config.down_kernel * jump
        jump *= config.down_stride
        reach += dmax * (ik - 1) * jump
    for _ in range(config.levels):
        reach += config.down_kernel * jump
        jump //= config.down_stride
        reach += config.merge_kernel * jump + dmax * (ik - 1) * jump
    return reach


# ---------------------------------------------------------------------------
# checkpoint I/O

MAGIC = b"RSPN"
VERSION = 1
_PRECISIONS = {8: "<f8", 4: "<f4"}


def write_checkpoint(
    path,
    config: ModelConfig,
    tensors: dict[str, np.ndarray],
    meta: Optional[dict] = None,
    precision: int = 8,
) -> None:
    """Serialize named arrays with an embedded config and free-form metadata.

    Layout (little-endian): magic ``RSPN``, u16 version, u8 bytes-per-value,
    u32 header length + UTF-8 JSON header ``{"config", "meta"}``, u32 tensor
    count, then per tensor: u16 name length, UTF-8 name, u8 rank, u32 dims,
    raw IEEE-754 values.
    """
    if precision not in _PRECISIONS:
        raise ValueError("precision must be 8 (float64) or 4 (float32)")
    header = json.dumps({"config": config.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    dtype = _PRECISIONS[precision]
    chunks = [MAGIC, struct.pack("<HB", VERSION, precision), struct.pack("<I", len(header)), header]
    chunks.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    try:
        Path(path).write_bytes(b"".join(chunks))
    except OSError as exc:
        raise IoError(str(exc)) from exc


def read_checkpoint(path) -> tuple[ModelConfig, dict, dict[str, np.ndarray]]:
    """Inverse of :func:`write_checkpoint`; arrays come back as float64."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError("checkpoint truncated")
        out = blob[pos : pos + n]
        pos += n
        return out

    if take(4) != MAGIC:
        raise FormatError("bad checkpoint magic")
    version, precision = struct.unpack("<HB", take(3))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    if precision not in _PRECISIONS:
        raise FormatError(f"bad precision code {precision}")
    (hlen,) = struct.unpack("<I", take(4))
    try:
        header = json.loads(take(hlen).decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        meta = header.get("meta", {})
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"bad checkpoint header: {exc}") from exc
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(n * precision), dtype=_PRECISIONS[precision]).reshape(dims)
        tensors[name] = arr.astype(np.float64)
    if pos != len(blob):
        raise FormatError("trailing bytes after checkpoint tensors")
    return config, meta, tensors


def save_checkpoint(params: ModelParams, path, precision: int = 8, meta: Optional[dict] = None) -> None:
    write_checkpoint(path, params.config, {k: t.data for k, t in params.items()}, meta, precision)


def params_from_arrays(config: ModelConfig, arrays: dict[str, np.ndarray]) -> ModelParams:
    """Rebuild :class:`ModelParams` for ``config`` from named arrays, checking every shape."""
    template = build_model(config)
    for name, t in template.items():
        if name not in arrays:
            raise ConfigMismatch(f"checkpoint lacks tensor {name!r}")
        if arrays[name].shape != t.shape:
            raise ConfigMismatch(f"{name}: shape {arrays[name].shape} != {t.shape}")
        t.data = np.array(arrays[name], dtype=np.float64)
    return template


def load_checkpoint(path, expected_config: Optional[ModelConfig] = None) -> ModelParams:
    config, _, arrays = read_checkpoint(path)
    if expected_config is not None and expected_config != config:
        raise ConfigMismatch("checkpoint config differs from the expected config")
    model_arrays = {k: v for k, v in arrays.items() if not k.startswith("optim.")}
    return params_from_arrays(config, model_arrays)


def checkpoint_info(path) -> dict:
    config, meta, arrays = read_checkpoint(path)
    params = params_from_arrays(config, {k: v for k, v in arrays.items() if not k.startswith("optim.")})
    return {
        "config": config.to_dict(),
        "meta": meta,
        "n_parameters": params.num_parameters(),
        "n_tensors": len(params),
    }
