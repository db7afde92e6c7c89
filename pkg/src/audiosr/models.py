"""The three networks: a residual post-upsampler, a bottleneck pre-upsampler,
and the scoring critic, plus parameter accounting and checkpoint I/O."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, fields
from io import BytesIO

import numpy as np

from . import diffgraph as dg
from . import probe
from .diffgraph import AdamState, Parameter, Tensor


@dataclass(frozen=True)
class EdsrConfig:
    """Post-upsampling residual network; scale is 2**upsample_stages."""

    filters: int = 128
    n_blocks: int = 32
    block_kernel: int = 9
    stem_kernel: int = 3
    upsample_stages: int = 1
    residual_scaling: float = 0.1

    def __post_init__(self):
        if self.filters < 1 or self.n_blocks < 1:
            raise ValueError("filters and n_blocks must be >= 1")
        for k in (self.block_kernel, self.stem_kernel):
            if k < 1 or k % 2 == 0:
                raise ValueError(f"kernels must be odd positive integers, got {k}")
        if self.upsample_stages < 1:
            raise ValueError("upsample_stages must be >= 1")
        if not 0.0 < self.residual_scaling <= 1.0:
            raise ValueError(f"residual_scaling must lie in (0, 1], got {self.residual_scaling}")

    @property
    def scale(self) -> int:
        return 2**self.upsample_stages


@dataclass(frozen=True)
class UnetConfig:
    """Pre-upsampling bottleneck network operating at the target rate."""

    depth: int = 4
    down_filters: tuple[int, ...] = (128, 256, 512, 512)
    down_kernels: tuple[int, ...] = (65, 33, 17, 9)
    bottleneck_filters: int = 512
    dropout_rate: float = 0.5
    scale: int = 2
    final_kernel: int = 9

    def __post_init__(self):
        object.__setattr__(self, "down_filters", tuple(int(f) for f in self.down_filters))
        object.__setattr__(self, "down_kernels", tuple(int(k) for k in self.down_kernels))
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if len(self.down_filters) != self.depth or len(self.down_kernels) != self.depth:
            raise ValueError("down_filters and down_kernels must both have length depth")
        for k in (*self.down_kernels, self.final_kernel):
            if k < 1 or k % 2 == 0:
                raise ValueError(f"kernels must be odd positive integers, got {k}")
        if any(f < 1 for f in self.down_filters) or self.bottleneck_filters < 1:
            raise ValueError("filter counts must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.scale < 2:
            raise ValueError(f"scale must be >= 2, got {self.scale}")


@dataclass(frozen=True)
class CriticConfig:
    """Stride-2 conv stack scoring each signal with a single real number."""

    layers: int = 6
    base_filters: int = 16
    kernel: int = 25
    leaky_slope: float = 0.2
    phase_shuffle_n: int = 2

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.base_filters < 1:
            raise ValueError("base_filters must be >= 1")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be an odd positive integer, got {self.kernel}")
        if self.phase_shuffle_n < 0:
            raise ValueError("phase_shuffle_n must be >= 0")


class Model:
    """Ordered differentiable operator graph with named parameters."""

    kind = "model"

    def __init__(self, config, dtype: str = "float64", init_seed: int = 0):
        self.config = config
        self.dtype = np.dtype(dtype)
        if self.dtype not in (np.dtype("float32"), np.dtype("float64")):
            raise ValueError(f"dtype must be float32 or float64, got {dtype}")
        self.init_seed = int(init_seed)
        self.params: dict[str, Parameter] = {}
        self.train_step = 0
        self.adam_state: AdamState | None = None

    # --- parameter plumbing ---

    def _register(self, name: str, data: np.ndarray) -> Parameter:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Parameter(name, data.astype(self.dtype))
        self.params[name] = p
        return p

    def _conv_init(self, rng: np.random.Generator, name: str, c_out: int, c_in: int, k: int):
        fan_in = c_in * k
        wb = math.sqrt(6.0 / fan_in)
        self._register(f"{name}.w", rng.uniform(-wb, wb, (c_out, c_in, k)))
        bb = 1.0 / math.sqrt(fan_in)
        self._register(f"{name}.b", rng.uniform(-bb, bb, (c_out,)))

    def _dense_init(self, rng: np.random.Generator, name: str, f_in: int, f_out: int):
        wb = math.sqrt(6.0 / f_in)
        self._register(f"{name}.w", rng.uniform(-wb, wb, (f_in, f_out)))
        bb = 1.0 / math.sqrt(f_in)
        self._register(f"{name}.b", rng.uniform(-bb, bb, (f_out,)))

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def _conv(self, x, name: str, stride: int = 1):
        return dg.conv1d(
            x, self.params[f"{name}.w"].tensor, self.params[f"{name}.b"].tensor, stride=stride
        )

    def _check_input(self, x: Tensor) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.ndim != 3:
            raise ValueError(f"expected (batch, channels, length), got shape {x.shape}")
        if x.shape[1] != 1:
            raise ValueError(f"expected a single input channel, got {x.shape[1]}")
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype), requires_grad=x.requires_grad)
        return x

    # --- contracts overridden per kind ---

    @property
    def upsample_ratio(self) -> int:
        return 1

    @property
    def length_divisor(self) -> int:
        return 1

    def forward(self, x, training: bool = False, rng: np.random.Generator | None = None):
        raise NotImplementedError


class EdsrModel(Model):
    kind = "edsr"

    def __init__(self, config: EdsrConfig, dtype: str = "float64", init_seed: int = 0):
        super().__init__(config, dtype, init_seed)
        rng = np.random.default_rng(init_seed)
        f, kb, ks = config.filters, config.block_kernel, config.stem_kernel
        self._conv_init(rng, "stem", f, 1, ks)
        for i in range(config.n_blocks):
            self._conv_init(rng, f"block{i:02d}.conv1", f, f, kb)
            self._conv_init(rng, f"block{i:02d}.conv2", f, f, kb)
        self._conv_init(rng, "post", f, f, ks)
        for q in range(config.upsample_stages):
            self._conv_init(rng, f"up{q}", 2 * f, f, ks)
        self._conv_init(rng, "head", 1, f, ks)

    @property
    def scale(self) -> int:
        return self.config.scale

    @property
    def upsample_ratio(self) -> int:
        return self.config.scale

    def forward(self, x, training: bool = False, rng=None):
        x = self._check_input(x)
        h = self._conv(x, "stem")
        skip = h
        for i in range(self.config.n_blocks):
            branch = self._conv(h, f"block{i:02d}.conv1")
            branch = dg.relu(branch)
            branch = self._conv(branch, f"block{i:02d}.conv2")
            h = dg.add(h, dg.mul(branch, self.config.residual_scaling))
        h = self._conv(h, "post")
        h = dg.add(h, skip)
        for q in range(self.config.upsample_stages):
            h = self._conv(h, f"up{q}")
            h = dg.subpixel_shuffle1d(h, 2)
        return self._conv(h, "head")


class UnetModel(Model):
    kind = "unet"

    def __init__(self, config: UnetConfig, dtype: str = "float64", init_seed: int = 0):
        super().__init__(config, dtype, init_seed)
        rng = np.random.default_rng(init_seed)
        c_in = 1
        for i, (f, k) in enumerate(zip(config.down_filters, config.down_kernels)):
            self._conv_init(rng, f"down{i}", f, c_in, k)
            c_in = f
        self._conv_init(
            rng, "bottleneck", config.bottleneck_filters, c_in, config.down_kernels[-1]
        )
        c_in = config.bottleneck_filters
        for i in reversed(range(config.depth)):
            f, k = config.down_filters[i], config.down_kernels[i]
            self._conv_init(rng, f"up{i}", 2 * f, c_in, k)
            c_in = 2 * f  # f from the shuffle + f from the mirror stack
        self._conv_init(rng, "head", 2, c_in, config.final_kernel)

    @property
    def scale(self) -> int:
        return self.config.scale

    @property
    def length_divisor(self) -> int:
        return 2**self.config.depth

    def forward(self, x, training: bool = False, rng: np.random.Generator | None = None):
        x = self._check_input(x)
        divisor = self.length_divisor
        if x.shape[2] % divisor != 0:
            raise ValueError(
                f"input length {x.shape[2]} must be divisible by {divisor} "
                f"(2**depth for depth={self.config.depth})"
            )
        if training and self.config.dropout_rate > 0 and rng is None:
            raise ValueError("training-mode forward needs an rng for dropout")
        h = x
        skips = []
        for i in range(self.config.depth):
            h = self._conv(h, f"down{i}", stride=2)
            h = dg.leaky_relu(h, 0.2)
            skips.append(h)
        h = self._conv(h, "bottleneck", stride=2)
        h = dg.leaky_relu(h, 0.2)
        for i in reversed(range(self.config.depth)):
            h = self._conv(h, f"up{i}")
            h = dg.dropout(h, self.config.dropout_rate, rng=rng, training=training)
            h = dg.relu(h)
            h = dg.subpixel_shuffle1d(h, 2)
            skip = skips[i]
            if h.shape[2] > skip.shape[2]:  # stride-2 rounding on odd interior lengths
                h = dg.slice_time(h, 0, skip.shape[2])
            h = dg.concat_channels(h, skip)
        h = self._conv(h, "head")
        h = dg.subpixel_shuffle1d(h, 2)
        if h.shape[2] > x.shape[2]:
            h = dg.slice_time(h, 0, x.shape[2])
        return dg.add(h, x)


class CriticModel(Model):
    kind = "critic"

    def __init__(self, config: CriticConfig, dtype: str = "float64", init_seed: int = 0):
        super().__init__(config, dtype, init_seed)
        rng = np.random.default_rng(init_seed)
        c_in = 1
        for i in range(config.layers):
            c_out = config.base_filters * 2**i
            self._conv_init(rng, f"layer{i}", c_out, c_in, config.kernel)
            c_in = c_out
        self._dense_init(rng, "score", c_in, 1)

    def forward(self, x, training: bool = False, rng: np.random.Generator | None = None):
        x = self._check_input(x)
        cfg = self.config
        shuffle = training and cfg.phase_shuffle_n > 0
        if shuffle and rng is None:
            raise ValueError("training-mode forward needs an rng for phase shuffling")
        h = x
        for i in range(cfg.layers):
            h = self._conv(h, f"layer{i}", stride=2)
            h = dg.leaky_relu(h, cfg.leaky_slope)
            if shuffle and i < cfg.layers - 1:
                h = probe.phase_shuffle(h, cfg.phase_shuffle_n, rng)
        pooled = dg.mean_time(h)
        score = dg.dense(pooled, self.params["score.w"].tensor, self.params["score.b"].tensor)
        return dg.reshape(score, (x.shape[0],))


def build_edsr(cfg: EdsrConfig, dtype: str = "float64", seed: int = 0) -> EdsrModel:
    return EdsrModel(cfg, dtype=dtype, init_seed=seed)


def build_unet(cfg: UnetConfig, dtype: str = "float64", seed: int = 0) -> UnetModel:
    return UnetModel(cfg, dtype=dtype, init_seed=seed)


def build_critic(cfg: CriticConfig, dtype: str = "float64", seed: int = 0) -> CriticModel:
    return CriticModel(cfg, dtype=dtype, init_seed=seed)


def forward(m: Model, x, training: bool = False, rng=None):
    return m.forward(x, training=training, rng=rng)


def count_parameters(m: Model) -> int:
    return sum(p.size for p in m.parameters())


# ---------------------------------------------------------------------------
# checkpoint container
#
# Layout (all integers little-endian):
#   magic            8 bytes  b"AUSRCKP1"
#   format_version   u32
#   header_len       u32, then UTF-8 "key = value" lines (kind, dtype, seed,
#                    step, adam flag, flattened config)
#   n_params         u32
#   per parameter:   name_len u16 + name, dtype code u8 (0=f64, 1=f32),
#                    ndim u8, dims u32 each, raw little-endian payload
#   if adam:         t u64, alpha/beta1/beta2/eps f64, then per parameter
#                    (same order) the m and v payloads
#   trailer          4 bytes  b"AEND"
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"AUSRCKP1"
CHECKPOINT_TRAILER = b"AEND"
FORMAT_VERSION = 1

_KINDS = {"edsr": (EdsrConfig, EdsrModel), "unet": (UnetConfig, UnetModel), "critic": (CriticConfig, CriticModel)}
_DTYPE_CODES = {"float64": 0, "float32": 1}
_CODE_DTYPES = {0: np.dtype("float64"), 1: np.dtype("float32")}


class CheckpointError(Exception):
    """Base class for checkpoint problems."""


class CheckpointCorruptError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointKindError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    """Serializable snapshot of a model (and optionally its optimizer)."""

    kind: str
    config: EdsrConfig | UnetConfig | CriticConfig
    params: dict[str, np.ndarray]
    dtype: str = "float64"
    seed: int = 0
    step: int = 0
    adam: AdamState | None = None
    format_version: int = FORMAT_VERSION

    @classmethod
    def from_model(cls, m: Model, adam: AdamState | None = None, seed: int | None = None) -> "Checkpoint":
        return cls(
            kind=m.kind,
            config=m.config,
            params={name: p.data.copy() for name, p in m.params.items()},
            dtype=str(m.dtype),
            seed=m.init_seed if seed is None else seed,
            step=m.train_step,
            adam=adam if adam is not None else m.adam_state,
        )

    def build_model(self) -> Model:
        model_cls = _KINDS[self.kind][1]
        m = model_cls(self.config, dtype=self.dtype, init_seed=self.seed)
        if set(m.params) != set(self.params):
            raise CheckpointCorruptError("parameter names do not match the model architecture")
        for name, arr in self.params.items():
            if m.params[name].shape != arr.shape:
                raise CheckpointCorruptError(
                    f"parameter {name!r} has shape {arr.shape}, expected {m.params[name].shape}"
                )
            m.params[name].data = arr.copy()
        m.train_step = self.step
        m.adam_state = self.adam
        return m

    def save(self, path) -> None:
        buf = BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<I", self.format_version))
        header = self._header_text().encode("utf-8")
        buf.write(struct.pack("<I", len(header)))
        buf.write(header)
        buf.write(struct.pack("<I", len(self.params)))
        for name, arr in self.params.items():
            _write_blob(buf, name, arr)
        if self.adam is not None:
            a = self.adam
            buf.write(struct.pack("<Qdddd", a.t, a.alpha, a.beta1, a.beta2, a.eps))
            for name in self.params:
                _write_array(buf, a.m[name])
                _write_array(buf, a.v[name])
        buf.write(CHECKPOINT_TRAILER)
        with open(path, "wb") as fh:
            fh.write(buf.getvalue())

    def _header_text(self) -> str:
        lines = [
            f"kind = {self.kind}",
            f"dtype = {self.dtype}",
            f"seed = {self.seed}",
            f"step = {self.step}",
            f"adam = {1 if self.adam is not None else 0}",
        ]
        for f in fields(self.config):
            val = getattr(self.config, f.name)
            if isinstance(val, tuple):
                val = ",".join(str(v) for v in val)
            lines.append(f"cfg.{f.name} = {val}")
        return "\n".join(lines) + "\n"

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, "rb") as fh:
            raw = fh.read()
        buf = BytesIO(raw)
        magic = _read_exact(buf, len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointCorruptError("not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(buf, 4))
        if version != FORMAT_VERSION:
            raise CheckpointVersionError(
                f"checkpoint format version {version} unsupported (expected {FORMAT_VERSION})"
            )
        (hlen,) = struct.unpack("<I", _read_exact(buf, 4))
        header = _read_exact(buf, hlen).decode("utf-8")
        meta = {}
        for line in header.splitlines():
            if not line.strip():
                continue
            key, _, val = line.partition(" = ")
            meta[key.strip()] = val
        try:
            kind = meta["kind"]
            dtype = meta["dtype"]
            seed = int(meta["seed"])
            step = int(meta["step"])
            has_adam = meta["adam"] == "1"
        except KeyError as exc:
            raise CheckpointCorruptError(f"header missing field {exc}") from exc
        if kind not in _KINDS:
            raise CheckpointCorruptError(f"unknown model kind {kind!r}")
        config = _config_from_meta(kind, meta)
        (n_params,) = struct.unpack("<I", _read_exact(buf, 4))
        params: dict[str, np.ndarray] = {}
        for _ in range(n_params):
            name, arr = _read_blob(buf)
            params[name] = arr
        adam = None
        if has_adam:
            t, alpha, beta1, beta2, eps = struct.unpack("<Qdddd", _read_exact(buf, 40))
            adam = AdamState(alpha=alpha, beta1=beta1, beta2=beta2, eps=eps, t=t)
            for name in params:
                adam.m[name] = _read_array(buf)
                adam.v[name] = _read_array(buf)
        trailer = _read_exact(buf, len(CHECKPOINT_TRAILER))
        if trailer != CHECKPOINT_TRAILER:
            raise CheckpointCorruptError("missing trailer; file is corrupt")
        return cls(
            kind=kind, config=config, params=params, dtype=dtype,
            seed=seed, step=step, adam=adam, format_version=version,
        )


def _config_from_meta(kind: str, meta: dict):
    config_cls = _KINDS[kind][0]
    kwargs = {}
    for f in fields(config_cls):
        raw = meta.get(f"cfg.{f.name}")
        if raw is None:
            raise CheckpointCorruptError(f"header missing config field {f.name!r}")
        if f.type.startswith("tuple"):
            kwargs[f.name] = tuple(int(v) for v in raw.split(",")) if raw else ()
        elif f.type == "int":
            kwargs[f.name] = int(raw)
        elif f.type == "float":
            kwargs[f.name] = float(raw)
        else:
            kwargs[f.name] = raw
    return config_cls(**kwargs)


def _read_exact(buf: BytesIO, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise CheckpointCorruptError("unexpected end of file; checkpoint is truncated")
    return data


def _write_array(buf: BytesIO, arr: np.ndarray) -> None:
    code = _DTYPE_CODES[str(arr.dtype)]
    buf.write(struct.pack("<BB", code, arr.ndim))
    for d in arr.shape:
        buf.write(struct.pack("<I", d))
    buf.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def _read_array(buf: BytesIO) -> np.ndarray:
    code, ndim = struct.unpack("<BB", _read_exact(buf, 2))
    if code not in _CODE_DTYPES:
        raise CheckpointCorruptError(f"unknown dtype code {code}")
    dims = tuple(struct.unpack("<I", _read_exact(buf, 4))[0] for _ in range(ndim))
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(dims)) if dims else 1
    payload = _read_exact(buf, count * dtype.itemsize)
    arr = np.frombuffer(payload, dtype=dtype.newbyteorder("<")).astype(dtype)
    return arr.reshape(dims)


def _write_blob(buf: BytesIO, name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    buf.write(struct.pack("<H", len(encoded)))
    buf.write(encoded)
    _write_array(buf, arr)


def _read_blob(buf: BytesIO):
    (nlen,) = struct.unpack("<H", _read_exact(buf, 2))
    name = _read_exact(buf, nlen).decode("utf-8")
    return name, _read_array(buf)


def save_checkpoint(m: Model, path, adam_state: AdamState | None = None) -> None:
    Checkpoint.from_model(m, adam=adam_state).save(path)


def load_checkpoint(path, expect_kind: str | None = None) -> Model:
    ckpt = Checkpoint.load(path)
    if expect_kind is not None and ckpt.kind != expect_kind:
        raise CheckpointKindError(
            f"checkpoint holds a {ckpt.kind!r} model, but {expect_kind!r} is required"
        )
    return ckpt.build_model()
