"""Analysis/synthesis transforms built from Voxception-ResNet blocks and the
lightweight hyper transforms that predict the latent Laplace parameters."""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Tape

SIGMA_MIN = 1e-2
SIGMA_MAX = 64.0
LOG_SIGMA_MIN = float(np.log(SIGMA_MIN))
LOG_SIGMA_MAX = float(np.log(SIGMA_MAX))


@dataclass(frozen=True)
class NetConfig:
    base_channels: tuple = (16, 32, 64)
    latent_channels: int = 16
    hyper_channels: int = 8
    vrn_per_stage: int = 3
    stages: int = 3

    def __post_init__(self):
        object.__setattr__(self, "base_channels", tuple(int(c) for c in self.base_channels))
        if len(self.base_channels) != self.stages:
            raise ValueError(f"need {self.stages} base channel counts, got {self.base_channels}")
        for c in self.base_channels:
            if c < 4 or c % 2:
                raise ValueError(f"VRN channel counts must be even and >= 4, got {c}")
        if self.latent_channels < 1 or self.hyper_channels < 1:
            raise ValueError("latent and hyper channel counts must be >= 1")
        if self.vrn_per_stage < 0 or self.stages < 1:
            raise ValueError("invalid stage layout")

    @property
    def downscale(self):
        return 2 ** self.stages

    def check_cube_size(self, w):
        if w < 8 or w & (w - 1) or w % self.downscale:
            raise ValueError(f"cube size {w} must be a power of two >= 8 and divisible "
                             f"by {self.downscale}")

    def to_dict(self):
        d = asdict(self)
        d["base_channels"] = list(self.base_channels)
        return d


PROFILES = {
    "desk": NetConfig((16, 32, 64), 16, 8, 3, 3),
    "tiny": NetConfig((8, 16, 16), 16, 4, 1, 3),
}
PROFILE_IDS = {"custom": 0, "desk": 1, "tiny": 2}


def profile_id(cfg):
    for name, p in PROFILES.items():
        if p == cfg:
            return PROFILE_IDS[name]
    return PROFILE_IDS["custom"]


# --------------------------------------------------------------------------
# parameter layout


def _vrn_shapes(prefix, c):
    half, quarter = c // 2, max(1, c // 4)
    return {
        f"{prefix}.a1": ("conv", c, half, 3),
        f"{prefix}.a2": ("conv", half, half, 3),
        f"{prefix}.b1": ("conv", c, half, 1),
        f"{prefix}.b2": ("conv", half, quarter, 3),
        f"{prefix}.b3": ("conv", quarter, half, 1),
    }


def layer_specs(cfg):
    """Ordered ``name -> (kind, cin, cout, k)`` for every layer."""
    specs = {}
    cin = 1
    for s, c in enumerate(cfg.base_channels):
        specs[f"ana.s{s}.down"] = ("conv", cin, c, 3)
        for j in range(cfg.vrn_per_stage):
            specs.update(_vrn_shapes(f"ana.s{s}.vrn{j}", c))
        cin = c
    specs["ana.out"] = ("conv", cin, cfg.latent_channels, 1)

    specs["syn.in"] = ("conv", cfg.latent_channels, cfg.base_channels[-1], 1)
    for s in reversed(range(cfg.stages)):
        c = cfg.base_channels[s]
        for j in range(cfg.vrn_per_stage):
            specs.update(_vrn_shapes(f"syn.s{s}.vrn{j}", c))
        cout = cfg.base_channels[s - 1] if s > 0 else 1
        specs[f"syn.s{s}.up"] = ("deconv", c, cout, 3)

    cy, cz = cfg.latent_channels, cfg.hyper_channels
    specs["ha.c0"] = ("conv", cy, cy, 3)
    specs["ha.c1"] = ("conv", cy, cy, 3)
    specs["ha.c2"] = ("conv", cy, cz, 3)
    specs["hs.c0"] = ("deconv", cz, cy, 3)
    specs["hs.c1"] = ("deconv", cy, cy, 3)
    specs["hs.c2"] = ("conv", cy, 2 * cy, 3)
    return specs


def init_params(cfg, seed=0, dtype=np.float64):
    """He-uniform weights, zero biases, unit-scale factorized priors."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, (kind, cin, cout, k) in layer_specs(cfg).items():
        bound = np.sqrt(6.0 / (cin * k ** 3))
        shape = (cout, cin, k, k, k) if kind == "conv" else (cin, cout, k, k, k)
        params[name + ".w"] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        params[name + ".b"] = np.zeros(cout, dtype=dtype)
    params.update(factorized_init(cfg.hyper_channels, "fz", dtype))
    return params


def factorized_init(channels, prefix, dtype=np.float64):
    return {f"{prefix}.loc": np.zeros(channels, dtype=dtype),
            f"{prefix}.logscale": np.zeros(channels, dtype=dtype)}


# --------------------------------------------------------------------------
# graph builders (operate on a Tape)


def build_vrn(tape, x, prefix):
    a = tape.conv(x, prefix + ".a1")
    a = tape.relu(a)
    a = tape.conv(a, prefix + ".a2")
    b = tape.conv(x, prefix + ".b1")
    b = tape.relu(b)
    b = tape.conv(b, prefix + ".b2")
    b = tape.relu(b)
    b = tape.conv(b, prefix + ".b3")
    return tape.add(x, tape.concat(a, b))


def build_analysis(tape, x, cfg):
    h = x
    for s in range(cfg.stages):
        h = tape.conv(h, f"ana.s{s}.down", stride=2)
        for j in range(cfg.vrn_per_stage):
            h = build_vrn(tape, h, f"ana.s{s}.vrn{j}")
    return tape.conv(h, "ana.out")


def build_synthesis(tape, y, cfg):
    h = tape.conv(y, "syn.in")
    for s in reversed(range(cfg.stages)):
        for j in range(cfg.vrn_per_stage):
            h = build_vrn(tape, h, f"syn.s{s}.vrn{j}")
        h = tape.deconv(h, f"syn.s{s}.up", stride=2)
    return h


def hyper_strides(y_size):
    """Strides of the two downsampling hyper convs for a latent of spatial
    size ``y_size``; a stride-2 layer on a 1-voxel grid degenerates to 1."""
    strides, sizes = [], [y_size]
    n = y_size
    for _ in range(2):
        s = 2 if n > 1 else 1
        strides.append(s)
        n = -(-n // s)
        sizes.append(n)
    return strides, sizes


def build_hyper_analysis(tape, y, cfg):
    (s1, s2), _ = hyper_strides(y.value.shape[-1])
    h = tape.relu(tape.conv(y, "ha.c0"))
    h = tape.relu(tape.conv(h, "ha.c1", stride=s1))
    return tape.conv(h, "ha.c2", stride=s2)


def build_hyper_synthesis(tape, z, cfg, y_size):
    (s1, s2), sizes = hyper_strides(y_size)
    h = tape.relu(tape.deconv(z, "hs.c0", stride=s2, out_size=sizes[1]))
    h = tape.relu(tape.deconv(h, "hs.c1", stride=s1, out_size=sizes[0]))
    h = tape.conv(h, "hs.c2")
    mu, raw = tape.split(h, cfg.latent_channels)
    sigma = tape.clamped_exp(raw, LOG_SIGMA_MIN, LOG_SIGMA_MAX)
    return mu, sigma


# --------------------------------------------------------------------------
# model container and array-level entry points


@dataclass
class ModelParameters:
    config: NetConfig
    params: dict = field(default_factory=dict)

    @classmethod
    def initialize(cls, config, seed=0, dtype=np.float64):
        return cls(config, init_params(config, seed, dtype))

    def astype(self, dtype):
        return ModelParameters(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    def copy(self):
        return ModelParameters(self.config, {k: v.copy() for k, v in self.params.items()})

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    @property
    def has_factorized_latent(self):
        return "fy.loc" in self.params

    def num_parameters(self):
        return int(sum(v.size for v in self.params.values()))

    def save(self, path):
        with open(path, "wb") as f:
            f.write(dump_checkpoint(self))

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            return load_checkpoint(f.read())


def _as_batch(x, dtype):
    x = np.asarray(x, dtype=dtype)
    if x.ndim == 3:
        return x[None, None], 2
    if x.ndim == 4:
        return x[None], 1
    return x, 0


def _unbatch(v, squeezed):
    for _ in range(squeezed):
        v = v[0]
    return v


def vrn_block(x, params, prefix="vrn"):
    """Apply one VRN block to a (C, D, H, W) or batched grid."""
    xb, sq = _as_batch(x, next(iter(params.values())).dtype)
    if xb.shape[1] % 2:
        raise ValueError(f"VRN blocks need an even channel count, got {xb.shape[1]}")
    tape = Tape(params, record=False)
    return _unbatch(build_vrn(tape, tape.constant(xb), prefix).value, min(sq, 1))


def analysis(x, model):
    """Occupancy cube (W, W, W), (1, W, W, W) or a batch -> latent ``y``."""
    xb, sq = _as_batch(x, model.dtype)
    if xb.shape[1] != 1:
        raise ValueError(f"analysis expects one input channel, got {xb.shape[1]}")
    model.config.check_cube_size(xb.shape[-1])
    tape = Tape(model.params, record=False)
    return _unbatch(build_analysis(tape, tape.constant(xb), model.config).value, min(sq, 1))


def synthesis(y_hat, model):
    """Quantized latent -> occupancy logits of shape (1, W, W, W)."""
    yb, sq = _as_batch(y_hat, model.dtype)
    if yb.shape[1] != model.config.latent_channels:
        raise ValueError(f"latent has {yb.shape[1]} channels, model expects "
                         f"{model.config.latent_channels}")
    tape = Tape(model.params, record=False)
    return _unbatch(build_synthesis(tape, tape.constant(yb), model.config).value, min(sq, 1))


def hyper_analysis(y, model):
    yb, sq = _as_batch(y, model.dtype)
    if yb.shape[1] != model.config.latent_channels:
        raise ValueError("latent channel mismatch")
    tape = Tape(model.params, record=False)
    return _unbatch(build_hyper_analysis(tape, tape.constant(yb), model.config).value, min(sq, 1))


def hyper_synthesis(z_hat, model, y_size):
    """Decoded hyperprior -> ``(mu, sigma)`` at the latent's spatial size."""
    zb, sq = _as_batch(z_hat, model.dtype)
    if zb.shape[1] != model.config.hyper_channels:
        raise ValueError("hyperprior channel mismatch")
    tape = Tape(model.params, record=False)
    mu, sigma = build_hyper_synthesis(tape, tape.constant(zb), model.config, y_size)
    return _unbatch(mu.value, min(sq, 1)), _unbatch(sigma.value, min(sq, 1))


# --------------------------------------------------------------------------
# checkpoint format
#
#   magic  b"VXCKPT"            6 bytes
#   version                     u16
#   config length, config JSON  u32 + utf-8 bytes
#   array count                 u32
#   per array: name length u16, name utf-8, dtype code u8 (1=f8, 2=f4),
#              ndim u8, dims u32 * ndim, raw little-endian data
#
# Arrays are written in sorted name order.

CKPT_MAGIC = b"VXCKPT"
CKPT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f8"): 1, np.dtype("<f4"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def dump_checkpoint(model):
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<H", CKPT_VERSION))
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(model.params)))
    for name in sorted(model.params):
        arr = np.asarray(model.params[name])
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise ValueError(f"unsupported dtype {arr.dtype} for {name}")
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return buf.getvalue()


def load_checkpoint(data):
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise ValueError("truncated checkpoint")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(len(CKPT_MAGIC))) != CKPT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<H", take(2))
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (n,) = struct.unpack("<I", take(4))
    cfg = NetConfig(**json.loads(bytes(take(n)).decode()))
    (count,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(count):
        (ln,) = struct.unpack("<H", take(2))
        name = bytes(take(ln)).decode()
        code, ndim = struct.unpack("<BB", take(2))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dt = _CODE_DTYPES[code]
        size = int(np.prod(shape)) * dt.itemsize
        params[name] = np.frombuffer(bytes(take(size)), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if pos != len(view):
        raise ValueError("trailing bytes after checkpoint")
    return ModelParameters(cfg, params)
