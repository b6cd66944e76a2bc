"""Cube and point-cloud encode/decode, voxel classification and the
bitstream container."""

from __future__ import annotations

import io
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .autodiff import sigmoid
from .entropy import (
    TableCache,
    factorized_scale,
    quantize_round,
    round_half_away,
    symbol_range,
)
from .pointcloud_io import PointSet, extract, voxelize
from .preprocess import (
    Cube,
    CubeIndexSet,
    ScaleConfig,
    assemble,
    decode_cube_positions,
    encode_cube_positions,
    inverse_scale,
    partition,
    scale_points,
)
from .range_coder import CodedStream, decode_symbols, encode_symbols
from .transforms import (
    NetConfig,
    analysis,
    hyper_analysis,
    hyper_synthesis,
    profile_id,
    synthesis,
)

MAGIC = b"PCGC"
VERSION = 1
HYPERPRIOR = 0
FACTORIZED = 1
ENTROPY_MODES = {"hyperprior": HYPERPRIOR, "factorized": FACTORIZED}


class BitstreamError(ValueError):
    pass


# --------------------------------------------------------------------------
# classification


def classify_topk(p, k):
    """Occupy exactly ``k`` voxels with the highest probability; ties go to
    the smaller linear (i, j, k) index."""
    p = np.asarray(p)
    flat = p.ravel()
    if not 0 <= k <= flat.size:
        raise ValueError(f"k={k} outside [0, {flat.size}]")
    order = np.argsort(-flat, kind="stable")
    out = np.zeros(flat.size, dtype=bool)
    out[order[:k]] = True
    return out.reshape(p.shape)


def classify_fixed(p, threshold=0.5):
    return np.asarray(p) > threshold


RHO_GRID = tuple(round(0.5 + 0.05 * j, 2) for j in range(1, 30))


def _cube_metric(original, occupancy, metric):
    a = np.argwhere(original)
    b = np.argwhere(occupancy)
    if len(b) == 0:
        return np.inf
    if metric == "d1":
        return metrics.d1_mse(a, b)
    if metric == "d2":
        if len(a) < 3 or len(b) < 3:
            return metrics.d1_mse(a, b)
        return metrics.d2_mse(a, b, metrics.estimate_normals(b), metrics.estimate_normals(a))
    raise ValueError(f"unknown metric {metric!r}")


def tune_rho(cube, p, metric="d1"):
    """Grid-search ``rho`` in (0.5, 2) for ``k_f = round(rho * k)`` that
    minimizes D1 or D2 of the top-k reconstruction; ties pick the rho
    nearest 1.  Returns ``(rho, k_f)``."""
    original = cube.occupancy if isinstance(cube, Cube) else np.asarray(cube, dtype=bool)
    k = int(original.sum())
    p = np.asarray(p).reshape(original.shape)
    best = None
    cache = {}
    for rho in sorted(RHO_GRID, key=lambda r: (abs(r - 1.0), r)):
        kf = int(min(max(round_half_away(rho * k), 1), original.size))
        if kf not in cache:
            cache[kf] = _cube_metric(original, classify_topk(p, kf), metric)
        if best is None or cache[kf] < best[0]:
            best = (cache[kf], rho, kf)
    return best[1], best[2]


# --------------------------------------------------------------------------
# fixed-width k fields


def k_field_width(w):
    """``3 log2 W`` bits; the field stores ``k - 1`` so ``k = W^3`` fits."""
    return 3 * (int(w).bit_length() - 1)


class BitWriter:
    def __init__(self):
        self.acc = 0
        self.nbits = 0

    def write(self, value, width):
        if value < 0 or value >= (1 << width):
            raise ValueError(f"{value} does not fit in {width} bits")
        self.acc = (self.acc << width) | value
        self.nbits += width

    def getvalue(self):
        pad = (-self.nbits) % 8
        return (self.acc << pad).to_bytes((self.nbits + pad) // 8, "big")


class BitReader:
    def __init__(self, data):
        self.value = int.from_bytes(data, "big")
        self.total = 8 * len(data)
        self.pos = 0

    def read(self, width):
        if self.pos + width > self.total:
            raise BitstreamError("truncated bit field")
        self.pos += width
        return (self.value >> (self.total - self.pos)) & ((1 << width) - 1)


def write_k(writer, k, w):
    writer.write(int(k) - 1, k_field_width(w))


def read_k(reader, w):
    return reader.read(k_field_width(w)) + 1


# --------------------------------------------------------------------------
# per-cube coding


@dataclass(frozen=True)
class CubePayload:
    k_occupied: int
    y_range: tuple
    y_stream: CodedStream
    z_range: tuple = (0, 0)
    z_stream: CodedStream | None = None

    @property
    def payload_bytes(self):
        z = len(self.z_stream.data) if self.z_stream is not None else 0
        return len(self.y_stream.data) + z


def inference_model(model):
    return model if model.dtype == np.float32 else model.astype(np.float32)


def _z_tables(model, z_shape, lo, hi):
    c = z_shape[0]
    loc = model.params["fz.loc"].astype(np.float64)
    scale = factorized_scale(model.params["fz.logscale"].astype(np.float64))
    n = int(np.prod(z_shape[1:]))
    cache = TableCache(lo, hi)
    return cache.tables(np.repeat(loc, n), np.repeat(scale, n))


def _y_factorized_tables(model, y_shape, lo, hi):
    if not model.has_factorized_latent:
        raise ValueError("model has no factorized latent prior (fy.*)")
    c = y_shape[0]
    n = int(np.prod(y_shape[1:]))
    loc = model.params["fy.loc"].astype(np.float64)
    scale = factorized_scale(model.params["fy.logscale"].astype(np.float64))
    return TableCache(lo, hi).tables(np.repeat(loc, n), np.repeat(scale, n))


def _y_conditional_tables(model, z_hat, y_size, lo, hi):
    mu, sigma = hyper_synthesis(z_hat.astype(model.dtype), model, y_size)
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
        raise FloatingPointError("non-finite hyper-synthesis output")
    return TableCache(lo, hi).tables(mu.astype(np.float64), sigma.astype(np.float64))


def latent_shapes(cfg, w):
    ys = w // cfg.downscale
    from .transforms import hyper_strides

    _, sizes = hyper_strides(ys)
    return (cfg.latent_channels, ys, ys, ys), (cfg.hyper_channels, sizes[-1], sizes[-1], sizes[-1])


@dataclass
class CubeAnalysis:
    """Encoder-side intermediate values of one cube."""

    y_hat: np.ndarray
    z_hat: np.ndarray | None
    payload: CubePayload
    estimated_bits: float


def analyze_cube(cube, model, mode=HYPERPRIOR):
    """Encode one cube; returns the payload with the integer latents."""
    occ = cube.occupancy if isinstance(cube, Cube) else np.asarray(cube, dtype=bool)
    k = int(occ.sum())
    if k < 1:
        raise ValueError("cannot encode an empty cube")
    model = inference_model(model)
    x = occ.astype(np.float32)[None]
    y = analysis(x, model)
    if not np.all(np.isfinite(y)):
        raise FloatingPointError("non-finite analysis output")
    y_hat = quantize_round(y)
    y_lo, y_hi = symbol_range(y_hat)
    z_hat = None
    z_stream = None
    z_range = (0, 0)
    est = 0.0
    if mode == HYPERPRIOR:
        z_hat = quantize_round(hyper_analysis(y, model))
        z_range = symbol_range(z_hat)
        zt = _z_tables(model, z_hat.shape, *z_range)
        z_stream = encode_symbols(z_hat.ravel(), zt)
        est += sum(t.bits(s) for t, s in zip(zt, z_hat.ravel().tolist()))
        yt = _y_conditional_tables(model, z_hat, y_hat.shape[-1], y_lo, y_hi)
    else:
        yt = _y_factorized_tables(model, y_hat.shape, y_lo, y_hi)
    y_stream = encode_symbols(y_hat.ravel(), yt)
    est += sum(t.bits(s) for t, s in zip(yt, y_hat.ravel().tolist()))
    payload = CubePayload(k, (y_lo, y_hi), y_stream, z_range, z_stream)
    return CubeAnalysis(y_hat, z_hat, payload, est)


def encode_cube(cube, model, mode=HYPERPRIOR):
    return analyze_cube(cube, model, mode).payload


def decode_latents(payload, model, w, mode=HYPERPRIOR):
    """Entropy-decode ``(y_hat, z_hat)`` from a payload."""
    model = inference_model(model)
    y_shape, z_shape = latent_shapes(model.config, w)
    z_hat = None
    if mode == HYPERPRIOR:
        if payload.z_stream is None:
            raise BitstreamError("hyperprior payload lacks a z stream")
        zt = _z_tables(model, z_shape, *payload.z_range)
        z_hat = decode_symbols(payload.z_stream, zt).reshape(z_shape)
        yt = _y_conditional_tables(model, z_hat, y_shape[-1], *payload.y_range)
    else:
        yt = _y_factorized_tables(model, y_shape, *payload.y_range)
    y_hat = decode_symbols(payload.y_stream, yt).reshape(y_shape)
    return y_hat, z_hat


def cube_probabilities(y_hat, model):
    model = inference_model(model)
    return sigmoid(synthesis(y_hat.astype(model.dtype), model))[0]


def decode_cube(payload, model, w, mode=HYPERPRIOR, grid_pos=(0, 0, 0)):
    y_hat, _ = decode_latents(payload, model, w, mode)
    p = cube_probabilities(y_hat, model)
    occ = classify_topk(p, payload.k_occupied)
    return Cube(tuple(grid_pos), occ, int(payload.k_occupied))


# --------------------------------------------------------------------------
# container


@dataclass
class Header:
    precision: int
    scale: ScaleConfig
    cube_size: int
    net: NetConfig
    entropy_mode: int
    grid_levels: int
    cube_count: int
    version: int = VERSION

    def to_bytes(self):
        n = self.net
        out = bytearray(MAGIC)
        out += struct.pack("<BBIIHB", self.version, self.precision, self.scale.num,
                           self.scale.den, self.cube_size, profile_id(n))
        out += struct.pack("<B", n.stages)
        out += struct.pack(f"<{n.stages}H", *n.base_channels)
        out += struct.pack("<HHB", n.latent_channels, n.hyper_channels, n.vrn_per_stage)
        out += struct.pack("<BBI", self.entropy_mode, self.grid_levels, self.cube_count)
        return bytes(out)

    @classmethod
    def read(cls, f):
        if _take(f, 4) != MAGIC:
            raise BitstreamError("not a PCGC bitstream (bad magic)")
        version, precision, num, den, w, _pid = struct.unpack("<BBIIHB", _take(f, 13))
        if version != VERSION:
            raise BitstreamError(f"unsupported bitstream version {version} (expected {VERSION})")
        (stages,) = struct.unpack("<B", _take(f, 1))
        base = struct.unpack(f"<{stages}H", _take(f, 2 * stages))
        cy, cz, vrn = struct.unpack("<HHB", _take(f, 5))
        mode, levels, count = struct.unpack("<BBI", _take(f, 6))
        net = NetConfig(tuple(base), cy, cz, vrn, stages)
        return cls(precision, ScaleConfig(num, den), w, net, mode, levels, count, version)


def _take(f, n):
    data = f.read(n)
    if len(data) != n:
        raise BitstreamError("truncated bitstream")
    return data


def _write_varint(out, v):
    while True:
        b = v & 0x7F
        v >>= 7
        out.append(b | (0x80 if v else 0))
        if not v:
            return


def _read_varint(f):
    shift = value = 0
    while True:
        (b,) = _take(f, 1)
        value |= (b & 0x7F) << shift
        if not b & 0x80:
            return value
        shift += 7
        if shift > 35:
            raise BitstreamError("malformed length field")


@dataclass
class Bitstream:
    """Layout (little-endian)::

        header    magic "PCGC", u8 version, u8 precision, u32 scale num,
                  u32 scale den, u16 W, u8 profile id, u8 stages,
                  u16 base channels * stages, u16 C_y, u16 C_z,
                  u8 VRNs per stage, u8 entropy mode, u8 grid levels,
                  u32 cube count
        octree    u32 byte length, breadth-first occupancy bytes
        k fields  cube_count * 3 log2 W bits (k - 1), MSB first, byte padded
        cubes     per cube in Morton order: i16 y_lo, i16 y_hi,
                  [i16 z_lo, i16 z_hi, varint z length,] varint y length,
                  [z bytes,] y bytes   (z parts only in hyperprior mode)
    """

    header: Header
    positions: CubeIndexSet
    payloads: list = field(default_factory=list)

    def _sections(self):
        head = self.header.to_bytes()
        octree = encode_cube_positions(self.positions) if self.header.cube_count else b""
        bw = BitWriter()
        for p in self.payloads:
            write_k(bw, p.k_occupied, self.header.cube_size)
        kbytes = bw.getvalue()
        cubes = []
        for p in self.payloads:
            out = bytearray(struct.pack("<hh", *p.y_range))
            if self.header.entropy_mode == HYPERPRIOR:
                out += struct.pack("<hh", *p.z_range)
                _write_varint(out, len(p.z_stream.data))
            _write_varint(out, len(p.y_stream.data))
            if self.header.entropy_mode == HYPERPRIOR:
                out += p.z_stream.data
            out += p.y_stream.data
            cubes.append(bytes(out))
        return head, struct.pack("<I", len(octree)) + octree, kbytes, cubes

    def to_bytes(self):
        head, octree, kbytes, cubes = self._sections()
        return head + octree + kbytes + b"".join(cubes)

    def accounting(self):
        """Bit counts: header, octree, k fields, per-cube payloads."""
        head, octree, kbytes, cubes = self._sections()
        meta = 8 * (len(head) + len(octree) + len(kbytes))
        per_cube = [8 * len(c) for c in cubes]
        return {
            "header_bits": 8 * len(head),
            "octree_bits": 8 * len(octree),
            "k_bits": 8 * len(kbytes),
            "meta_bits": meta,
            "payload_bits": sum(per_cube),
            "total_bits": meta + sum(per_cube),
            "cube_bits": per_cube,
        }

    @classmethod
    def from_bytes(cls, data):
        f = io.BytesIO(data)
        header = Header.read(f)
        (olen,) = struct.unpack("<I", _take(f, 4))
        octree = _take(f, olen)
        if header.cube_count:
            positions, used = decode_cube_positions(octree, header.grid_levels)
            if used != olen:
                raise BitstreamError("octree section has trailing bytes")
            if len(positions) != header.cube_count:
                raise BitstreamError(f"octree holds {len(positions)} cubes, header says "
                                     f"{header.cube_count}")
        else:
            positions = CubeIndexSet(np.zeros((0, 3), dtype=np.int64), max(1, header.grid_levels))
        width = k_field_width(header.cube_size)
        kbytes = _take(f, (header.cube_count * width + 7) // 8)
        reader = BitReader(kbytes)
        ks = [read_k(reader, header.cube_size) for _ in range(header.cube_count)]
        y_shape, z_shape = latent_shapes(header.net, header.cube_size)
        payloads = []
        for k in ks:
            y_range = struct.unpack("<hh", _take(f, 4))
            z_range, zlen = (0, 0), 0
            if header.entropy_mode == HYPERPRIOR:
                z_range = struct.unpack("<hh", _take(f, 4))
                zlen = _read_varint(f)
            ylen = _read_varint(f)
            z_stream = None
            if header.entropy_mode == HYPERPRIOR:
                z_stream = CodedStream(_take(f, zlen), int(np.prod(z_shape)))
            y_stream = CodedStream(_take(f, ylen), int(np.prod(y_shape)))
            payloads.append(CubePayload(k, tuple(y_range), y_stream, tuple(z_range), z_stream))
        if f.read(1):
            raise BitstreamError("trailing bytes after last cube")
        return cls(header, positions, payloads)


# --------------------------------------------------------------------------
# point-cloud pipeline


def _map(fn, items, threads):
    if threads and threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


def encode_pointcloud(points, model, scale=None, cube_size=64, entropy_mode="hyperprior",
                      rho_metric=None, threads=1):
    """Voxelize, scale, partition and code every cube.

    With ``rho_metric`` ("d1"/"d2") the transmitted k of each cube is
    replaced by the encoder-side fine-tuned ``k_f``.
    """
    scale = scale or ScaleConfig()
    mode = ENTROPY_MODES[entropy_mode] if isinstance(entropy_mode, str) else entropy_mode
    model32 = inference_model(model)
    model32.config.check_cube_size(cube_size)
    vox = scale_points(voxelize(points), scale)
    positions, cubes = partition(vox, cube_size)

    def run(cube):
        res = analyze_cube(cube, model32, mode)
        if rho_metric is None:
            return res.payload
        p = cube_probabilities(res.y_hat, model32)
        _, kf = tune_rho(cube, p, rho_metric)
        pl = res.payload
        return CubePayload(kf, pl.y_range, pl.y_stream, pl.z_range, pl.z_stream)

    payloads = _map(run, cubes, threads)
    header = Header(points.precision, scale, cube_size, model.config, mode,
                    positions.grid_levels, len(cubes))
    return Bitstream(header, positions, payloads)


def decode_voxels(bitstream, model, threads=1):
    """Decoded voxel set before inverse scaling."""
    if isinstance(bitstream, (bytes, bytearray)):
        bitstream = Bitstream.from_bytes(bytes(bitstream))
    h = bitstream.header
    if h.net != model.config:
        raise BitstreamError("bitstream network config does not match the model")
    model32 = inference_model(model)
    pos = bitstream.positions.indices

    def run(i):
        return decode_cube(bitstream.payloads[i], model32, h.cube_size, h.entropy_mode,
                           tuple(int(v) for v in pos[i]))

    cubes = _map(run, list(range(len(bitstream.payloads))), threads)
    return assemble(bitstream.positions, cubes, h.cube_size, h.precision)


def decode_pointcloud(bitstream, model, threads=1):
    """Per-cube decode, assemble, inverse scaling, extraction."""
    if isinstance(bitstream, (bytes, bytearray)):
        bitstream = Bitstream.from_bytes(bytes(bitstream))
    vox = decode_voxels(bitstream, model, threads)
    return extract_scaled(vox, bitstream.header.scale)


def extract_scaled(vox, scale):
    pts = inverse_scale(vox, scale)
    return extract(voxelize(pts))


def bitstream_stats(bitstream, num_input_points):
    acc = bitstream.accounting()
    acc = {k: v for k, v in acc.items() if k != "cube_bits"}
    acc["bpp"] = acc["total_bits"] / max(1, num_input_points)
    acc["cube_count"] = bitstream.header.cube_count
    return acc
