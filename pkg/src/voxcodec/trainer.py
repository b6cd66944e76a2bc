"""Rate-distortion training on synthetic voxel shells."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.transform import Rotation

from .autodiff import AdamState, Tape, adam_step, sigmoid
from .entropy import channel_prior, quantize_round, rate_op
from .transforms import (
    PROFILES,
    ModelParameters,
    NetConfig,
    build_analysis,
    build_hyper_analysis,
    build_hyper_synthesis,
    build_synthesis,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lam: float = 16.0
    alpha: float = 3.0
    lr: float = 1e-5
    batch: int = 8
    steps: int = 1000
    seed: int = 0
    cube_size: int = 16
    net: NetConfig = field(default_factory=lambda: PROFILES["desk"])
    eval_every: int = 0
    augment: bool = False
    lr_end: float | None = None

    def __post_init__(self):
        if isinstance(self.net, str):
            self.net = PROFILES[self.net]
        elif isinstance(self.net, dict):
            self.net = NetConfig(**self.net)
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        self.net.check_cube_size(self.cube_size)


@dataclass(frozen=True, eq=False)
class TrainSample:
    occupancy: np.ndarray  # (W, W, W) bool

    @property
    def n_occupied(self):
        return int(self.occupancy.sum())

    @property
    def n_null(self):
        return int(self.occupancy.size - self.n_occupied)


# --------------------------------------------------------------------------
# distortion


def _softplus(x):
    return np.logaddexp(0.0, x)


def wbce(logits, occupancy, alpha=3.0):
    """Weighted BCE of one cube: class-mean -ln p over occupied voxels plus
    ``alpha`` times class-mean -ln(1 - p) over null voxels."""
    logits = np.asarray(logits, dtype=np.float64)
    occ = np.asarray(occupancy, dtype=bool).reshape(logits.shape)
    n_o = occ.sum()
    if n_o == 0:
        raise ValueError("WBCE needs at least one occupied voxel")
    d = _softplus(-logits[occ]).sum() / n_o
    n_n = occ.size - n_o
    if n_n:
        d += alpha * _softplus(logits[~occ]).sum() / n_n
    return float(d)


def wbce_op(tape, logits, occupancy, alpha):
    """Mean WBCE over a batch; ``occupancy`` matches ``logits`` (N, 1, W, W, W)."""
    lv = logits.value
    occ = occupancy.astype(bool).reshape(lv.shape)
    n = lv.shape[0]
    axes = tuple(range(1, lv.ndim))
    n_o = occ.sum(axis=axes).astype(np.float64)
    n_n = occ[0].size - n_o
    if np.any(n_o == 0):
        raise ValueError("WBCE needs at least one occupied voxel per cube")
    shape = (n,) + (1,) * (lv.ndim - 1)
    w_o = (1.0 / n_o).reshape(shape)
    w_n = np.where(n_n > 0, alpha / np.maximum(n_n, 1), 0.0).reshape(shape)
    per = np.where(occ, w_o * _softplus(-lv), w_n * _softplus(lv))
    value = np.asarray(per.sum() / n)
    p = sigmoid(lv)

    def back(g):
        return (g / n * np.where(occ, w_o * (p - 1.0), w_n * p),)

    return tape.op(value, (logits,), back)


def _combine(tape, parts, coeffs):
    value = np.asarray(sum(c * float(p.value) for p, c in zip(parts, coeffs)))
    return tape.op(value, tuple(parts), lambda g: tuple(np.asarray(g * c) for c in coeffs))


# --------------------------------------------------------------------------
# loss


def _batch_array(batch, dtype):
    if isinstance(batch, np.ndarray):
        x = batch
    else:
        x = np.stack([s.occupancy if isinstance(s, TrainSample) else s for s in batch])
    x = np.asarray(x, dtype=dtype)
    if x.ndim == 4:
        x = x[:, None]
    return x


def rd_loss(batch, model, lam, rng, alpha=3.0, grad=True, noise=True):
    """``J = (R_y + R_z) / N_occupied + lam * mean_cube(WBCE)``.

    The rate term is bits per occupied voxel over the batch; ``R_y`` and
    ``R_z`` in the returned components are bits per cube.

    Uniform noise replaces rounding when ``noise`` is set.  Returns ``(J,
    components, grads)``; ``grads`` is None unless requested.
    """
    cfg = model.config
    x = _batch_array(batch, model.dtype)
    tape = Tape(model.params, record=grad)
    y = build_analysis(tape, tape.constant(x), cfg)
    z = build_hyper_analysis(tape, y, cfg)
    if noise:
        z_t = tape.add_noise(z, rng.uniform(-0.5, 0.5, z.value.shape))
        y_t = tape.add_noise(y, rng.uniform(-0.5, 0.5, y.value.shape))
    else:
        z_t = tape.op(quantize_round(z.value).astype(z.value.dtype), (z,), lambda g: (g,))
        y_t = tape.op(quantize_round(y.value).astype(y.value.dtype), (y,), lambda g: (g,))
    mu, sigma = build_hyper_synthesis(tape, z_t, cfg, y.value.shape[-1])
    r_y = rate_op(tape, y_t, mu, sigma)
    loc, scale = channel_prior(tape, "fz")
    r_z = rate_op(tape, z_t, loc, scale)
    logits = build_synthesis(tape, y_t, cfg)
    d = wbce_op(tape, logits, x, alpha)
    n = x.shape[0]
    n_occ = float(x.sum())
    j = _combine(tape, (r_y, r_z, d), (1.0 / n_occ, 1.0 / n_occ, lam))
    comps = {"R_y": float(r_y.value) / n, "R_z": float(r_z.value) / n,
             "bpov": (float(r_y.value) + float(r_z.value)) / n_occ,
             "D": float(d.value), "J": float(j.value)}
    if not np.isfinite(comps["J"]):
        raise FloatingPointError(f"non-finite loss {comps}")
    grads = tape.backward(j) if grad else None
    return comps["J"], comps, grads


# --------------------------------------------------------------------------
# training loop


def train(config, dataset, init=None, heldout=None, curve_path=None, callback=None):
    """Adam on ``rd_loss``; returns ``(model, history)``.

    ``init`` (a :class:`ModelParameters`) is copied, never modified.
    Training runs in 64-bit; the returned model has the dtype of ``init``
    (64-bit without one).  History rows hold ``step, R_y, R_z, D, J`` of
    the minibatch at that step.
    """
    rng = np.random.default_rng(config.seed)
    if init is None:
        model = ModelParameters.initialize(config.net, seed=config.seed)
    else:
        if init.config != config.net:
            raise ValueError("initial checkpoint does not match the network config")
        model = init.astype(np.float64)
    trainable = {k: v for k, v in model.params.items() if not k.startswith("fy.")}
    state = AdamState(trainable)
    data = np.stack([s.occupancy for s in dataset]).astype(np.float64)[:, None]
    if len(data) == 0 and config.steps:
        raise ValueError("empty training set")
    history = []
    order = rng.permutation(len(data)) if len(data) else np.zeros(0, dtype=int)
    cursor = 0
    for step in range(config.steps):
        if cursor + config.batch > len(order):
            order = rng.permutation(len(data))
            cursor = 0
        idx = order[cursor:cursor + config.batch]
        cursor += config.batch
        batch = augment_batch(data[idx], rng) if config.augment else data[idx]
        try:
            _, comps, grads = rd_loss(batch, model, config.lam, rng, config.alpha)
            grads = {k: grads.get(k, np.zeros_like(v)) for k, v in trainable.items()}
            adam_step(trainable, grads, state, learning_rate(config, step))
        except FloatingPointError as exc:
            raise FloatingPointError(f"training diverged at step {step}: {exc}") from exc
        history.append({"step": step, **comps})
        if config.eval_every and heldout is not None and (step + 1) % config.eval_every == 0:
            ev = evaluate_loss(model, heldout, config.lam, config.alpha)
            log.info("step %d  J=%.3f  heldout J=%.3f", step + 1, comps["J"], ev["J"])
            if callback:
                callback(step + 1, ev)
    if curve_path is not None:
        write_curve(curve_path, history)
    if init is not None:
        model = model.astype(init.dtype)
    return model, history


def learning_rate(config, step):
    """Constant ``lr``, or a cosine decay from ``lr`` to ``lr_end`` over the
    run when ``lr_end`` is set."""
    if config.lr_end is None or config.steps <= 1:
        return config.lr
    t = step / (config.steps - 1)
    return config.lr_end + 0.5 * (config.lr - config.lr_end) * (1 + math.cos(math.pi * t))


def augment_batch(batch, rng):
    """Apply one random axis permutation and per-axis flips to a batch of
    (N, 1, W, W, W) occupancy grids."""
    perm = rng.permutation(3)
    out = np.transpose(batch, (0, 1, *(2 + perm)))
    flips = tuple(2 + a for a in range(3) if rng.random() < 0.5)
    if flips:
        out = np.flip(out, axis=flips)
    return np.ascontiguousarray(out)


def evaluate_loss(model, samples, lam, alpha=3.0, batch=16):
    """Loss with hard rounding (no noise) averaged over ``samples``."""
    data = _batch_array(samples, model.dtype)
    tot = {"R_y": 0.0, "R_z": 0.0, "bpov": 0.0, "D": 0.0, "J": 0.0}
    for a in range(0, len(data), batch):
        part = data[a:a + batch]
        _, comps, _ = rd_loss(part, model, lam, None, alpha, grad=False, noise=False)
        for k in tot:
            tot[k] += comps[k] * len(part)
    return {k: v / len(data) for k, v in tot.items()}


def write_curve(path, history):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["step", "R_y", "R_z", "D", "J"])
        w.writeheader()
        for row in history:
            w.writerow({k: row[k] for k in w.fieldnames})


def train_ladder(base_config, dataset, lambdas=(16.0, 4.0, 0.75), init=None, heldout=None):
    """Train at the first lambda, then initialize each lower-rate model from
    the previous one."""
    models, histories = {}, {}
    prev = init
    for lam in lambdas:
        cfg = replace(base_config, lam=lam)
        prev, hist = train(cfg, dataset, init=prev, heldout=heldout)
        models[lam], histories[lam] = prev, hist
    return models, histories


def fit_factorized_latent(model, samples, steps=400, lr=0.05):
    """Fit a per-channel Laplace prior to the rounded latents of ``samples``.

    Used for the factorized-only ablation of latent coding; the result is
    stored as ``fy.loc`` / ``fy.logscale`` in a copy of ``model``.
    """
    from .transforms import analysis

    y_hat = quantize_round(analysis(_batch_array(samples, model.dtype), model)).astype(np.float64)
    c = y_hat.shape[1]
    flat = np.moveaxis(y_hat, 1, 0).reshape(c, -1)
    med = np.median(flat, axis=1)
    params = {"fy.loc": med,
              "fy.logscale": np.log(np.clip(np.mean(np.abs(flat - med[:, None]), axis=1), 0.05, 60))}
    state = AdamState(params)
    for _ in range(steps):
        tape = Tape(params)
        loc, scale = channel_prior(tape, "fy")
        bits = rate_op(tape, tape.constant(y_hat), loc, scale)
        grads = tape.backward(bits)
        adam_step(params, grads, state, lr)
    out = model.copy()
    out.params.update({k: v.astype(model.dtype) for k, v in params.items()})
    return out


# --------------------------------------------------------------------------
# synthetic corpus


def _sdf_sphere(q, r):
    return np.linalg.norm(q, axis=-1) - r


def _sdf_box(q, half):
    a = np.abs(q) - half
    outside = np.linalg.norm(np.maximum(a, 0), axis=-1)
    inside = np.minimum(a.max(axis=-1), 0)
    return outside + inside


def _sdf_cylinder(q, r, h):
    d = np.stack([np.hypot(q[..., 0], q[..., 1]) - r, np.abs(q[..., 2]) - h], axis=-1)
    return np.minimum(d.max(axis=-1), 0) + np.linalg.norm(np.maximum(d, 0), axis=-1)


def _superquadric_g(q, abc, e1, e2):
    x, y, z = (np.abs(q[..., i]) / abc[i] + 1e-12 for i in range(3))
    f = (x ** (2 / e2) + y ** (2 / e2)) ** (e2 / e1) + z ** (2 / e1)
    return f ** (e1 / 2) - 1.0


def _shell(grid, dist):
    return np.abs(dist(grid)) <= 0.5


def voxel_grid(w):
    ax = np.arange(w, dtype=np.float64)
    return np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1)


def rasterize_sphere(w, center, r):
    """One-voxel-thick spherical shell in a W^3 grid."""
    g = voxel_grid(w)
    return _shell(g - np.asarray(center, dtype=np.float64), lambda q: _sdf_sphere(q, r))


def random_shape_shell(rng, grid, size_range):
    """Shell of one randomly posed primitive evaluated at ``grid`` points."""
    kind = rng.integers(4)
    lo, hi = size_range
    w = grid.shape[0]
    center = rng.uniform(0.15 * w, 0.85 * w, size=3)
    rot = Rotation.random(random_state=rng).as_matrix()
    q = (grid - center) @ rot
    if kind == 0:
        d = _sdf_sphere(q, rng.uniform(lo, hi))
    elif kind == 1:
        d = _sdf_box(q, rng.uniform(lo * 0.6, hi * 0.8, size=3))
    elif kind == 2:
        d = _sdf_cylinder(q, rng.uniform(lo * 0.5, hi * 0.7), rng.uniform(lo * 0.6, hi))
    else:
        abc = rng.uniform(lo * 0.6, hi, size=3)
        e1, e2 = rng.uniform(0.4, 1.6, size=2)
        gq = _superquadric_g(q, abc, e1, e2)
        grad = np.stack(np.gradient(gq), axis=-1)
        d = gq / np.maximum(np.linalg.norm(grad, axis=-1), 1e-6)
    return np.abs(d) <= 0.5


def gen_synthetic_dataset(seed, count, w):
    """``count`` cubes with shells of 1-2 random spheres, boxes, cylinders
    or superquadrics; deterministic per seed."""
    rng = np.random.default_rng(seed)
    grid = voxel_grid(w)
    samples = []
    while len(samples) < count:
        occ = np.zeros((w, w, w), dtype=bool)
        for _ in range(1 + int(rng.random() < 0.3)):
            occ |= random_shape_shell(rng, grid, (0.2 * w, 0.6 * w))
        if occ.any():
            samples.append(TrainSample(occ))
    return samples


def gen_synthetic_cloud(seed, extent=128, shapes=3, precision=None):
    """A voxelized point cloud of several primitive shells inside an
    ``extent``^3 box."""
    from .pointcloud_io import PointSet

    rng = np.random.default_rng(seed)
    grid = voxel_grid(extent)
    occ = np.zeros((extent,) * 3, dtype=bool)
    for _ in range(shapes):
        occ |= random_shape_shell(rng, grid, (0.12 * extent, 0.3 * extent))
    if precision is None:
        precision = max(1, int(extent - 1).bit_length())
    return PointSet(np.argwhere(occ), precision)


def save_dataset(path, samples):
    np.savez_compressed(path, occupancy=np.stack([s.occupancy for s in samples]))


def load_dataset(path):
    with np.load(path) as f:
        return [TrainSample(o.astype(bool)) for o in f["occupancy"]]
