"""Training loop: crop pairs -> relative grid -> noised target -> AdamW.

The run is reproducible from (config, dataset): every random draw comes
from the single ``numpy.random.Generator`` stored in ``TrainState``, in a
fixed order (crops per image, then timesteps, then noise).
"""

import hashlib
import json
import math
import struct
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import config as configlib
from .diffusion import linear_schedule
from .errors import ConfigError, IoFailure, NonFiniteActivation, ShapeMismatch, VersionMismatch
from .imaging import resize_bilinear, resized_crop
from .model import Batch, Denoiser, ModelConfig
from .position import Multiple, mode_to_regions, relative_grid, sample_crop_pair

__all__ = ["TrainConfig", "TrainState", "init_state", "make_batch", "train_step", "train", "resize_bilinear",
           "save_checkpoint", "load_checkpoint", "sharded_loss_and_grad"]

MAGIC = b"POSQCKPT"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    iterations: int = 1000
    batch_size: int = 8
    learning_rate: float = 2e-4
    weight_decay: float = 0.03
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    anchor_scale_range: tuple[float, ...] = (0.15, 0.5)
    target_scale_range: tuple[float, ...] = (0.8, 1.0)
    aspect_range: tuple[float, ...] = (0.75, 4.0 / 3.0)
    crop_mode: str = "continuous"
    discrete_multiples: tuple[float, ...] = (2.25, 5.0, 11.7)
    image_size: int = 64
    patch_size: int = 8
    channels: int = 3
    dim: int = 64
    enc_depth: int = 2
    dec_depth: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    conv_kernel: int = 3
    pe_variant: str = "sincos"
    prediction: str = "noise"
    anchor_pe: bool = True
    cross_residual: bool = True

    def __post_init__(self):
        for name in ("iterations", "batch_size", "T"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate and weight_decay must be >= 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError("adam betas must lie in [0, 1)")
        for name in ("anchor_scale_range", "target_scale_range"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi <= 1):
                raise ConfigError(f"{name} must satisfy 0 < lo <= hi <= 1, got {(lo, hi)}")
        if self.crop_mode not in ("continuous", "discrete"):
            raise ConfigError(f"crop_mode must be continuous or discrete, got {self.crop_mode!r}")
        if self.crop_mode == "discrete" and (not self.discrete_multiples or min(self.discrete_multiples) < 1):
            raise ConfigError("discrete crop mode needs multiples >= 1")
        self.model_config()
        self.schedule()

    def model_config(self):
        names = {f.name for f in fields(ModelConfig)}
        return ModelConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def schedule(self):
        return linear_schedule(self.T, self.beta_start, self.beta_end)

    def to_text(self):
        return configlib.dump(self)

    @classmethod
    def from_text(cls, text):
        return configlib.load(cls, text)


class TrainState:
    """Mutable training state; ``train_step`` updates it in place."""

    def __init__(self, config, params, m, v, step, rng):
        self.config = config
        self.model = Denoiser(config.model_config(), params=np.asarray(params, dtype=np.float32))
        self.m = np.asarray(m, dtype=np.float64)
        self.v = np.asarray(v, dtype=np.float64)
        self.step = int(step)
        self.rng = rng
        self.schedule = config.schedule()

    @property
    def params(self):
        return self.model.params


def init_state(config):
    rng = np.random.default_rng(config.seed)
    model = Denoiser(config.model_config()).init_params(rng)
    n = model.num_params
    return TrainState(config, model.params, np.zeros(n), np.zeros(n), 0, rng)


def view_pair(image, config, rng):
    """Pick (anchor, target) regions for one training image."""
    H, W = image.shape[:2]
    if config.crop_mode == "continuous":
        pair = sample_crop_pair((H, W), config.anchor_scale_range, config.target_scale_range,
                                config.aspect_range, rng)
        return pair.anchor, pair.target
    multiple = config.discrete_multiples[int(rng.integers(len(config.discrete_multiples)))]
    side = min(H, W)
    anchor, target = mode_to_regions(Multiple(multiple, side))
    dy, dx = (H - side) // 2, (W - side) // 2
    return anchor.shifted(dy, dx), target.shifted(dy, dx)


def make_batch(images, config, rng):
    codec = config.model_config().codec
    R, K = config.image_size, codec.k
    z_a, z0, coords = [], [], []
    for img in images:
        anchor, target = view_pair(img, config, rng)
        z_a.append(codec.encode(resized_crop(img, anchor, R, R)))
        z0.append(codec.encode(resized_crop(img, target, R, R)))
        coords.append(relative_grid(anchor, target, K, K).coords())
    B = len(images)
    t = rng.integers(1, config.T + 1, size=B)
    eps = rng.standard_normal((B, codec.length, codec.patch_dim))
    return Batch(np.stack(z_a), np.stack(z0), np.stack(coords), t, eps)


def adamw_update(state, grad):
    cfg = state.config
    state.step += 1
    lr = cfg.learning_rate
    g = grad.astype(np.float64)
    p = state.model.params.astype(np.float64)
    p *= 1.0 - lr * cfg.weight_decay
    state.m = cfg.adam_beta1 * state.m + (1.0 - cfg.adam_beta1) * g
    state.v = cfg.adam_beta2 * state.v + (1.0 - cfg.adam_beta2) * g * g
    mhat = state.m / (1.0 - cfg.adam_beta1 ** state.step)
    vhat = state.v / (1.0 - cfg.adam_beta2 ** state.step)
    p -= lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)
    state.model.params = p.astype(state.model.params.dtype)


def apply_batch(state, batch):
    """Loss/gradient on a prepared batch followed by one optimizer update."""
    try:
        loss, grad = state.model.loss_and_grad(batch, state.schedule)
    except NonFiniteActivation as exc:
        bad = _first_bad_item(state, batch)
        raise NonFiniteActivation(exc.where, iteration=state.step + 1, batch_index=bad) from exc
    if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
        raise NonFiniteActivation("loss/gradient", iteration=state.step + 1, batch_index=_first_bad_item(state, batch))
    adamw_update(state, grad)
    return loss


def _first_bad_item(state, batch):
    for i in range(len(batch.t)):
        item = Batch(*(np.asarray(a)[i:i + 1] for a in batch))
        try:
            loss, grad = state.model.loss_and_grad(item, state.schedule)
        except NonFiniteActivation:
            return i
        if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
            return i
    return None


def train_step(state, batch_images, rng=None):
    rng = state.rng if rng is None else rng
    batch = make_batch(batch_images, state.config, rng)
    return state, apply_batch(state, batch)


def sharded_loss_and_grad(model, batch, sched, shards):
    """Average of per-shard losses/gradients over equal-size batch shards."""
    B = len(batch.t)
    if shards < 1 or B % shards:
        raise ShapeMismatch(f"batch of {B} cannot be split into {shards} equal shards")
    size = B // shards
    losses, grads = [], []
    for s in range(shards):
        part = Batch(*(np.asarray(a)[s * size:(s + 1) * size] for a in batch))
        loss, grad = model.loss_and_grad(part, sched)
        losses.append(loss)
        grads.append(grad.astype(np.float64))
    return float(np.mean(losses)), np.mean(grads, axis=0)


def train(config, dataset, state=None, out_dir=None, checkpoint_every=0, log_every=1, on_step=None):
    """Run (or resume) training to ``config.iterations``.

    Returns ``(state, losses)`` for the iterations executed in this call.
    With ``out_dir`` a ``train.log`` ("iter loss wallclock_ms") is appended
    and ``checkpoint.bin`` is written every ``checkpoint_every`` steps and at
    the end.
    """
    state = init_state(config) if state is None else state
    out_dir = Path(out_dir) if out_dir is not None else None
    log = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log = open(out_dir / "train.log", "a")
    losses = []
    t0 = time.perf_counter()
    try:
        while state.step < config.iterations:
            idx = state.rng.integers(0, len(dataset), size=config.batch_size)
            _, loss = train_step(state, [dataset[int(i)] for i in idx])
            losses.append(loss)
            if log is not None and (state.step % log_every == 0 or state.step == config.iterations):
                log.write(f"{state.step} {loss:.6g} {(time.perf_counter() - t0) * 1000:.1f}\n")
                log.flush()
            if on_step is not None:
                on_step(state, loss)
            if out_dir is not None and checkpoint_every and state.step % checkpoint_every == 0:
                save_checkpoint(state, out_dir / "checkpoint.bin")
        if out_dir is not None:
            save_checkpoint(state, out_dir / "checkpoint.bin")
    finally:
        if log is not None:
            log.close()
    return state, losses


# -- checkpoint format ------------------------------------------------------
#
# MAGIC | u32 version | u32 len + config text | u64 step | u32 len + rng json
# | u64 n | n x <f4 params | n x <f8 m | n x <f8 v | sha256 of all prior bytes

def checkpoint_bytes(state):
    cfg_text = state.config.to_text().encode("utf-8")
    rng_text = json.dumps(state.rng.bit_generator.state, sort_keys=True, separators=(",", ":")).encode("utf-8")
    n = state.model.num_params
    body = b"".join([
        MAGIC,
        struct.pack("<I", FORMAT_VERSION),
        struct.pack("<I", len(cfg_text)), cfg_text,
        struct.pack("<Q", state.step),
        struct.pack("<I", len(rng_text)), rng_text,
        struct.pack("<Q", n),
        state.model.params.astype("<f4").tobytes(),
        state.m.astype("<f8").tobytes(),
        state.v.astype("<f8").tobytes(),
    ])
    return body + hashlib.sha256(body).digest()


def save_checkpoint(state, path):
    path = Path(path)
    data = checkpoint_bytes(state)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(data)
        tmp.replace(path)
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise IoFailure("checkpoint truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]


def load_checkpoint(path, expected_model=None):
    """Read a checkpoint; ``expected_model`` (a ModelConfig) guards against dimension mismatch."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint {path}: {exc}") from exc
    if data[:len(MAGIC)] != MAGIC:
        raise VersionMismatch(f"{path} is not a checkpoint (bad magic)")
    r = _Reader(data)
    r.take(len(MAGIC))
    version = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint format {version}, expected {FORMAT_VERSION}")
    if len(data) < 32 or hashlib.sha256(data[:-32]).digest() != data[-32:]:
        raise IoFailure(f"checkpoint {path} failed its checksum")
    config = TrainConfig.from_text(r.take(r.unpack("<I")).decode("utf-8"))
    step = r.unpack("<Q")
    rng_state = json.loads(r.take(r.unpack("<I")).decode("utf-8"))
    n = r.unpack("<Q")
    params = np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float32)
    m = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64)
    v = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64)
    mc = config.model_config()
    if expected_model is not None and expected_model != mc:
        raise ShapeMismatch(f"checkpoint model {mc} does not match expected {expected_model}")
    layout_size = Denoiser(mc).num_params
    if n != layout_size:
        raise ShapeMismatch(f"checkpoint holds {n} parameters, config implies {layout_size}")
    bitgen = getattr(np.random, rng_state["bit_generator"])()
    bitgen.state = rng_state
    return TrainState(config, params, m, v, step, np.random.Generator(bitgen))
