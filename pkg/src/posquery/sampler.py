"""Outpainting from a trained denoiser.

The anchor image and the positional embedding are fixed once per call; the
only loop is over diffusion timesteps, so the cost of any multiple is the
same as the cost of 1x.
"""

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .diffusion import (check_timesteps, ddim_step_from_x0, ddim_timesteps, ddpm_step_from_x0, eps_to_x0,
                        x0_to_eps)
from .errors import InvalidRange, UntrainedModel
from .imaging import resize_bilinear
from .position import Multiple, anchor_placement, mode_to_regions, relative_grid


@dataclass(frozen=True)
class SampleConfig:
    mode: object = field(default_factory=lambda: Multiple(2.25, 192))
    trajectory: str = "ddim"
    steps: Optional[tuple] = None
    ddim_steps: int = 20
    copy: bool = False
    seed: int = 0
    count: int = 1
    clip_x0: bool = True

    def timesteps(self, T):
        if self.trajectory == "ddpm":
            return list(range(T, -1, -1))
        if self.trajectory != "ddim":
            raise InvalidRange(f"trajectory must be ddpm or ddim, got {self.trajectory!r}")
        if self.steps is not None:
            return check_timesteps(self.steps, T)
        return ddim_timesteps(T, self.ddim_steps)


@dataclass
class OutpaintResult:
    images: np.ndarray
    placement: object
    scales: tuple
    timing_ms: float
    denoise_calls: int
    clamp_rate: float
    anchor: object = None
    target: object = None

    @property
    def image(self):
        return self.images[0]


def copy_paste(generated, input_image, placement, scales):
    """Hard-paste the input, resized by ``scales``, at ``placement``; clipped to the frame."""
    out = np.array(generated, copy=True)
    H, W = out.shape[:2]
    ih, iw = input_image.shape[:2]
    rh = max(1, int(round(ih * scales[0])))
    rw = max(1, int(round(iw * scales[1])))
    y0, y1 = max(placement.top, 0), min(placement.top + rh, H)
    x0, x1 = max(placement.left, 0), min(placement.left + rw, W)
    if y0 >= y1 or x0 >= x1:
        return out
    patch = resize_bilinear(input_image, rh, rw)
    out[y0:y1, x0:x1] = patch[y0 - placement.top:y1 - placement.top, x0 - placement.left:x1 - placement.left]
    return out


def _predict(model, y, z_a, E, t, sched, clip):
    out = model.denoise_embedded(y, z_a, E, t)
    out = out.astype(np.float64)
    if model.cfg.prediction == "noise":
        eps_hat = out
        z0_hat = eps_to_x0(y, eps_hat, t, sched)
    else:
        z0_hat = out
        eps_hat = None
    if clip:
        clipped = np.clip(z0_hat, -1.0, 1.0)
        if eps_hat is None or not np.array_equal(clipped, z0_hat):
            eps_hat = x0_to_eps(y, clipped, t, sched)
        z0_hat = clipped
    elif eps_hat is None:
        eps_hat = x0_to_eps(y, z0_hat, t, sched)
    return z0_hat, eps_hat


def run_trajectory(model, sched, z_a, E, y, timesteps, rng, trajectory, clip=True):
    """Denoise latent ``y`` (B, L, C) along ``timesteps`` (``[T, ..., 0]``)."""
    for t, t_prev in zip(timesteps[:-1], timesteps[1:]):
        z0_hat, eps_hat = _predict(model, y, z_a, E, t, sched, clip)
        if trajectory == "ddpm":
            if t_prev != t - 1:
                raise InvalidRange("ddpm trajectories take unit steps")
            y = ddpm_step_from_x0(y, z0_hat, t, sched, rng)
        else:
            y = ddim_step_from_x0(z0_hat, eps_hat, t_prev, sched)
    return y


def outpaint(model, sched, input_image, cfg, rng=None):
    """Generate the target view of ``cfg.mode`` around ``input_image``.

    The output frame has the target region's size; the anchor placement
    and its scale relative to ``input_image`` are reported for copy/eval.
    """
    if not model.initialized:
        raise UntrainedModel("sampling needs trained (or at least initialized) parameters")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    start = time.perf_counter()
    calls0 = model.calls
    codec = model.codec
    R, K = codec.image_side, codec.k
    anchor, target = mode_to_regions(cfg.mode)
    grid = relative_grid(anchor, target, K, K)

    z_a = codec.encode(resize_bilinear(np.asarray(input_image, dtype=np.float64), R, R))
    E, _ = model.embed(grid.coords())
    B = cfg.count
    z_a = np.broadcast_to(z_a, (B,) + z_a.shape)
    E = np.broadcast_to(E, (B,) + E.shape)

    y = rng.standard_normal((B, codec.length, codec.patch_dim))
    y = run_trajectory(model, sched, z_a, E, y, cfg.timesteps(sched.T), rng, cfg.trajectory, cfg.clip_x0)

    raw = codec.decode(y)
    clamp_rate = float(np.mean(np.abs(raw) > 1.0))
    raw = np.clip(raw, -1.0, 1.0)
    out_h, out_w = target.height, target.width
    images = np.stack([resize_bilinear(im, out_h, out_w) for im in raw])

    placement = anchor_placement(grid, out_h, out_w)
    ih, iw = np.shape(input_image)[:2]
    scales = (placement.height / ih, placement.width / iw)
    if cfg.copy:
        images = np.stack([copy_paste(im, np.asarray(input_image, dtype=np.float64), placement, scales)
                           for im in images])
    return OutpaintResult(images=images, placement=placement, scales=scales,
                          timing_ms=(time.perf_counter() - start) * 1000.0,
                          denoise_calls=model.calls - calls0, clamp_rate=clamp_rate,
                          anchor=anchor, target=target)


def center_crop_for(image, multiple, output_side):
    """Ground-truth frame -> (resized frame, centered input sub-image) for a multiple."""
    frame = resize_bilinear(image, output_side, output_side)
    anchor, _ = mode_to_regions(Multiple(multiple, output_side))
    return frame, frame[anchor.top:anchor.bottom, anchor.left:anchor.right]


@dataclass
class BenchRow:
    multiple: float
    median_ms: float
    p10_ms: float
    p90_ms: float
    denoise_calls: int


def bench_sampling(model, sched, image, multiples, cfg, repeats=5, output_side=192):
    """Median sampling wall-clock per multiple at a fixed output resolution.

    Repeats are interleaved across multiples so slow drift in machine load
    does not bias one multiple against another.
    """
    jobs = []
    for mult in multiples:
        _, sub = center_crop_for(image, mult, output_side)
        run_cfg = SampleConfig(mode=Multiple(mult, output_side), trajectory=cfg.trajectory, steps=cfg.steps,
                               ddim_steps=cfg.ddim_steps, copy=cfg.copy, seed=cfg.seed, count=cfg.count,
                               clip_x0=cfg.clip_x0)
        jobs.append((sub, run_cfg))
    times = [[] for _ in jobs]
    calls = [set() for _ in jobs]
    for _ in range(repeats):
        for j, (sub, run_cfg) in enumerate(jobs):
            res = outpaint(model, sched, sub, run_cfg)
            times[j].append(res.timing_ms)
            calls[j].add(res.denoise_calls)
    rows = []
    for mult, ts, cs in zip(multiples, times, calls):
        (n_calls,) = cs
        rows.append(BenchRow(float(mult), float(np.median(ts)), float(np.percentile(ts, 10)),
                             float(np.percentile(ts, 90)), n_calls))
    return rows


def format_bench(rows):
    lines = ["multiple median_ms p10_ms p90_ms denoise_calls"]
    lines += [f"{r.multiple:g} {r.median_ms:.3f} {r.p10_ms:.3f} {r.p90_ms:.3f} {r.denoise_calls}" for r in rows]
    return "\n".join(lines) + "\n"
