"""Crop-pair geometry and relative positional embeddings.

Coordinates follow the (top, left, height, width) convention throughout.
A relative grid expresses every target patch's top-left corner in units of
anchor patches, so an anchor compared with itself yields the integer
lattice ``0..K-1`` on both axes.
"""

import math
from dataclasses import dataclass
from typing import NamedTuple, Union

import numpy as np

from .errors import DegenerateAnchor, InvalidDimension, InvalidRange, MissingParams, UnsatisfiableCrop
from .nn import gelu

DEFAULT_ASPECT = (3.0 / 4.0, 4.0 / 3.0)
MAX_CROP_ATTEMPTS = 10


@dataclass(frozen=True)
class CropRegion:
    """Integer pixel rectangle.

    ``top``/``left`` may be negative for sampling-time placements that fall
    outside an output frame; training crops are always inside their image.
    """

    top: int
    left: int
    height: int
    width: int

    def __post_init__(self):
        for name in ("top", "left", "height", "width"):
            if int(getattr(self, name)) != getattr(self, name):
                raise InvalidRange(f"CropRegion.{name} must be an integer")
            object.__setattr__(self, name, int(getattr(self, name)))
        if self.height < 1 or self.width < 1:
            raise InvalidRange(f"CropRegion needs height, width >= 1, got {self.height}x{self.width}")

    @property
    def bottom(self):
        return self.top + self.height

    @property
    def right(self):
        return self.left + self.width

    def as_tuple(self):
        return (self.top, self.left, self.height, self.width)

    def fits(self, height, width):
        return self.top >= 0 and self.left >= 0 and self.bottom <= height and self.right <= width

    def shifted(self, dtop, dleft):
        return CropRegion(self.top + dtop, self.left + dleft, self.height, self.width)

    @classmethod
    def parse(cls, text):
        parts = [p.strip() for p in str(text).split(",")]
        if len(parts) != 4:
            raise InvalidRange(f"expected 'top,left,height,width', got {text!r}")
        return cls(*(int(p) for p in parts))

    def __str__(self):
        return ",".join(str(v) for v in self.as_tuple())


@dataclass(frozen=True)
class RelativeGrid:
    """Per-patch anchor-unit coordinates of a target view.

    ``rows[m] = h_bias + m * h_scale`` and likewise for ``cols``.
    """

    h_bias: float
    w_bias: float
    h_scale: float
    w_scale: float
    k_anchor: int
    k_target: int

    @property
    def rows(self):
        return self.h_bias + np.arange(self.k_target, dtype=np.float64) * self.h_scale

    @property
    def cols(self):
        return self.w_bias + np.arange(self.k_target, dtype=np.float64) * self.w_scale

    def coords(self):
        """(L, 2) array of (row, col) pairs in row-major patch order."""
        r, c = np.meshgrid(self.rows, self.cols, indexing="ij")
        return np.stack([r.ravel(), c.ravel()], axis=-1)


class CropPair(NamedTuple):
    anchor: CropRegion
    target: CropRegion
    fallbacks: int


@dataclass(frozen=True)
class Multiple:
    """Centered outpainting: output area is ``n`` times the input area."""

    n: float
    output_side: int


@dataclass(frozen=True)
class Explicit:
    anchor: CropRegion
    target: CropRegion


OutpaintMode = Union[Multiple, Explicit]


def _check_range(name, rng_pair, upper=None):
    lo, hi = rng_pair
    if not (lo > 0 and lo <= hi) or (upper is not None and hi > upper):
        raise InvalidRange(f"{name} must satisfy 0 < lo <= hi{' <= %s' % upper if upper else ''}, got {rng_pair}")


def sample_crop(image_size, scale, aspect, rng, strict=False):
    """Draw one random-resized-crop rectangle.

    Returns ``(region, fell_back)``. After ``MAX_CROP_ATTEMPTS`` rejected
    draws the center crop at the lower scale bound is returned, or
    ``UnsatisfiableCrop`` is raised when ``strict``.
    """
    H, W = image_size
    _check_range("scale", scale, upper=1.0)
    _check_range("aspect", aspect)
    area = H * W
    log_lo, log_hi = math.log(aspect[0]), math.log(aspect[1])
    for _ in range(MAX_CROP_ATTEMPTS):
        target_area = area * rng.uniform(scale[0], scale[1])
        ratio = math.exp(rng.uniform(log_lo, log_hi))
        w = int(round(math.sqrt(target_area * ratio)))
        h = int(round(math.sqrt(target_area / ratio)))
        if not (0 < w <= W and 0 < h <= H):
            continue
        # rounding can push a draw just outside the requested ranges
        frac = h * w / area
        if not (scale[0] - 1e-12 <= frac <= scale[1] + 1e-12):
            continue
        if not (aspect[0] - 1e-12 <= w / h <= aspect[1] + 1e-12):
            continue
        top = int(rng.integers(0, H - h + 1))
        left = int(rng.integers(0, W - w + 1))
        return CropRegion(top, left, h, w), False
    if strict:
        raise UnsatisfiableCrop(
            f"no crop of scale {scale} and aspect {aspect} found in {MAX_CROP_ATTEMPTS} attempts on {H}x{W}"
        )
    side = math.sqrt(scale[0] * area)
    h = min(H, max(1, int(math.ceil(side))))
    w = min(W, max(1, int(math.ceil(scale[0] * area / h))))
    return CropRegion((H - h) // 2, (W - w) // 2, h, w), True


def sample_crop_pair(image_size, anchor_scale_range, target_scale_range, aspect_range=DEFAULT_ASPECT, rng=None,
                     strict=False):
    """Two independent random crops of one image: the anchor then the target."""
    if rng is None:
        raise ValueError("an explicit numpy Generator is required")
    anchor, fa = sample_crop(image_size, anchor_scale_range, aspect_range, rng, strict)
    target, ft = sample_crop(image_size, target_scale_range, aspect_range, rng, strict)
    return CropPair(anchor, target, int(fa) + int(ft))


def relative_grid(anchor, target, k_anchor, k_target):
    if k_anchor < 1 or k_target < 1:
        raise InvalidRange("patch counts must be >= 1")
    h_bias = k_anchor * (target.top - anchor.top) / anchor.height
    w_bias = k_anchor * (target.left - anchor.left) / anchor.width
    h_scale = target.height * k_anchor / (k_target * anchor.height)
    w_scale = target.width * k_anchor / (k_target * anchor.width)
    return RelativeGrid(h_bias, w_bias, h_scale, w_scale, int(k_anchor), int(k_target))


def sincos_1d(values, dim, base=10000.0):
    """Banked sin/cos embedding of scalars: ``[sin(v*w_k)..., cos(v*w_k)...]``.

    ``w_k = base**(-2k/dim)`` for ``k < dim/2``. Output shape is
    ``values.shape + (dim,)``.
    """
    if dim % 2:
        raise InvalidDimension(f"1-D sin-cos dimension must be even, got {dim}")
    half = dim // 2
    omega = 1.0 / base ** (np.arange(half, dtype=np.float64) * 2.0 / dim)
    arg = np.asarray(values, dtype=np.float64)[..., None] * omega
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


def sincos_2d(coords, dim, base=10000.0):
    """Embed (..., 2) (row, col) coordinates; row-axis half comes first."""
    if dim % 4:
        raise InvalidDimension(f"embedding dimension must be divisible by 4, got {dim}")
    coords = np.asarray(coords, dtype=np.float64)
    return np.concatenate([sincos_1d(coords[..., 0], dim // 2, base), sincos_1d(coords[..., 1], dim // 2, base)],
                          axis=-1)


def sincos_embed(grid, dim, base=10000.0):
    return sincos_2d(grid.coords(), dim, base)


def lattice_grid(k):
    """Relative grid of a view against itself."""
    region = CropRegion(0, 0, k, k)
    return relative_grid(region, region, k, k)


def learnable_embed(coords, params):
    """Two affine maps with a GELU between, 2 -> hidden -> D."""
    h = gelu(coords @ params["pe_w1"] + params["pe_b1"])
    return h @ params["pe_w2"] + params["pe_b2"]


def embed_variant(grid, variant, dim, params=None, base=10000.0):
    coords = grid.coords()
    if variant == "sincos":
        return sincos_embed(grid, dim, base)
    if variant == "none":
        if dim % 4:
            raise InvalidDimension(f"embedding dimension must be divisible by 4, got {dim}")
        return np.zeros((coords.shape[0], dim))
    if variant == "learnable":
        if params is None:
            raise MissingParams("learnable positional embedding needs pe_w1/pe_b1/pe_w2/pe_b2")
        return learnable_embed(coords, params)
    raise InvalidRange(f"unknown embedding variant {variant!r}")


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def mode_to_regions(mode):
    """Resolve an outpainting mode into (anchor, target) in the target's frame."""
    if isinstance(mode, Explicit):
        return mode.anchor, mode.target
    if not isinstance(mode, Multiple):
        raise InvalidRange(f"unknown outpainting mode {mode!r}")
    if mode.n < 1 or mode.output_side < 2:
        raise InvalidRange(f"Multiple needs n >= 1 and output_side >= 2, got {mode}")
    S = int(mode.output_side)
    s = _round_half_up(S / math.sqrt(mode.n))
    if s < 1:
        raise DegenerateAnchor(f"anchor side rounds to {s} for multiple {mode.n} at output {S}")
    off = (S - s) // 2
    return CropRegion(off, off, s, s), CropRegion(0, 0, S, S)


def anchor_placement(grid, out_height, out_width):
    """Map the anchor back into a target frame of ``out_height x out_width``.

    Inverse of the relative transform: the anchor spans ``k_anchor`` anchor
    units starting at ``-bias``, and one target patch covers ``scale`` anchor
    units.
    """
    px_h = out_height / grid.k_target / grid.h_scale
    px_w = out_width / grid.k_target / grid.w_scale
    top = -grid.h_bias * px_h
    left = -grid.w_bias * px_w
    return CropRegion(_round_half_up(top), _round_half_up(left),
                      max(1, _round_half_up(grid.k_anchor * px_h)), max(1, _round_half_up(grid.k_anchor * px_w)))


def format_rpe_dump(grid, embedding):
    """Structured text: header, rows, cols, then the L x D matrix (9 significant digits)."""
    L, D = embedding.shape
    fmt = lambda v: f"{v:.9g}"
    lines = [f"k_anchor={grid.k_anchor} k_target={grid.k_target} dim={D}",
             "rows " + " ".join(fmt(v) for v in grid.rows),
             "cols " + " ".join(fmt(v) for v in grid.cols)]
    lines += [" ".join(fmt(v) for v in row) for row in embedding]
    return "\n".join(lines) + "\n"


def parse_rpe_dump(text):
    lines = text.strip().splitlines()
    head = dict(kv.split("=") for kv in lines[0].split())
    rows = np.array([float(v) for v in lines[1].split()[1:]])
    cols = np.array([float(v) for v in lines[2].split()[1:]])
    emb = np.array([[float(v) for v in ln.split()] for ln in lines[3:]])
    return {k: int(v) for k, v in head.items()}, rows, cols, emb
