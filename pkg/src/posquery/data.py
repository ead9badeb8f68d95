"""Image datasets: a folder of rasters or a seeded synthetic generator.

Items are float64 arrays of shape (R, R, 3) in [-1, 1].
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DecodeFailure, EmptyFolder, InvalidSize
from .imaging import resize_bilinear, to_uint8, to_unit

SUPPORTED_SUFFIXES = (".png", ".ppm", ".pnm", ".jpg", ".jpeg", ".bmp")


@dataclass(frozen=True)
class SynthSpec:
    """Knobs for the synthetic scenes.

    ``gradient`` scales the two position-revealing ramps (channel 0 runs
    top to bottom, channel 1 left to right).
    """

    gradient: float = 0.6
    min_shapes: int = 2
    max_shapes: int = 5
    shape_amplitude: float = 0.35
    noise_amplitude: float = 0.05
    noise_cells: int = 8


def gradient_field(resolution):
    """The (R, R, 2) ramp pair in [-1, 1]: row ramp, column ramp."""
    ramp = np.linspace(-1.0, 1.0, resolution)
    rows = np.broadcast_to(ramp[:, None], (resolution, resolution))
    cols = np.broadcast_to(ramp[None, :], (resolution, resolution))
    return np.stack([rows, cols], axis=-1)


def synth_image(spec, index, seed, resolution):
    if resolution < 16:
        raise InvalidSize(f"synthetic images need resolution >= 16, got {resolution}")
    rng = np.random.default_rng([int(seed), int(index)])
    R = resolution
    ramps = gradient_field(R)
    img = np.empty((R, R, 3))
    img[..., 0] = spec.gradient * ramps[..., 0]
    img[..., 1] = spec.gradient * ramps[..., 1]
    img[..., 2] = 0.5 * spec.gradient * (ramps[..., 0] - ramps[..., 1])

    yy, xx = np.mgrid[0:R, 0:R] + 0.5
    for _ in range(int(rng.integers(spec.min_shapes, spec.max_shapes + 1))):
        color = rng.uniform(-spec.shape_amplitude, spec.shape_amplitude, 3)
        cy, cx = rng.uniform(0, R, 2)
        if rng.random() < 0.5:
            hh, hw = rng.uniform(0.05 * R, 0.2 * R, 2)
            mask = (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= hw)
        else:
            r = rng.uniform(0.05 * R, 0.18 * R)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        img[mask] += color

    cells = rng.uniform(-1.0, 1.0, (spec.noise_cells, spec.noise_cells, 3))
    img += spec.noise_amplitude * resize_bilinear(cells, R, R)
    return np.clip(img, -1.0, 1.0)


class SyntheticDataset:
    def __init__(self, count, seed, resolution, spec=None):
        self.count = int(count)
        self.seed = int(seed)
        self.resolution = int(resolution)
        self.spec = spec or SynthSpec()
        self._cache = {}

    def __len__(self):
        return self.count

    def __getitem__(self, i):
        if not 0 <= i < self.count:
            raise IndexError(i)
        if i not in self._cache:
            self._cache[i] = synth_image(self.spec, i, self.seed, self.resolution)
        return self._cache[i]


def read_image(path):
    """Decode a raster file into float [-1, 1] RGB."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            arr = np.asarray(im.convert("RGB"))
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise DecodeFailure(path, str(exc)) from exc
    return to_unit(arr)


def write_png(path, image):
    Image.fromarray(to_uint8(image)).save(path, format="PNG")


class FolderDataset:
    def __init__(self, paths, resolution):
        self.paths = list(paths)
        self.resolution = int(resolution)
        self._items = [resize_bilinear(read_image(p), resolution, resolution) for p in self.paths]

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def list_images(path):
    path = Path(path)
    if not path.is_dir():
        raise EmptyFolder(f"{path} is not a readable directory")
    files = sorted(p for p in path.iterdir() if p.is_file() and p.suffix.lower() in SUPPORTED_SUFFIXES)
    if not files:
        raise EmptyFolder(f"no supported images in {path}")
    return files


def load_folder(path, resolution):
    return FolderDataset(list_images(path), resolution)
