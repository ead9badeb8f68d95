"""PSNR, center-region PSNR and the filtered average used for reporting."""

import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyAfterFilter, InvalidRange, ShapeMismatch
from .imaging import resize_bilinear

INF = math.inf


@dataclass(frozen=True)
class PsnrResult:
    value: float
    mse: float
    finite: bool

    def __str__(self):
        return "inf" if not self.finite else f"{self.value:.4f}"


def psnr(x, y, max_value=2.0):
    """``10 log10(max^2 / mse)`` over all pixels and channels; +inf when identical."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeMismatch(f"psnr needs equal shapes, got {x.shape} and {y.shape}")
    if max_value <= 0:
        raise InvalidRange("max_value must be positive")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PsnrResult(INF, 0.0, False)
    return PsnrResult(10.0 * math.log10(max_value**2 / mse), mse, True)


def center_psnr(generated, input_image, placement, max_value=2.0):
    H, W = np.shape(generated)[:2]
    if not placement.fits(H, W):
        raise ShapeMismatch(f"placement {placement} is not inside the {H}x{W} output")
    window = np.asarray(generated)[placement.top:placement.bottom, placement.left:placement.right]
    ref = resize_bilinear(np.asarray(input_image, dtype=np.float64), placement.height, placement.width)
    return psnr(window, ref, max_value)


@dataclass(frozen=True)
class PsnrSummary:
    mean: float
    included: int
    excluded_infinite: int
    excluded_cutoff: int

    @property
    def total(self):
        return self.included + self.excluded_infinite + self.excluded_cutoff


def aggregate(results, cutoff=1000.0):
    """Mean over finite values strictly below ``cutoff``; exclusions are counted."""
    if cutoff <= 0:
        raise InvalidRange("cutoff must be positive")
    values = [r.value if isinstance(r, PsnrResult) else float(r) for r in results]
    n_inf = sum(1 for v in values if math.isinf(v))
    kept = [v for v in values if not math.isinf(v) and v < cutoff]
    n_cut = len(values) - n_inf - len(kept)
    if not kept:
        raise EmptyAfterFilter(n_inf, n_cut)
    return PsnrSummary(float(np.mean(kept)), len(kept), n_inf, n_cut)


def format_report(names, results, max_value, cutoff=1000.0):
    """Per-image lines, then the summary block. FID/IS are not computed."""
    lines = [f"# center PSNR, max_value={max_value:g}, cutoff={cutoff:g}"]
    lines += [f"{name} {res}" for name, res in zip(names, results)]
    lines.append("[summary]")
    try:
        s = aggregate(results, cutoff)
        lines += [f"mean = {s.mean:.4f}", f"included = {s.included}"]
        n_inf, n_cut = s.excluded_infinite, s.excluded_cutoff
    except EmptyAfterFilter as exc:
        lines += ["mean = nan", "included = 0"]
        n_inf, n_cut = exc.excluded_infinite, exc.excluded_cutoff
    lines += [f"excluded_infinite = {n_inf}", f"excluded_cutoff = {n_cut}", f"N = {len(results)}",
              "[fid_is]", "status = unavailable (needs a pretrained Inception network)"]
    return "\n".join(lines) + "\n"
