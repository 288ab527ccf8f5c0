"""PSNR and Gaussian-window SSIM for [0, 1] images."""

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from errors import ParameterError, ShapeError
from geometry import check_binary

PSNR_CAP = 99.0

# Gaussian window: sigma 1.5 truncated at 3.5 sigma gives 11 taps
SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5
SSIM_WINDOW = 11
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DATA_RANGE = 1.0

REPORT_FIELDS = ('scene', 'seed', 'psnr_full', 'psnr_masked', 'ssim_full', 'pixels_full', 'pixels_masked')


def check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError("images differ in shape: {} vs {}".format(a.shape, b.shape))
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.ndim != 3:
        raise ShapeError("expected HxW or HxWxC images, got shape {}".format(a.shape))
    return a, b


def psnr(a, b, region=None):
    """10·log10(1/MSE) over ``region`` (all pixels when None), capped at 99 dB."""
    a, b = check_pair(a, b)
    sq = (a - b) ** 2
    if region is not None:
        region = check_binary(region, 'region', a.shape[:2]).astype(bool)
        if not region.any():
            raise ParameterError("PSNR region is empty")
        sq = sq[region]
    mse = float(sq.mean())
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10 * math.log10(DATA_RANGE ** 2 / mse))


def ssim(a, b):
    """Mean local SSIM, computed per channel and averaged.

    Local statistics use an 11-tap Gaussian window (sigma 1.5); the mean
    is taken over the pixels whose window lies fully inside the image.
    """
    a, b = check_pair(a, b)
    h, w = a.shape[:2]
    if min(h, w) < SSIM_WINDOW:
        raise ParameterError("SSIM needs images of at least {0}x{0} pixels, got {1}x{2}".format(SSIM_WINDOW, w, h))

    c1 = (SSIM_K1 * DATA_RANGE) ** 2
    c2 = (SSIM_K2 * DATA_RANGE) ** 2
    pad = (SSIM_WINDOW - 1) // 2

    def blur(x):
        return gaussian_filter(x, sigma=SSIM_SIGMA, truncate=SSIM_TRUNCATE)

    values = []
    for channel in range(a.shape[2]):
        x, y = a[..., channel], b[..., channel]
        mx, my = blur(x), blur(y)
        vx = blur(x * x) - mx * mx
        vy = blur(y * y) - my * my
        cov = blur(x * y) - mx * my
        s = ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        values.append(s[pad:h - pad, pad:w - pad].mean())
    return float(np.mean(values))


@dataclass(frozen=True)
class EvalReport:
    psnr_full: float
    psnr_masked: float
    ssim_full: float
    pixels_full: int
    pixels_masked: int
    scene: str = ''
    seed: int = 0

    def csv_header(self):
        return ','.join(REPORT_FIELDS)

    def csv_row(self):
        values = asdict(self)
        return ','.join(str(values[name]) for name in REPORT_FIELDS)

    def __str__(self):
        return '\n'.join([
            "scene:       {}".format(self.scene or '-'),
            "seed:        {}".format(self.seed),
            "PSNR full:   {:.3f} dB ({} px)".format(self.psnr_full, self.pixels_full),
            "PSNR masked: {:.3f} dB ({} px)".format(self.psnr_masked, self.pixels_masked),
            "SSIM full:   {:.4f}".format(self.ssim_full)
        ])


def evaluate_completion(output, ground_truth, completion, scene_id='', seed=0):
    output, ground_truth = check_pair(output, ground_truth)
    completion = check_binary(completion, 'completion mask', output.shape[:2])
    h, w = output.shape[:2]
    return EvalReport(
        psnr_full=psnr(output, ground_truth),
        psnr_masked=psnr(output, ground_truth, completion),
        ssim_full=ssim(output, ground_truth),
        pixels_full=h * w,
        pixels_masked=int(completion.sum()),
        scene=scene_id,
        seed=seed
    )
