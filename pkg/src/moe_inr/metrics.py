"""Image, audio and shape metrics: PSNR, SSIM, MSE, grid IoU, Trimap IoU, Chamfer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.spatial import cKDTree

GRID_DOMAIN = (-1.2, 1.2)
LUMA = np.array([0.299, 0.587, 0.114])
CHAMFER_SCALE = 1e5
CHAMFER_DEFINITION = "mean squared nearest distance a->b plus b->a, times 1e5"


def mse(pred, gt) -> float:
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    return float(np.mean((pred - gt) ** 2))


def psnr(pred, gt, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE); ``inf`` for identical inputs."""
    err = mse(pred, gt)
    if err == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak ** 2 / err))


def format_metric(value: float) -> str:
    return "inf" if np.isinf(value) else f"{value:.6g}"


def to_gray(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[-1] == 3:
        return img @ LUMA
    if img.ndim == 3 and img.shape[-1] == 1:
        return img[..., 0]
    if img.ndim == 2:
        return img
    raise ValueError(f"expected an (H, W) or (H, W, 3) image, got {img.shape}")


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    rows = sliding_window_view(img, len(g), axis=0) @ g
    return sliding_window_view(rows, len(g), axis=1) @ g


def ssim(pred, gt, win: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Mean SSIM over all fully-covered Gaussian windows of the luma images."""
    a, b = to_gray(pred), to_gray(gt)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape) < win:
        raise ValueError(f"image {a.shape} is smaller than the {win}x{win} window")
    g = gaussian_window(win, sigma)
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(s.mean())


# -- shape metrics -----------------------------------------------------------

@dataclass
class GridField:
    """Values on the corner-inclusive R^3 lattice over [lo, hi]^3 ('ij' axis order)."""

    values: np.ndarray
    lo: float = GRID_DOMAIN[0]
    hi: float = GRID_DOMAIN[1]

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3 or len(set(self.values.shape)) != 1:
            raise ValueError(f"grid must be R x R x R, got {self.values.shape}")

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    @property
    def spacing(self) -> float:
        return (self.hi - self.lo) / (self.resolution - 1)

    @property
    def inside(self) -> np.ndarray:
        return self.values < 0

    def points(self) -> np.ndarray:
        return lattice_points(self.resolution, self.lo, self.hi)

    @classmethod
    def from_function(cls, fn, resolution: int, lo: float = GRID_DOMAIN[0], hi: float = GRID_DOMAIN[1]):
        pts = lattice_points(resolution, lo, hi)
        return cls(np.asarray(fn(pts)).reshape((resolution,) * 3), lo, hi)


def lattice_points(resolution: int, lo: float = GRID_DOMAIN[0], hi: float = GRID_DOMAIN[1]) -> np.ndarray:
    ax = np.linspace(lo, hi, resolution)
    mesh = np.meshgrid(ax, ax, ax, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=-1)


def _check_pair(pred: GridField, gt: GridField) -> None:
    if pred.values.shape != gt.values.shape:
        raise ValueError(f"resolution mismatch {pred.resolution} vs {gt.resolution}")


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def iou_grid(pred: GridField, gt: GridField) -> float:
    _check_pair(pred, gt)
    return _iou(pred.inside, gt.inside)


def trimap_iou(pred: GridField, gt: GridField, d: float) -> float:
    """IoU over lattice points whose ground-truth |SDF| is at most ``d``."""
    if d <= 0:
        raise ValueError("band width d must be positive")
    _check_pair(pred, gt)
    band = np.abs(gt.values) <= d
    if not band.any():
        raise ValueError(f"band-empty: no grid point within d={d} of the surface")
    return _iou(pred.inside[band], gt.inside[band])


def chamfer(a, b) -> float:
    """Symmetric mean of squared nearest-neighbour distances, scaled by 1e5."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance needs two nonempty point sets")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return float((np.mean(d_ab ** 2) + np.mean(d_ba ** 2)) * CHAMFER_SCALE)
