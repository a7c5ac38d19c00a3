"""Datasets for the three modalities: images, audio waveforms and SDF samples.

Also holds the file readers/writers they need (PNG, 16-bit PCM WAV, XYZ
point clouds with normals, PLY).
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial import cKDTree

SDF_DOMAIN = (-1.2, 1.2)


class SignalIOError(OSError):
    pass


def grid_coords(*sizes: int) -> np.ndarray:
    """Regular lattice over [-1, 1]^d, corner-inclusive, 'ij' order, flattened."""
    axes = [np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1) for n in sizes]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=-1)


class _FixedCoords:
    coords: np.ndarray
    values: np.ndarray
    loss = "mse"

    def batch(self, rng: np.random.Generator, size: int | None, iteration: int):
        if size is None or size >= len(self.coords):
            return self.coords, self.values, None
        idx = rng.choice(len(self.coords), size=size, replace=False)
        return self.coords[idx], self.values[idx], idx


# -- images ------------------------------------------------------------------

@dataclass
class ImageDataset(_FixedCoords):
    coords: np.ndarray   # (H*W, 2), row then column, in [-1, 1]
    values: np.ndarray   # (H*W, 3) in [0, 1]
    height: int
    width: int
    original_size: tuple[int, int] = (0, 0)

    @classmethod
    def from_array(cls, img: np.ndarray, original_size=None) -> "ImageDataset":
        img = np.asarray(img, dtype=np.float64)
        if img.ndim == 2:
            img = np.repeat(img[..., None], 3, axis=-1)
        h, w = img.shape[:2]
        return cls(grid_coords(h, w), img.reshape(h * w, -1), h, w, original_size or (h, w))

    def image(self, values: np.ndarray | None = None) -> np.ndarray:
        v = self.values if values is None else values
        return np.asarray(v).reshape(self.height, self.width, -1)


def center_crop_square(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    return img[top:top + s, left:left + s]


def box_downscale(img: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return img
    h, w = (img.shape[0] // factor) * factor, (img.shape[1] // factor) * factor
    img = img[:h, :w]
    shape = (h // factor, factor, w // factor, factor) + img.shape[2:]
    return img.reshape(shape).mean(axis=(1, 3))


def read_png(path) -> np.ndarray:
    """8-bit image as float array in [0, 1], shape (H, W, 3)."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise SignalIOError(f"cannot read image {path}: {exc}") from exc
    return arr / 255.0


def write_png(path, img: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path)


def load_image(path, crop_square: bool = True, downscale: int = 4) -> ImageDataset:
    img = read_png(path)
    original = img.shape[:2]
    if crop_square:
        img = center_crop_square(img)
    return ImageDataset.from_array(box_downscale(img, downscale), original_size=original)


def bundled_image_path() -> Path:
    """128x128 test image shipped with the package (astronaut, cropped and 4x box-downscaled)."""
    return Path(str(resources.files("moe_inr") / "data" / "astronaut128.png"))


def bundled_image() -> ImageDataset:
    return load_image(bundled_image_path(), crop_square=True, downscale=1)


# -- audio -------------------------------------------------------------------

@dataclass
class AudioDataset(_FixedCoords):
    coords: np.ndarray   # (T, 1) in [-1, 1]
    values: np.ndarray   # (T, 1) in [-1, 1]
    sample_rate: int

    @classmethod
    def from_samples(cls, samples: np.ndarray, sample_rate: int) -> "AudioDataset":
        samples = np.asarray(samples, dtype=np.float64).reshape(-1, 1)
        return cls(grid_coords(len(samples)), samples, sample_rate)


def read_wav(path) -> tuple[np.ndarray, int]:
    """PCM-16 mono WAV -> (float samples in [-1, 1), sample rate)."""
    try:
        with wave.open(str(path), "rb") as wf:
            if wf.getnchannels() != 1:
                raise SignalIOError(f"{path}: expected mono audio, got {wf.getnchannels()} channels")
            if wf.getsampwidth() != 2 or wf.getcomptype() != "NONE":
                raise SignalIOError(f"{path}: only 16-bit PCM is supported")
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError) as exc:
        raise SignalIOError(f"cannot read {path}: {exc}") from exc
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0, rate


def write_wav(path, samples: np.ndarray, sample_rate: int) -> None:
    ints = np.clip(np.round(np.asarray(samples, dtype=np.float64).reshape(-1) * 32768.0), -32768, 32767)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(int(sample_rate))
        wf.writeframes(ints.astype("<i2").tobytes())


def load_audio(path) -> AudioDataset:
    samples, rate = read_wav(path)
    return AudioDataset.from_samples(samples, rate)


_SYNTH_SEGMENTS = 6


def _synth_segments(seconds: float, rate: int):
    t = np.arange(int(seconds * rate)) / rate
    return t, np.linspace(0, t[-1] + 1.0 / rate, _SYNTH_SEGMENTS + 1)


def synth_speaker_labels(seconds: float = 1.0, rate: int = 16000) -> np.ndarray:
    """Per-sample labels for :func:`synth_two_speakers`: 0/1 per speaker, 2 for gaps."""
    t, edges = _synth_segments(seconds, rate)
    labels = np.full(len(t), 2, dtype=np.int64)
    for k in range(_SYNTH_SEGMENTS):
        local = t - edges[k]
        voiced = (local >= 0) & (local < 0.85 * (edges[k + 1] - edges[k]))
        labels[voiced] = k % 2
    return labels


def synth_two_speakers(seconds: float = 1.0, rate: int = 16000, seed: int = 0) -> np.ndarray:
    """Deterministic test clip: two alternating harmonic 'voices', gaps and light noise."""
    rng = np.random.default_rng(seed)
    t, edges = _synth_segments(seconds, rate)
    out = np.zeros_like(t)
    n_seg = _SYNTH_SEGMENTS
    for k in range(n_seg):
        m = (t >= edges[k]) & (t < edges[k + 1])
        local = t[m] - edges[k]
        dur = edges[k + 1] - edges[k]
        env = np.sin(np.pi * np.clip(local / (0.85 * dur), 0, 1)) ** 2
        f0 = (140.0 if k % 2 == 0 else 230.0) * (1 + 0.05 * np.sin(2 * np.pi * 3 * local))
        phase = 2 * np.pi * np.cumsum(f0) / rate
        harmonics = (1, 2, 3, 5) if k % 2 == 0 else (1, 2, 4)
        voice = sum(np.sin(h * phase) / h for h in harmonics)
        out[m] = env * voice
    out += 0.01 * rng.standard_normal(len(t))
    return 0.9 * out / np.max(np.abs(out))


# -- point clouds and SDF samples -------------------------------------------

@dataclass
class OrientedPointCloud:
    points: np.ndarray
    normals: np.ndarray
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0
    tree: cKDTree = field(init=False, repr=False)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        n = np.asarray(self.normals, dtype=np.float64)
        if len(self.points) == 0:
            raise ValueError("point cloud is empty")
        if n.shape != self.points.shape or self.points.shape[1] != 3:
            raise ValueError("points and normals must both be (M, 3)")
        norms = np.linalg.norm(n, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise ValueError("zero-length normal")
        self.normals = n / norms
        self.tree = cKDTree(self.points)

    @classmethod
    def normalized(cls, points: np.ndarray, normals: np.ndarray) -> "OrientedPointCloud":
        """Center the bounding box and scale uniformly so it fits [-1, 1]^3."""
        points = np.asarray(points, dtype=np.float64)
        lo, hi = points.min(axis=0), points.max(axis=0)
        center = (lo + hi) / 2
        scale = float(np.max(hi - lo) / 2) or 1.0
        return cls((points - center) / scale, normals, center, scale)

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x) * self.scale + self.center

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x) - self.center) / self.scale


def sdf_ground_truth(query: np.ndarray, cloud: OrientedPointCloud) -> np.ndarray:
    """Distance to the nearest cloud point, signed by that point's normal (inside < 0)."""
    query = np.asarray(query, dtype=np.float64).reshape(-1, 3)
    dist, idx = cloud.tree.query(query)
    side = np.einsum("ij,ij->i", query - cloud.points[idx], cloud.normals[idx])
    return np.where(side < 0, -dist, dist)


@dataclass
class SdfSampleBatch:
    surface: np.ndarray
    fine: np.ndarray
    fine_sdf: np.ndarray
    coarse: np.ndarray
    coarse_sdf: np.ndarray

    @property
    def coords(self) -> np.ndarray:
        return np.concatenate([self.surface, self.fine, self.coarse])

    @property
    def sdf(self) -> np.ndarray:
        return np.concatenate([np.zeros(len(self.surface)), self.fine_sdf, self.coarse_sdf])


def sample_sdf_batch(cloud: OrientedPointCloud, counts=(10000, 10000, 10000), sigma_coarse: float = 4e-2,
                     sigma_fine: float = 4e-6, seed: int | np.random.Generator = 0) -> SdfSampleBatch:
    """Surface points plus Laplace-perturbed fine and coarse points with ground-truth SDF.

    ``sigma_*`` are per-axis standard deviations; the Laplace scale is sigma/sqrt(2).
    """
    if sigma_coarse <= 0 or sigma_fine <= 0:
        raise ValueError("noise standard deviations must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n_surf, n_fine, n_coarse = counts
    lo, hi = SDF_DOMAIN

    def around(n, sigma):
        base = cloud.points[rng.integers(0, len(cloud.points), size=n)]
        pts = np.clip(base + rng.laplace(0.0, sigma / np.sqrt(2.0), size=(n, 3)), lo, hi)
        return pts, sdf_ground_truth(pts, cloud)

    surface = cloud.points[rng.integers(0, len(cloud.points), size=n_surf)]
    fine, fine_sdf = around(n_fine, sigma_fine)
    coarse, coarse_sdf = around(n_coarse, sigma_coarse)
    return SdfSampleBatch(surface, fine, fine_sdf, coarse, coarse_sdf)


@dataclass
class SdfDataset:
    """Fresh surface/fine/coarse batch every iteration."""

    cloud: OrientedPointCloud
    counts: tuple[int, int, int] = (10000, 10000, 10000)
    sigma_coarse: float = 4e-2
    sigma_fine: float = 4e-6
    loss = "l1"

    def batch(self, rng: np.random.Generator, size: int | None, iteration: int):
        b = sample_sdf_batch(self.cloud, self.counts, self.sigma_coarse, self.sigma_fine, rng)
        return b.coords, b.sdf[:, None], None


def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5 ** 0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)


def sphere_cloud(n: int = 100000, radius: float = 0.5) -> OrientedPointCloud:
    u = fibonacci_sphere(n)
    return OrientedPointCloud(radius * u, u)


def sphere_sdf(x: np.ndarray, radius: float = 0.5) -> np.ndarray:
    return np.linalg.norm(np.asarray(x), axis=-1) - radius


def torus_cloud(n: int = 100000, major: float = 0.6, minor: float = 0.25, seed: int = 0) -> OrientedPointCloud:
    """Area-uniform samples on a torus around the z axis, outward normals."""
    rng = np.random.default_rng(seed)
    u = rng.uniform(0, 2 * np.pi, size=4 * n)
    v = rng.uniform(0, 2 * np.pi, size=4 * n)
    # rejection on the area element (major + minor cos v)
    keep = rng.uniform(0, major + minor, size=4 * n) < major + minor * np.cos(v)
    u, v = u[keep][:n], v[keep][:n]
    normals = np.stack([np.cos(v) * np.cos(u), np.cos(v) * np.sin(u), np.sin(v)], axis=1)
    ring = np.stack([major * np.cos(u), major * np.sin(u), np.zeros_like(u)], axis=1)
    return OrientedPointCloud(ring + minor * normals, normals)


def torus_sdf(x: np.ndarray, major: float = 0.6, minor: float = 0.25) -> np.ndarray:
    x = np.asarray(x)
    q = np.sqrt(x[..., 0] ** 2 + x[..., 1] ** 2) - major
    return np.sqrt(q ** 2 + x[..., 2] ** 2) - minor


ANALYTIC_SHAPES = {
    "sphere": (sphere_cloud, sphere_sdf),
    "torus": (torus_cloud, torus_sdf),
}


def read_xyz_normals(path) -> tuple[np.ndarray, np.ndarray]:
    try:
        data = np.loadtxt(path, ndmin=2)
    except (OSError, ValueError) as exc:
        raise SignalIOError(f"cannot read point cloud {path}: {exc}") from exc
    if data.shape[1] < 6:
        raise SignalIOError(f"{path}: expected x y z nx ny nz per line")
    return data[:, :3], data[:, 3:6]


_PLY_TYPES = {"char": "i1", "uchar": "u1", "short": "i2", "ushort": "u2", "int": "i4", "uint": "u4",
              "float": "f4", "double": "f8", "int8": "i1", "uint8": "u1", "int16": "i2", "uint16": "u2",
              "int32": "i4", "uint32": "u4", "float32": "f4", "float64": "f8"}


def read_ply_vertices(path) -> dict[str, np.ndarray]:
    """Vertex properties of a PLY file (ascii or binary little-endian)."""
    data = Path(path).read_bytes()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise SignalIOError(f"{path}: not a PLY file")
    body = data[data.index(b"\n", end) + 1:]
    lines = data[:end].decode("ascii").splitlines()
    fmt = next(l.split()[1] for l in lines if l.startswith("format"))
    elements: list[tuple[str, int, list]] = []
    for line in lines:
        parts = line.split()
        if parts and parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts and parts[0] == "property":
            elements[-1][2].append(parts[1:])
    if not elements or elements[0][0] != "vertex":
        raise SignalIOError(f"{path}: vertex element must come first")
    _, count, props = elements[0]
    if any(p[0] == "list" for p in props):
        raise SignalIOError(f"{path}: list properties on vertices are not supported")
    names = [p[1] for p in props]
    if fmt == "ascii":
        rows = np.array(body.decode("ascii").split()[: count * len(props)], dtype=np.float64)
        rows = rows.reshape(count, len(props))
        return {n: rows[:, i] for i, n in enumerate(names)}
    if fmt != "binary_little_endian":
        raise SignalIOError(f"{path}: unsupported PLY format {fmt}")
    dtype = np.dtype([(n, "<" + _PLY_TYPES[p[0]]) for n, p in zip(names, props)])
    arr = np.frombuffer(body, dtype=dtype, count=count)
    return {n: arr[n].astype(np.float64) for n in names}


def load_point_cloud(path) -> OrientedPointCloud:
    path = Path(path)
    if path.suffix.lower() == ".ply":
        v = read_ply_vertices(path)
        if not all(k in v for k in ("nx", "ny", "nz")):
            raise SignalIOError(f"{path}: PLY has no vertex normals")
        pts = np.stack([v["x"], v["y"], v["z"]], axis=1)
        nrm = np.stack([v["nx"], v["ny"], v["nz"]], axis=1)
    else:
        pts, nrm = read_xyz_normals(path)
    return OrientedPointCloud.normalized(pts, nrm)
