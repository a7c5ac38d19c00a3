"""Dense SDF grid evaluation, marching cubes, expert coloring and mesh files."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._mc_tables import TRI_TABLE
from .metrics import GRID_DOMAIN, GridField

DEFAULT_RESOLUTION = 128
RESOLUTION_CAP = 512

# Fixed expert palette (RGB), reused for every figure.
PALETTE = np.array([
    [230, 25, 75], [60, 180, 75], [0, 130, 200], [255, 225, 25],
    [145, 30, 180], [245, 130, 48], [70, 240, 240], [240, 50, 230],
], dtype=np.uint8)

# cube corners (Bourke numbering) as lattice offsets along (x, y, z)
_CORNERS = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
                     [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]])
_EDGES = np.array([[0, 1], [1, 2], [2, 3], [3, 0], [4, 5], [5, 6],
                   [6, 7], [7, 4], [0, 4], [1, 5], [2, 6], [3, 7]])


class ResolutionError(ValueError):
    pass


@dataclass
class TriangleMesh:
    vertices: np.ndarray                 # (V, 3) float
    triangles: np.ndarray                # (T, 3) int
    colors: np.ndarray | None = None     # (V, 3) uint8

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
            if len(self.colors) != len(self.vertices):
                raise ValueError("need one color per vertex")

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def face_normals(self) -> np.ndarray:
        """Unnormalized (area-weighted x2) triangle normals."""
        v = self.vertices[self.triangles]
        return np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])

    def areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(), axis=1)

    def flipped(self) -> "TriangleMesh":
        return TriangleMesh(self.vertices, self.triangles[:, ::-1], self.colors)


def signed_volume(mesh: TriangleMesh) -> float:
    """Sum of signed tetrahedra against the origin; positive for outward winding."""
    if mesh.is_empty:
        return 0.0
    v = mesh.vertices[mesh.triangles]
    return float(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0)


def edge_use_counts(mesh: TriangleMesh) -> np.ndarray:
    """How many triangles use each undirected edge."""
    e = np.concatenate([mesh.triangles[:, [0, 1]], mesh.triangles[:, [1, 2]], mesh.triangles[:, [2, 0]]])
    _, counts = np.unique(np.sort(e, axis=1), axis=0, return_counts=True)
    return counts


def is_watertight(mesh: TriangleMesh) -> bool:
    return not mesh.is_empty and bool(np.all(edge_use_counts(mesh) == 2))


def clean_mesh(mesh: TriangleMesh, min_area: float = 1e-12) -> TriangleMesh:
    """Merge coincident vertices, drop degenerate triangles and unused vertices."""
    if mesh.is_empty:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64),
                            None if mesh.colors is None else np.zeros((0, 3)))
    uniq, first, inverse = np.unique(mesh.vertices, axis=0, return_index=True, return_inverse=True)
    tris = inverse.reshape(-1)[mesh.triangles]
    colors = None if mesh.colors is None else mesh.colors[first]
    keep = (tris[:, 0] != tris[:, 1]) & (tris[:, 1] != tris[:, 2]) & (tris[:, 0] != tris[:, 2])
    tris = tris[keep]
    tmp = TriangleMesh(uniq, tris)
    tris = tris[tmp.areas() > min_area]
    used, new_idx = np.unique(tris, return_inverse=True)
    return TriangleMesh(uniq[used], new_idx.reshape(-1, 3),
                        None if colors is None else colors[used])


# -- grid evaluation ---------------------------------------------------------

def eval_grid(model, resolution: int = DEFAULT_RESOLUTION, lo: float = GRID_DOMAIN[0],
              hi: float = GRID_DOMAIN[1], cap: int = RESOLUTION_CAP,
              slab: int = 8) -> tuple[GridField, GridField]:
    """Route every lattice point through ``model``; returns (SDF grid, expert-index grid).

    Points are processed a few x-slabs at a time to bound memory.
    """
    if resolution < 2:
        raise ResolutionError("resolution must be at least 2")
    if resolution > cap:
        raise ResolutionError(f"resolution {resolution} exceeds the configured cap {cap}")
    ax = np.linspace(lo, hi, resolution)
    sdf = np.empty((resolution,) * 3)
    idx = np.empty((resolution,) * 3, dtype=np.int64)
    yy, zz = np.meshgrid(ax, ax, indexing="ij")
    for s in range(0, resolution, slab):
        xs = ax[s:s + slab]
        pts = np.concatenate([np.stack([np.full(yy.size, x), yy.ravel(), zz.ravel()], axis=1) for x in xs])
        out, j = model.route_and_reconstruct(pts)
        sdf[s:s + len(xs)] = out[:, 0].reshape(len(xs), resolution, resolution)
        idx[s:s + len(xs)] = j.reshape(len(xs), resolution, resolution)
    return GridField(sdf, lo, hi), GridField(idx, lo, hi)


# -- marching cubes ----------------------------------------------------------

def _case_tables():
    n = max(len(t) for t in TRI_TABLE)
    table = np.full((256, n), -1, dtype=np.int64)
    for c, t in enumerate(TRI_TABLE):
        table[c, :len(t)] = t
    return table, np.array([len(t) // 3 for t in TRI_TABLE])


_TRI, _NTRI = _case_tables()


def marching_cubes(grid: GridField, iso: float = 0.0) -> TriangleMesh:
    """Isosurface of ``grid`` at ``iso`` with vertices shared along lattice edges.

    Triangles are wound so their normals point toward larger field values
    (outward for an SDF). A grid that never crosses ``iso`` gives an empty mesh.
    """
    v = np.asarray(grid.values, dtype=np.float64)
    r = v.shape[0]
    if r < 2:
        raise ResolutionError("marching cubes needs a grid of at least 2^3")
    below = v < iso
    c = r - 1
    case = np.zeros((c, c, c), dtype=np.int64)
    for k, (dx, dy, dz) in enumerate(_CORNERS):
        case |= below[dx:dx + c, dy:dy + c, dz:dz + c].astype(np.int64) << k
    active = np.nonzero((case != 0) & (case != 255))
    if len(active[0]) == 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    cube = np.stack(active, axis=1)                         # (A, 3) lower corner
    cases = case[active]

    # global id of each cube edge: (axis, lower lattice point)
    a_pts = cube[:, None, :] + _CORNERS[_EDGES[:, 0]][None]  # (A, 12, 3)
    b_pts = cube[:, None, :] + _CORNERS[_EDGES[:, 1]][None]
    lower = np.minimum(a_pts, b_pts)
    axis = np.argmax(np.abs(b_pts - a_pts), axis=-1)
    edge_gid = axis * r ** 3 + (lower[..., 0] * r + lower[..., 1]) * r + lower[..., 2]

    tri_cols = _TRI[cases]                                   # (A, 15), -1 padded
    n_tri = _NTRI[cases]
    rows = np.repeat(np.arange(len(cases)), n_tri)
    slot = np.arange(len(rows)) - np.repeat(np.cumsum(n_tri) - n_tri, n_tri)
    local = np.stack([tri_cols[rows, 3 * slot + j] for j in range(3)], axis=1)
    tri_gid = edge_gid[rows[:, None], local]                 # (T, 3)

    uniq, inv = np.unique(tri_gid, return_inverse=True)
    tris = inv.reshape(-1, 3)
    e_axis = uniq // r ** 3
    flat = uniq % r ** 3
    p0 = np.stack(np.unravel_index(flat, (r, r, r)), axis=1)
    p1 = p0 + np.eye(3, dtype=np.int64)[e_axis]
    v0 = v[tuple(p0.T)]
    v1 = v[tuple(p1.T)]
    t = (iso - v0) / (v1 - v0)
    h = grid.spacing
    verts = grid.lo + h * (p0 + t[:, None] * (p1 - p0))

    # direction from the low-valued end to the high-valued end of each edge
    up = (p1 - p0) * np.where(v1 > v0, 1.0, -1.0)[:, None]
    mesh = TriangleMesh(verts, tris)
    normals = mesh.face_normals()
    wrong = np.einsum("ij,ij->i", normals, up[tris].sum(axis=1)) < 0
    mesh.triangles[wrong] = mesh.triangles[wrong][:, ::-1]
    return clean_mesh(mesh)


# -- colors ------------------------------------------------------------------

def expert_colors(indices: np.ndarray) -> np.ndarray:
    return PALETTE[np.asarray(indices) % len(PALETTE)]


def error_colors(errors: np.ndarray, vmax: float | None = None) -> np.ndarray:
    """White (no error) to red (``vmax`` or larger) ramp."""
    e = np.abs(np.asarray(errors, dtype=np.float64))
    vmax = float(e.max()) if vmax is None else vmax
    s = np.clip(e / vmax, 0.0, 1.0) if vmax > 0 else np.zeros_like(e)
    out = np.empty((len(e), 3))
    out[:, 0] = 255
    out[:, 1] = out[:, 2] = 255 * (1 - s)
    return np.round(out).astype(np.uint8)


def sample_surface(mesh: TriangleMesh, n: int, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform points on the mesh."""
    if mesh.is_empty:
        return np.zeros((0, 3))
    rng = np.random.default_rng(seed)
    a = mesh.areas()
    tri = rng.choice(len(a), size=n, p=a / a.sum())
    u, w = rng.random(n), rng.random(n)
    flip = u + w > 1
    u[flip], w[flip] = 1 - u[flip], 1 - w[flip]
    v = mesh.vertices[mesh.triangles[tri]]
    return v[:, 0] + u[:, None] * (v[:, 1] - v[:, 0]) + w[:, None] * (v[:, 2] - v[:, 0])


# -- mesh files --------------------------------------------------------------

def export_mesh(mesh: TriangleMesh, path, fmt: str | None = None) -> Path:
    """Write OBJ (ASCII, 1-based faces) or binary little-endian PLY with uchar RGB."""
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    if fmt == "obj":
        lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
        path.write_text("\n".join(lines) + ("\n" if lines else ""))
        return path
    if fmt != "ply":
        raise ValueError(f"unsupported mesh format {fmt!r}")
    has_color = mesh.colors is not None
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(mesh.vertices)}",
              "property float x", "property float y", "property float z"]
    if has_color:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header += [f"element face {len(mesh.triangles)}", "property list uchar int vertex_indices", "end_header"]
    vdtype = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if has_color:
        vdtype += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    verts = np.zeros(len(mesh.vertices), dtype=vdtype)
    for k, name in enumerate("xyz"):
        verts[name] = mesh.vertices[:, k]
    if has_color:
        for k, name in enumerate(("red", "green", "blue")):
            verts[name] = mesh.colors[:, k]
    faces = np.zeros(len(mesh.triangles), dtype=[("n", "u1"), ("i", "<i4", (3,))])
    faces["n"] = 3
    faces["i"] = mesh.triangles
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(verts.tobytes())
        fh.write(faces.tobytes())
    return path


def import_mesh(path) -> TriangleMesh:
    path = Path(path)
    if path.suffix.lower() == ".obj":
        verts, faces = [], []
        for line in path.read_text().splitlines():
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
        return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))
    data = path.read_bytes()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    lines = data[:end].decode("ascii").splitlines()
    n_v = n_f = 0
    names = []
    for line in lines:
        p = line.split()
        if p[:2] == ["element", "vertex"]:
            n_v = int(p[2])
        elif p[:2] == ["element", "face"]:
            n_f = int(p[2])
        elif p[0] == "property" and p[1] != "list":
            names.append(p[2])
    has_color = "red" in names
    vdtype = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if has_color:
        vdtype += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    verts = np.frombuffer(data, dtype=vdtype, count=n_v, offset=end)
    off = end + verts.nbytes
    faces = np.frombuffer(data, dtype=[("n", "u1"), ("i", "<i4", (3,))], count=n_f, offset=off)
    if n_f and np.any(faces["n"] != 3):
        raise ValueError("only triangle faces are supported")
    v = np.stack([verts["x"], verts["y"], verts["z"]], axis=1).astype(np.float64)
    colors = np.stack([verts["red"], verts["green"], verts["blue"]], axis=1) if has_color else None
    return TriangleMesh(v, faces["i"].astype(np.int64), colors)
