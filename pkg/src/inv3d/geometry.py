"""Mesh extraction, visibility analysis, and warped-view synthesis.

The pipeline here: extract an iso-surface mesh from the generator's density
field, decide which vertices the input camera saw (z-buffer test), paste
input-image colors onto those vertices, then rasterize the colored mesh at
novel poses to obtain warped pseudo-textures and their visibility masks.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage
from skimage import measure

from .camera import CameraPose, project_points
from .generator import LatentCode, TriplaneGenerator


@dataclass
class TriMesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int
    vertex_colors: np.ndarray | None = None  # (V, 3) in [0, 1]
    vertex_visible: np.ndarray | None = None  # (V,) bool

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if not np.isfinite(self.vertices).all():
            raise ValueError("non-finite mesh vertices")
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def is_empty(self) -> bool:
        return len(self.vertices) == 0 or len(self.faces) == 0

    def diameter(self) -> float:
        if self.is_empty:
            return 1.0
        ext = self.vertices.max(axis=0) - self.vertices.min(axis=0)
        d = float(np.linalg.norm(ext))
        return d if d > 0 else 1.0


@dataclass
class Mask:
    values: np.ndarray  # (H, W) in [0, 1]
    kind: str = "binary"  # "binary" | "soft"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.min() < 0 or self.values.max() > 1:
            raise ValueError("mask values must lie in [0, 1]")
        if self.kind == "binary" and not np.isin(self.values, (0.0, 1.0)).all():
            raise ValueError("binary mask may only contain {0, 1}")
        if self.kind not in ("binary", "soft"):
            raise ValueError(f"unknown mask kind {self.kind!r}")


# -- iso-surface extraction ----------------------------------------------------


def extract_mesh(gen: TriplaneGenerator, w: LatentCode, grid_res: int = 128,
                 level: float = 10.0, chunk: int = 262144) -> TriMesh:
    """Marching cubes over the generator density on a regular grid in
    [-1, 1]^3. Returns an empty mesh when the level set is not crossed."""
    if grid_res < 16:
        raise ValueError("grid_res must be >= 16")
    axis = np.linspace(-1.0, 1.0, grid_res)
    pts = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)
    out = np.empty(len(pts), dtype=np.float32)
    with torch.no_grad():
        for i in range(0, len(pts), chunk):
            out[i:i + chunk] = gen.query_density(
                w, torch.from_numpy(pts[i:i + chunk]).to(gen.dtype)
            ).numpy()
    if not np.isfinite(out).all():
        raise ValueError("non-finite densities on the extraction grid")
    vol = out.reshape(grid_res, grid_res, grid_res)
    return mesh_from_density_grid(vol, level)


def mesh_from_density_grid(vol: np.ndarray, level: float) -> TriMesh:
    """Marching cubes on a density grid sampled over [-1, 1]^3."""
    grid_res = vol.shape[0]
    if vol.min() >= level or vol.max() <= level:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    spacing = 2.0 / (grid_res - 1)
    verts, faces, _, _ = measure.marching_cubes(vol, level=level,
                                                spacing=(spacing,) * 3)
    verts = verts - 1.0
    return _drop_degenerate(TriMesh(verts, faces.astype(np.int64)))


def _drop_degenerate(mesh: TriMesh) -> TriMesh:
    if mesh.is_empty:
        return mesh
    v = mesh.vertices[mesh.faces]
    area2 = np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)
    keep = area2 > 0
    return TriMesh(mesh.vertices, mesh.faces[keep],
                   mesh.vertex_colors, mesh.vertex_visible)


# -- visibility ----------------------------------------------------------------


def vertex_visibility(mesh: TriMesh, pose: CameraPose, image_size: int,
                      eps_scale: float = 1e-4) -> np.ndarray:
    """Per-vertex visibility from `pose` via a z-buffer style depth test.

    A vertex is visible iff its camera depth is within eps of the nearest
    surface covering its exact projected position (perspective-correct
    interpolated depth), and it projects inside the image. eps is
    eps_scale times the mesh diameter.
    """
    if mesh.is_empty:
        raise ValueError("empty mesh")
    uv, depth = project_points(mesh.vertices, pose, image_size)
    if np.any(depth == 0):
        raise ValueError("vertex at the camera center")
    eps = eps_scale * mesh.diameter()
    occ_depth = surface_depth_at(mesh, uv, pose, image_size)
    visible = (
        (depth > 0)
        & (uv[:, 0] >= 0) & (uv[:, 0] <= image_size)
        & (uv[:, 1] >= 0) & (uv[:, 1] <= image_size)
        & (depth <= occ_depth + eps)
    )
    return visible


def surface_depth_at(mesh: TriMesh, query_uv: np.ndarray, pose: CameraPose,
                     image_size: int, nbins: int = 32) -> np.ndarray:
    """Nearest surface depth at arbitrary projected positions.

    Screen-space point-in-triangle coverage with perspective-correct depth
    interpolation; faces are binned by projected bounding box so each query
    only tests nearby triangles. Returns +inf where nothing covers the
    query.
    """
    uv, depth = project_points(mesh.vertices, pose, image_size)
    fuv = uv[mesh.faces]  # (F, 3, 2)
    fz = depth[mesh.faces]  # (F, 3)
    front = (fz > 1e-9).all(axis=1)

    cell = image_size / nbins
    fmin = np.floor(fuv.min(axis=1) / cell).astype(int)
    fmax = np.floor(fuv.max(axis=1) / cell).astype(int)
    qcell = np.floor(query_uv / cell).astype(int)

    nearest = np.full(len(query_uv), np.inf)
    # group queries by cell
    order = np.lexsort((qcell[:, 1], qcell[:, 0]))
    sorted_cells = qcell[order]
    bounds = np.flatnonzero(
        np.any(sorted_cells[1:] != sorted_cells[:-1], axis=1)) + 1
    starts = np.concatenate([[0], bounds])
    ends = np.concatenate([bounds, [len(order)]])

    for s, e in zip(starts, ends):
        qi = order[s:e]
        cx, cy = sorted_cells[s]
        fsel = np.flatnonzero(
            front
            & (fmin[:, 0] <= cx) & (fmax[:, 0] >= cx)
            & (fmin[:, 1] <= cy) & (fmax[:, 1] >= cy)
        )
        if len(fsel) == 0:
            continue
        d = _min_depth_at_points(query_uv[qi], fuv[fsel], fz[fsel])
        nearest[qi] = d
    return nearest


def _min_depth_at_points(pts: np.ndarray, tri_uv: np.ndarray, tri_z: np.ndarray):
    """Min perspective-correct depth over triangles covering each point.

    pts (N, 2); tri_uv (F, 3, 2); tri_z (F, 3). Vectorized over N x F.
    """
    a, b, c = tri_uv[:, 0], tri_uv[:, 1], tri_uv[:, 2]
    denom = _cross2(b - a, c - a)  # (F,)
    ok = np.abs(denom) > 1e-12
    p = pts[:, None, :]  # (N, 1, 2)
    w0 = _cross2(b - p, c - p)  # (N, F)
    w1 = _cross2(c - p, a - p)
    w2 = _cross2(a - p, b - p)
    with np.errstate(divide="ignore", invalid="ignore"):
        l0 = w0 / denom
        l1 = w1 / denom
        l2 = w2 / denom
        inside = ok & (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
        inv_z = l0 / tri_z[:, 0] + l1 / tri_z[:, 1] + l2 / tri_z[:, 2]
        z = 1.0 / inv_z
    z = np.where(inside & (z > 0), z, np.inf)
    return z.min(axis=1)


def _cross2(u, v):
    return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]


# -- color reprojection and warping --------------------------------------------

SENTINEL_COLOR = (0.0, 0.0, 0.0)


def project_colors(mesh: TriMesh, image: np.ndarray, pose: CameraPose) -> TriMesh:
    """Paste input-view colors onto mesh vertices visible from `pose`.

    Visible vertices get the bilinearly sampled image color at their
    projection; occluded or off-screen vertices get the sentinel color and a
    False visibility flag.
    """
    if mesh.is_empty:
        raise ValueError("empty mesh")
    image = np.asarray(image, dtype=np.float64)
    image_size = image.shape[0]
    visible = vertex_visibility(mesh, pose, image_size)
    uv, _ = project_points(mesh.vertices, pose, image_size)
    colors = np.tile(np.asarray(SENTINEL_COLOR), (mesh.num_vertices, 1))
    colors[visible] = bilinear_sample(image, uv[visible])
    return TriMesh(mesh.vertices, mesh.faces, vertex_colors=colors,
                   vertex_visible=visible)


def bilinear_sample(image: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Sample (H, W, C) at continuous pixel positions (pixel centers at
    half-integers), clamping at the border."""
    h, w = image.shape[:2]
    x = np.clip(uv[:, 0] - 0.5, 0, w - 1)
    y = np.clip(uv[:, 1] - 0.5, 0, h - 1)
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    return ((image[y0, x0] * (1 - fx) + image[y0, x1] * fx) * (1 - fy)
            + (image[y1, x0] * (1 - fx) + image[y1, x1] * fx) * fy)


def render_warp(mesh: TriMesh, pose: CameraPose, image_size: int):
    """Rasterize the colored mesh at a novel pose.

    Returns (image, raw visibility Mask). A pixel belongs to the mask iff
    its front-most surface is a face whose three vertices were visible from
    the source pose; only those pixels receive warped color. Depth ties go
    to the lower face index.
    """
    if mesh.vertex_colors is None or mesh.vertex_visible is None:
        raise ValueError("mesh lacks colors/visibility; run project_colors first")
    if mesh.is_empty:
        import warnings

        warnings.warn("render_warp on empty mesh: all-zero mask")
        return np.zeros((image_size, image_size, 3)), Mask(np.zeros((image_size, image_size)))
    zbuf, faceid, color = rasterize_mesh(mesh, pose, image_size)
    face_ok = mesh.vertex_visible[mesh.faces].all(axis=1)
    covered = faceid >= 0
    mask = np.zeros((image_size, image_size))
    mask[covered] = face_ok[faceid[covered]].astype(float)
    image = np.where(mask[..., None] > 0, color, 0.0)
    return image, Mask(mask, "binary")


def rasterize_mesh(mesh: TriMesh, pose: CameraPose, image_size: int):
    """Z-buffer rasterization with perspective-correct color interpolation.

    Returns (zbuf, faceid, color): zbuf +inf and faceid -1 where no surface;
    nearest depth wins, ties broken by lower face index (faces are processed
    in order with a strict depth test).
    """
    uv, depth = project_points(mesh.vertices, pose, image_size)
    colors = mesh.vertex_colors if mesh.vertex_colors is not None else np.zeros((mesh.num_vertices, 3))
    zbuf = np.full((image_size, image_size), np.inf)
    faceid = np.full((image_size, image_size), -1, dtype=np.int64)
    cbuf = np.zeros((image_size, image_size, 3))

    fuv = uv[mesh.faces]
    fz = depth[mesh.faces]
    front = (fz > 1e-9).all(axis=1)
    lo = np.floor(fuv.min(axis=1) - 0.5).astype(int)
    hi = np.ceil(fuv.max(axis=1) - 0.5).astype(int)
    lo = np.clip(lo, 0, image_size - 1)
    hi = np.clip(hi, -1, image_size - 1)
    nonempty = front & (hi >= lo).all(axis=1)

    for f in np.flatnonzero(nonempty):
        (x0, y0), (x1, y1) = lo[f], hi[f]
        xs = np.arange(x0, x1 + 1) + 0.5
        ys = np.arange(y0, y1 + 1) + 0.5
        px, py = np.meshgrid(xs, ys)
        pts = np.stack([px.ravel(), py.ravel()], axis=1)
        a, b, c = fuv[f]
        denom = _cross2(b - a, c - a)
        if abs(denom) < 1e-12:
            continue
        l0 = _cross2(b - pts, c - pts) / denom
        l1 = _cross2(c - pts, a - pts) / denom
        l2 = _cross2(a - pts, b - pts) / denom
        inside = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
        if not inside.any():
            continue
        inv_z = l0 / fz[f, 0] + l1 / fz[f, 1] + l2 / fz[f, 2]
        z = 1.0 / inv_z
        ii = (pts[:, 1] - 0.5).astype(int)
        jj = (pts[:, 0] - 0.5).astype(int)
        upd = inside & (z > 0) & (z < zbuf[ii, jj])
        if not upd.any():
            continue
        iu, ju = ii[upd], jj[upd]
        zbuf[iu, ju] = z[upd]
        faceid[iu, ju] = f
        cf = colors[mesh.faces[f]] / fz[f][:, None]  # (3, 3) color/z
        col = (l0[upd, None] * cf[0] + l1[upd, None] * cf[1]
               + l2[upd, None] * cf[2]) * z[upd, None]
        cbuf[iu, ju] = np.clip(col, 0.0, 1.0)
    return zbuf, faceid, cbuf


# -- mask morphology ------------------------------------------------------------


def erode_and_feather(mask: Mask, erosion_radius: int, blur_radius: int) -> Mask:
    """Erode a binary mask by a disk, then soften with a Gaussian.

    The Gaussian kernel has half-width `blur_radius` pixels and sigma
    blur_radius / 2, applied separably with zero padding.
    """
    if erosion_radius < 0 or blur_radius < 0:
        raise ValueError("radii must be nonnegative")
    if mask.kind != "binary":
        raise ValueError("erode_and_feather expects a binary mask")
    vals = mask.values
    if erosion_radius > 0:
        vals = ndimage.binary_erosion(
            vals > 0.5, structure=_disk(erosion_radius), border_value=0
        ).astype(np.float64)
    if blur_radius > 0:
        k = gaussian_kernel_1d(blur_radius)
        vals = ndimage.convolve1d(vals, k, axis=0, mode="constant", cval=0.0)
        vals = ndimage.convolve1d(vals, k, axis=1, mode="constant", cval=0.0)
        vals = np.clip(vals, 0.0, 1.0)
    return Mask(vals, "soft")


def gaussian_kernel_1d(radius: int) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    sigma = radius / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _disk(radius: int) -> np.ndarray:
    r = int(radius)
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    return (x * x + y * y) <= r * r


# -- Wavefront-style mesh I/O ----------------------------------------------------


def save_mesh_obj(path, mesh: TriMesh) -> None:
    """Text format: `v x y z [r g b]` lines and 1-based `f` lines; a comment
    line carries per-vertex visibility flags when present."""
    lines = []
    has_col = mesh.vertex_colors is not None
    for i, v in enumerate(mesh.vertices):
        if has_col:
            c = mesh.vertex_colors[i]
            lines.append("v %.8g %.8g %.8g %.6g %.6g %.6g" % (*v, *c))
        else:
            lines.append("v %.8g %.8g %.8g" % tuple(v))
    if mesh.vertex_visible is not None:
        bits = "".join("1" if b else "0" for b in mesh.vertex_visible)
        lines.append("# visible " + bits)
    for f in mesh.faces:
        lines.append("f %d %d %d" % (f[0] + 1, f[1] + 1, f[2] + 1))
    Path(path).write_text("\n".join(lines) + "\n")


def load_mesh_obj(path) -> TriMesh:
    verts, faces, colors = [], [], []
    visible = None
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
            if len(parts) >= 7:
                colors.append([float(x) for x in parts[4:7]])
        elif parts[0] == "f":
            faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
        elif parts[0] == "#" and len(parts) >= 3 and parts[1] == "visible":
            visible = np.array([ch == "1" for ch in parts[2]])
    return TriMesh(
        np.array(verts).reshape(-1, 3),
        np.array(faces, dtype=np.int64).reshape(-1, 3),
        vertex_colors=np.array(colors) if colors else None,
        vertex_visible=visible,
    )
