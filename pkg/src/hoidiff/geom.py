"""Rotation algebra, triangle meshes, point sampling, and proximity queries.

Conventions: points are (N, 3) float arrays in meters, world frame. A 6D
rotation is the first two columns of a rotation matrix, laid out column by
column: (c0x, c0y, c0z, c1x, c1y, c1z). Functions ending in `_t` build
differentiable diffkit graphs; the plain versions run in float64 numpy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffkit as dk


class DegenerateRotationError(ValueError):
    """6D rotation input with a vanishing or parallel column pair."""


class InvalidRotationError(ValueError):
    """Matrix input that is not orthonormal with determinant +1."""


class MeshFormatError(ValueError):
    """Mesh file that cannot be parsed or violates the triangle-only contract."""


# ---------------------------------------------------------------------------
# rotations
# ---------------------------------------------------------------------------

def rot6d_to_matrix(r) -> np.ndarray:
    """Gram-Schmidt a (..., 6) vector into a (..., 3, 3) rotation matrix.

    The first three components are the (unnormalized) first column, the last
    three the second; the third column is their cross product.
    """
    r = np.asarray(r, dtype=np.float64)
    if r.shape[-1] != 6:
        raise DegenerateRotationError(f"expected 6 components, got shape {r.shape}")
    if not np.all(np.isfinite(r)):
        raise DegenerateRotationError("non-finite 6D rotation input")
    a1, a2 = r[..., :3], r[..., 3:]
    n1 = np.linalg.norm(a1, axis=-1)
    if np.any(n1 < 1e-8):
        raise DegenerateRotationError("first column has vanishing norm")
    b1 = a1 / n1[..., None]
    res = a2 - (b1 * a2).sum(axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(res, axis=-1)
    if np.any(n2 < 1e-8):
        raise DegenerateRotationError("columns are parallel (degenerate residual)")
    b2 = res / n2[..., None]
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def matrix_to_rot6d(m) -> np.ndarray:
    """First two columns of a (..., 3, 3) rotation matrix as a (..., 6) vector."""
    m = np.asarray(m, dtype=np.float64)
    gram = np.swapaxes(m, -1, -2) @ m
    eye = np.eye(3)
    if np.abs(gram - eye).max() > 1e-4:
        raise InvalidRotationError("matrix is not orthonormal within 1e-4")
    if np.any(np.abs(np.linalg.det(m) - 1.0) > 1e-3):
        raise InvalidRotationError("matrix determinant is not +1")
    return np.concatenate([m[..., :, 0], m[..., :, 1]], axis=-1)


def axis_angle_to_matrix(aa) -> np.ndarray:
    """Rodrigues formula on (..., 3) axis-angle vectors (radians).

    Below 1e-6 rad the second-order Taylor expansion is used so the map is
    smooth through zero.
    """
    aa = np.asarray(aa, dtype=np.float64)
    theta = np.linalg.norm(aa, axis=-1)
    k = _skew(aa)
    kk = k @ k
    eye = np.broadcast_to(np.eye(3), k.shape)
    taylor = eye + k + 0.5 * kk
    safe = np.where(theta > 1e-6, theta, 1.0)
    unit_k = k / safe[..., None, None]
    unit_kk = kk / (safe * safe)[..., None, None]
    general = (eye + np.sin(theta)[..., None, None] * unit_k
               + (1.0 - np.cos(theta))[..., None, None] * unit_kk)
    return np.where((theta > 1e-6)[..., None, None], general, taylor)


def matrix_to_axis_angle(m) -> np.ndarray:
    """Inverse Rodrigues for a single 3x3 rotation matrix (angle in [0, pi])."""
    m = np.asarray(m, dtype=np.float64)
    trace = np.clip((np.trace(m) - 1.0) / 2.0, -1.0, 1.0)
    angle = np.arccos(trace)
    if angle < 1e-8:
        return np.zeros(3)
    if np.pi - angle < 1e-5:
        # near pi the skew part vanishes; recover the axis from m + I
        sym = (m + np.eye(3)) / 2.0
        axis = np.sqrt(np.maximum(np.diag(sym), 0.0))
        signs = np.array([1.0,
                          1.0 if sym[0, 1] >= 0 else -1.0,
                          1.0 if sym[0, 2] >= 0 else -1.0])
        axis = axis * signs
        axis /= np.linalg.norm(axis)
        return axis * angle
    axis = np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])
    axis /= 2.0 * np.sin(angle)
    return axis * angle


def _skew(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    zero = np.zeros_like(x)
    rows = [np.stack([zero, -z, y], axis=-1),
            np.stack([z, zero, -x], axis=-1),
            np.stack([-y, x, zero], axis=-1)]
    return np.stack(rows, axis=-2)


@dataclass(frozen=True)
class RigidTransform:
    """World-frame rigid transform: meters translation plus 6D rotation."""

    translation: np.ndarray  # (3,)
    rotation6d: np.ndarray  # (6,)

    def matrix(self) -> np.ndarray:
        return rot6d_to_matrix(self.rotation6d)

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.matrix().T + np.asarray(self.translation, dtype=np.float64)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.zeros(3), np.array([1.0, 0, 0, 0, 1.0, 0]))


# differentiable variants -----------------------------------------------------

def cross_t(a: dk.Tensor, b: dk.Tensor) -> dk.Tensor:
    """Cross product over the last axis of (..., 3) tensors."""
    ax, ay, az = (dk.narrow(a, -1, i, 1) for i in range(3))
    bx, by, bz = (dk.narrow(b, -1, i, 1) for i in range(3))
    return dk.concat([ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx], axis=-1)


def rot6d_to_matrix_t(r: dk.Tensor) -> dk.Tensor:
    """Differentiable Gram-Schmidt: (..., 6) tensor to (..., 3, 3) matrices.

    Norm denominators are floored at 1e-12 so degenerate inputs stay finite;
    callers feed non-degenerate rotations.
    """
    a1 = dk.narrow(r, -1, 0, 3)
    a2 = dk.narrow(r, -1, 3, 3)
    n1 = dk.sqrt(dk.clamp_min(dk.reduce_sum(a1 * a1, axis=-1, keepdims=True), 1e-12))
    b1 = a1 / n1
    res = a2 - dk.reduce_sum(b1 * a2, axis=-1, keepdims=True) * b1
    n2 = dk.sqrt(dk.clamp_min(dk.reduce_sum(res * res, axis=-1, keepdims=True), 1e-12))
    b2 = res / n2
    b3 = cross_t(b1, b2)
    return dk.stack([b1, b2, b3], axis=b1.ndim)  # columns along the new last axis


def axis_angle_to_matrix_t(aa: dk.Tensor) -> dk.Tensor:
    """Differentiable Rodrigues on (..., 3) tensors with the Taylor branch."""
    sq = dk.reduce_sum(aa * aa, axis=-1, keepdims=True)  # (..., 1)
    theta = dk.sqrt(dk.clamp_min(sq, 1e-30))
    x, y, z = (dk.narrow(aa, -1, i, 1) for i in range(3))
    zero = x * 0.0
    row0 = dk.concat([zero, -z, y], axis=-1)
    row1 = dk.concat([z, zero, -x], axis=-1)
    row2 = dk.concat([-y, x, zero], axis=-1)
    k = dk.stack([row0, row1, row2], axis=aa.ndim - 1)  # (..., 3, 3)
    kk = dk.matmul(k, k)
    eye = dk.Tensor(np.broadcast_to(np.eye(3, dtype=np.float32), k.shape).copy())
    taylor = eye + k + 0.5 * kk
    safe = dk.clamp_min(theta, 1e-12)
    st = dk.sin(theta) / safe
    ct = (1.0 - dk.cos(theta)) / (safe * safe)
    general = eye + st.reshape(st.shape + (1,)) * k + ct.reshape(ct.shape + (1,)) * kk
    mask = (theta.values > 1e-6)[..., None]  # (..., 1, 1)
    return dk.where_mask(mask, general, taylor)


# ---------------------------------------------------------------------------
# triangle meshes
# ---------------------------------------------------------------------------

@dataclass
class TriMesh:
    """Triangle mesh: vertices (V, 3) meters, faces (T, 3) vertex indices."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and self.faces.max() >= len(self.vertices):
            raise MeshFormatError("face index exceeds vertex count")
        if self.faces.size and self.faces.min() < 0:
            raise MeshFormatError("negative face index")

    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]  # (T, 3, 3)

    def transformed(self, matrix, translation) -> "TriMesh":
        verts = self.vertices @ np.asarray(matrix).T + np.asarray(translation)
        return TriMesh(verts, self.faces.copy())


def face_areas(mesh: TriMesh) -> np.ndarray:
    tri = mesh.triangles()
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    return 0.5 * np.linalg.norm(cross, axis=1)


def is_watertight(mesh: TriMesh) -> bool:
    """Every directed edge must be matched by exactly one opposite edge."""
    if mesh.faces.size == 0:
        return False
    edges = {}
    for a, b, c in mesh.faces:
        for u, v in ((a, b), (b, c), (c, a)):
            key = (int(u), int(v))
            edges[key] = edges.get(key, 0) + 1
    for (u, v), count in edges.items():
        if count != 1 or edges.get((v, u), 0) != 1:
            return False
    return True


def save_mesh(path, mesh: TriMesh) -> None:
    """ASCII Wavefront-style triangle mesh: `v x y z` and 1-based `f i j k`.

    Coordinates use %.17g so vertices round-trip float64 exactly.
    """
    with open(path, "w", encoding="utf-8") as fh:
        for x, y, z in mesh.vertices:
            fh.write(f"v {x:.17g} {y:.17g} {z:.17g}\n")
        for a, b, c in mesh.faces + 1:
            fh.write(f"f {a} {b} {c}\n")


def load_mesh(path) -> TriMesh:
    """Parse the `v`/`f` subset; rejects polygons with more than 3 vertices.

    Unknown keywords (vn, vt, comments, ...) are skipped. Faces may use the
    `i/t/n` slash forms; only vertex indices are read. Zero-area faces are
    dropped during load-time cleanup.
    """
    vertices: list[list[float]] = []
    faces: list[list[int]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "v":
                if len(parts) != 4:
                    raise MeshFormatError(f"{path}:{lineno}: vertex needs 3 coordinates")
                try:
                    vertices.append([float(p) for p in parts[1:]])
                except ValueError as exc:
                    raise MeshFormatError(f"{path}:{lineno}: bad vertex number") from exc
            elif parts[0] == "f":
                if len(parts) != 4:
                    raise MeshFormatError(
                        f"{path}:{lineno}: only triangles are supported "
                        f"(face has {len(parts) - 1} vertices)")
                idx = []
                for token in parts[1:]:
                    head = token.split("/")[0]
                    try:
                        value = int(head)
                    except ValueError as exc:
                        raise MeshFormatError(f"{path}:{lineno}: bad face index") from exc
                    if value < 1:
                        raise MeshFormatError(f"{path}:{lineno}: face indices are 1-based")
                    idx.append(value - 1)
                faces.append(idx)
    if not vertices or not faces:
        raise MeshFormatError(f"{path}: mesh has no vertices or no faces")
    mesh = TriMesh(np.array(vertices), np.array(faces))
    keep = face_areas(mesh) > 1e-12
    return TriMesh(mesh.vertices, mesh.faces[keep])


# ---------------------------------------------------------------------------
# procedural primitives (watertight by construction, outward orientation)
# ---------------------------------------------------------------------------

def make_box(size, center=(0.0, 0.0, 0.0)) -> TriMesh:
    sx, sy, sz = (float(s) / 2.0 for s in size)
    cx, cy, cz = center
    verts = np.array([
        [-sx, -sy, -sz], [sx, -sy, -sz], [sx, sy, -sz], [-sx, sy, -sz],
        [-sx, -sy, sz], [sx, -sy, sz], [sx, sy, sz], [-sx, sy, sz],
    ]) + np.array([cx, cy, cz])
    faces = np.array([
        [0, 2, 1], [0, 3, 2],  # bottom (-z)
        [4, 5, 6], [4, 6, 7],  # top (+z)
        [0, 1, 5], [0, 5, 4],  # -y
        [2, 3, 7], [2, 7, 6],  # +y
        [0, 4, 7], [0, 7, 3],  # -x
        [1, 2, 6], [1, 6, 5],  # +x
    ])
    return TriMesh(verts, faces)


def _axis_frame(direction: np.ndarray) -> np.ndarray:
    """Orthonormal frame whose third column is the given direction."""
    d = direction / np.linalg.norm(direction)
    ref = np.array([1.0, 0, 0]) if abs(d[0]) < 0.9 else np.array([0, 1.0, 0])
    u = np.cross(ref, d)
    u /= np.linalg.norm(u)
    v = np.cross(d, u)
    return np.stack([u, v, d], axis=1)


def _lathe(profile_r, profile_z, n_seg: int) -> TriMesh:
    """Surface of revolution about +z with pole caps; profile runs bottom to top."""
    rings = []
    verts = [np.array([0.0, 0.0, profile_z[0]])]  # bottom pole
    for r, z in zip(profile_r, profile_z):
        ring = []
        for s in range(n_seg):
            ang = 2.0 * np.pi * s / n_seg
            ring.append(len(verts))
            verts.append(np.array([r * np.cos(ang), r * np.sin(ang), z]))
        rings.append(ring)
    top = len(verts)
    verts.append(np.array([0.0, 0.0, profile_z[-1]]))  # top pole
    faces = []
    first = rings[0]
    for s in range(n_seg):
        faces.append([0, first[(s + 1) % n_seg], first[s]])
    for lower, upper in zip(rings[:-1], rings[1:]):
        for s in range(n_seg):
            s2 = (s + 1) % n_seg
            faces.append([lower[s], upper[s2], upper[s]])
            faces.append([lower[s], lower[s2], upper[s2]])
    last = rings[-1]
    for s in range(n_seg):
        faces.append([top, last[s], last[(s + 1) % n_seg]])
    return TriMesh(np.array(verts), np.array(faces))


def make_uv_sphere(radius: float, center=(0.0, 0.0, 0.0), n_lat: int = 8,
                   n_seg: int = 12) -> TriMesh:
    lat = np.linspace(-np.pi / 2, np.pi / 2, n_lat + 1)[1:-1]
    mesh = _lathe(radius * np.cos(lat), radius * np.sin(lat), n_seg)
    # _lathe puts poles at the profile end heights; move them to +-radius
    mesh.vertices[0] = [0, 0, -radius]
    mesh.vertices[-1] = [0, 0, radius]
    return TriMesh(mesh.vertices + np.asarray(center, dtype=np.float64), mesh.faces)


def make_capsule(p0, p1, radius: float, n_seg: int = 8, n_cap: int = 3) -> TriMesh:
    """Capsule from p0 to p1: cylinder with hemispherical caps, watertight."""
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    axis = p1 - p0
    height = np.linalg.norm(axis)
    if height < 1e-9:
        return make_uv_sphere(radius, p0, n_lat=2 * n_cap, n_seg=n_seg)
    lat = np.linspace(-np.pi / 2, 0.0, n_cap + 1)[1:]
    r_lo = radius * np.cos(lat)
    z_lo = radius * np.sin(lat)
    profile_r = np.concatenate([r_lo, r_lo[::-1]])
    profile_z = np.concatenate([z_lo, height - z_lo[::-1]])
    mesh = _lathe(profile_r, profile_z, n_seg)
    mesh.vertices[0] = [0, 0, -radius]
    mesh.vertices[-1] = [0, 0, height + radius]
    frame = _axis_frame(axis)
    verts = mesh.vertices @ frame.T + p0
    return TriMesh(verts, mesh.faces)


def make_cylinder(p0, p1, radius: float, n_seg: int = 10) -> TriMesh:
    """Closed cylinder (flat caps) from p0 to p1."""
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    height = np.linalg.norm(p1 - p0)
    mesh = _lathe(np.array([radius, radius]), np.array([0.0, height]), n_seg)
    frame = _axis_frame(p1 - p0)
    verts = mesh.vertices @ frame.T + p0
    return TriMesh(verts, mesh.faces)


def merge_meshes(meshes) -> TriMesh:
    verts, faces, offset = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + offset)
        offset += len(m.vertices)
    return TriMesh(np.concatenate(verts), np.concatenate(faces))


# ---------------------------------------------------------------------------
# sampling and queries
# ---------------------------------------------------------------------------

def sample_surface_points(mesh: TriMesh, n: int, seed: int) -> np.ndarray:
    """Area-weighted uniform surface samples, deterministic for a given seed.

    Sample each object once and reuse the cloud everywhere downstream.
    """
    if mesh.faces.size == 0:
        raise MeshFormatError("cannot sample an empty mesh")
    if n < 1:
        raise ValueError("need at least one sample")
    areas = face_areas(mesh)
    rng = np.random.default_rng(seed)
    face_ids = rng.choice(len(areas), size=n, p=areas / areas.sum())
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    tri = mesh.triangles()[face_ids]
    offset = u[:, None] * (tri[:, 1] - tri[:, 0]) + v[:, None] * (tri[:, 2] - tri[:, 0])
    return tri[:, 0] + offset


def farthest_point_subset(points, m: int, seed: int) -> np.ndarray:
    """Greedy farthest-point subsample; returns m indices into points."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    if m > n:
        raise ValueError(f"requested {m} points from a cloud of {n}")
    if m < 1:
        raise ValueError("need at least one point")
    rng = np.random.default_rng(seed)
    start = int(rng.integers(n))
    chosen = [start]
    dist = np.linalg.norm(points - points[start], axis=1)
    for _ in range(m - 1):
        nxt = int(np.argmax(dist))  # ties resolve to the lowest index
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    return np.array(chosen, dtype=np.int64)


def closest_distance(p, cloud) -> tuple[float, int]:
    """Minimum Euclidean distance from p to the cloud and the winning index.

    Ties break to the lowest index.
    """
    cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if len(cloud) == 0:
        raise ValueError("empty point cloud")
    d = np.linalg.norm(cloud - np.asarray(p, dtype=np.float64), axis=1)
    idx = int(np.argmin(d))
    return float(d[idx]), idx


def contact_distances(markers, cloud) -> np.ndarray:
    """Closest-point distance for every marker row: (M, 3) x (N, 3) -> (M,)."""
    markers = np.asarray(markers, dtype=np.float64)
    cloud = np.asarray(cloud, dtype=np.float64)
    diff = markers[:, None, :] - cloud[None, :, :]
    return np.sqrt((diff * diff).sum(axis=2).min(axis=1))


def winding_numbers(points, mesh: TriMesh, chunk: int = 4096) -> np.ndarray:
    """Generalized winding number of each point w.r.t. the mesh surface.

    Handles unions of overlapping closed components (values add per
    component), which ray-parity tests miscount.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    tri = mesh.triangles()  # (T, 3, 3)
    out = np.empty(len(points))
    for lo in range(0, len(points), chunk):
        p = points[lo:lo + chunk]
        a = tri[None, :, 0] - p[:, None]  # (P, T, 3)
        b = tri[None, :, 1] - p[:, None]
        c = tri[None, :, 2] - p[:, None]
        la = np.linalg.norm(a, axis=2)
        lb = np.linalg.norm(b, axis=2)
        lc = np.linalg.norm(c, axis=2)
        num = np.einsum("pti,pti->pt", a, np.cross(b, c))
        den = (la * lb * lc + np.einsum("pti,pti->pt", a, b) * lc
               + np.einsum("pti,pti->pt", b, c) * la
               + np.einsum("pti,pti->pt", c, a) * lb)
        omega = 2.0 * np.arctan2(num, den)
        out[lo:lo + chunk] = omega.sum(axis=1) / (4.0 * np.pi)
    return out


def points_in_mesh(points, mesh: TriMesh) -> np.ndarray:
    """Boolean containment for each point; mesh must be watertight."""
    return np.abs(winding_numbers(points, mesh)) > 0.5


def point_in_mesh(p, mesh: TriMesh) -> bool:
    return bool(points_in_mesh(np.asarray(p).reshape(1, 3), mesh)[0])
