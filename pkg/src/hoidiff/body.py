"""Simplified differentiable skinned body with a 79-parameter layout.

Parameters per frame: pose (63 = 21 joints x 3 axis-angle), shape (10 blend
coefficients), global rotation (3 axis-angle), translation (3 meters); the
flattened order is pose | shape | global_rot | translation. The template is a
watertight union of capsule segments (plus a head sphere) rigged to a
22-joint skeleton, z up and y forward, root (pelvis) at the origin.

`body_forward` runs in float64 numpy; `marker_positions_graph` builds the
same kinematics as a float32 diffkit graph for gradient-based guidance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffkit as dk
from . import geom

NUM_JOINTS = 22
NUM_MARKERS = 128
PARAM_DIM = 79

JOINT_NAMES = [
    "root", "spine1", "spine2", "chest", "neck", "head",
    "l_collar", "l_shoulder", "l_elbow", "l_wrist",
    "r_collar", "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle", "l_toe",
    "r_hip", "r_knee", "r_ankle", "r_toe",
]

PARENTS = np.array([
    -1, 0, 1, 2, 3, 4,
    3, 6, 7, 8,
    3, 10, 11, 12,
    0, 14, 15, 16,
    0, 18, 19, 20,
], dtype=np.int64)

# rest offsets from parent joint, meters
_OFFSETS = np.array([
    [0.00, 0.00, 0.00],   # root
    [0.00, 0.00, 0.12],   # spine1
    [0.00, 0.00, 0.12],   # spine2
    [0.00, 0.00, 0.12],   # chest
    [0.00, 0.00, 0.11],   # neck
    [0.00, 0.00, 0.09],   # head
    [0.07, 0.00, 0.06],   # l_collar
    [0.10, 0.00, 0.00],   # l_shoulder
    [0.26, 0.00, 0.00],   # l_elbow
    [0.25, 0.00, 0.00],   # l_wrist
    [-0.07, 0.00, 0.06],  # r_collar
    [-0.10, 0.00, 0.00],  # r_shoulder
    [-0.26, 0.00, 0.00],  # r_elbow
    [-0.25, 0.00, 0.00],  # r_wrist
    [0.09, 0.00, -0.04],  # l_hip
    [0.00, 0.00, -0.40],  # l_knee
    [0.00, 0.00, -0.40],  # l_ankle
    [0.00, 0.13, -0.06],  # l_toe
    [-0.09, 0.00, -0.04],  # r_hip
    [0.00, 0.00, -0.40],  # r_knee
    [0.00, 0.00, -0.40],  # r_ankle
    [0.00, 0.13, -0.06],  # r_toe
], dtype=np.float64)

# body pieces: (bone joint, start joint, end joint or None, end nudge, radius)
_PIECES = [
    ("root", "root", "spine1", (0, 0, -0.08), 0.105),
    ("spine1", "spine1", "spine2", None, 0.100),
    ("spine2", "spine2", "chest", None, 0.105),
    ("chest", "chest", "neck", None, 0.090),
    ("neck", "neck", "head", None, 0.045),
    ("l_collar", "l_collar", "l_shoulder", None, 0.050),
    ("l_shoulder", "l_shoulder", "l_elbow", None, 0.045),
    ("l_elbow", "l_elbow", "l_wrist", None, 0.033),
    ("l_wrist", "l_wrist", None, (0.15, 0, 0), 0.026),
    ("r_collar", "r_collar", "r_shoulder", None, 0.050),
    ("r_shoulder", "r_shoulder", "r_elbow", None, 0.045),
    ("r_elbow", "r_elbow", "r_wrist", None, 0.033),
    ("r_wrist", "r_wrist", None, (-0.15, 0, 0), 0.026),
    ("l_hip", "l_hip", "l_knee", None, 0.070),
    ("l_knee", "l_knee", "l_ankle", None, 0.050),
    ("l_ankle", "l_ankle", "l_toe", (0, 0.02, 0), 0.036),
    ("r_hip", "r_hip", "r_knee", None, 0.070),
    ("r_knee", "r_knee", "r_ankle", None, 0.050),
    ("r_ankle", "r_ankle", "r_toe", (0, 0.02, 0), 0.036),
]

_HEAD_RADIUS = 0.085
_SHAPE_COUNT = 10
_SHAPE_MAX_DISP = 0.05  # meters at coefficient 1
_BLEND_SPAN = 0.25  # fraction of the bone near its base blended to the parent
_BLEND_MAX = 0.35
# pieces that keep their exact capsule geometry under shape blending, so
# gripping and load-bearing surfaces stay where the rig expects them
_SHAPE_FROZEN_BONES = {"root", "l_hip", "r_hip", "l_elbow", "r_elbow",
                       "l_wrist", "r_wrist", "l_ankle", "r_ankle"}


class BodyParamError(ValueError):
    """Body parameters of the wrong size or containing non-finite values."""


@dataclass(frozen=True)
class BodyParams:
    pose: np.ndarray  # (63,) axis-angle, joints 1..21
    shape: np.ndarray  # (10,)
    global_rot: np.ndarray  # (3,) axis-angle
    translation: np.ndarray  # (3,) meters

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.pose, self.shape, self.global_rot,
                               self.translation]).astype(np.float64)

    @staticmethod
    def from_vector(v) -> "BodyParams":
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        if v.shape[0] != PARAM_DIM:
            raise BodyParamError(f"expected {PARAM_DIM} parameters, got {v.shape[0]}")
        if not np.all(np.isfinite(v)):
            raise BodyParamError("non-finite body parameters")
        return BodyParams(v[:63].copy(), v[63:73].copy(), v[73:76].copy(),
                          v[76:79].copy())

    @staticmethod
    def rest() -> "BodyParams":
        return BodyParams(np.zeros(63), np.zeros(10), np.zeros(3), np.zeros(3))


@dataclass
class BodyTemplate:
    """Frozen skeleton, rest mesh, rig, blendshape fields, and marker set."""

    parents: np.ndarray  # (22,)
    offsets: np.ndarray  # (22, 3)
    mesh: geom.TriMesh  # rest-pose surface
    skin_indices: np.ndarray  # (V, 4) joint ids
    skin_weights: np.ndarray  # (V, 4) rows sum to 1
    shape_dirs: np.ndarray  # (10, V, 3) displacement fields
    marker_indices: np.ndarray  # (128,) vertex ids
    marker_joints: np.ndarray  # (128,) dominant joint per marker

    def rest_joints(self) -> np.ndarray:
        joints = np.zeros((NUM_JOINTS, 3))
        for j in range(1, NUM_JOINTS):
            joints[j] = joints[self.parents[j]] + self.offsets[j]
        return joints

    def ground_offset(self) -> float:
        """Height of the root above the lowest rest vertex (feet on z=0)."""
        return float(-self.mesh.vertices[:, 2].min())


def build_template(seed: int) -> BodyTemplate:
    """Deterministic body template; markers via farthest-point vertex sampling."""
    rest = np.zeros((NUM_JOINTS, 3))
    for j in range(1, NUM_JOINTS):
        rest[j] = rest[PARENTS[j]] + _OFFSETS[j]
    name_to_id = {n: i for i, n in enumerate(JOINT_NAMES)}

    pieces, piece_bones, spans = [], [], []
    for bone, start, end, nudge, radius in _PIECES:
        p0 = rest[name_to_id[start]].copy()
        if end is None:
            p1 = p0 + np.asarray(nudge, dtype=np.float64)
        else:
            p1 = rest[name_to_id[end]].copy()
            if nudge is not None:
                p0 = p0 + np.asarray(nudge, dtype=np.float64)
        pieces.append(geom.make_capsule(p0, p1, radius, n_seg=8, n_cap=2))
        piece_bones.append(name_to_id[bone])
        spans.append((p0, p1))
    head_center = rest[name_to_id["head"]] + np.array([0, 0.0, 0.06])
    pieces.append(geom.make_uv_sphere(_HEAD_RADIUS, head_center, n_lat=6, n_seg=10))
    piece_bones.append(name_to_id["head"])
    spans.append((head_center, head_center))

    mesh = geom.merge_meshes(pieces)
    nv = len(mesh.vertices)
    skin_indices = np.zeros((nv, 4), dtype=np.int64)
    skin_weights = np.zeros((nv, 4))
    cursor = 0
    for piece, bone, (p0, p1) in zip(pieces, piece_bones, spans):
        count = len(piece.vertices)
        rows = slice(cursor, cursor + count)
        parent = int(PARENTS[bone])
        skin_indices[rows, 0] = bone
        skin_weights[rows, 0] = 1.0
        axis = p1 - p0
        length = np.linalg.norm(axis)
        if parent >= 0 and length > 1e-9:
            u = np.clip((piece.vertices - p0) @ axis / (length * length), 0.0, 1.0)
            blend = _BLEND_MAX * np.clip(1.0 - u / _BLEND_SPAN, 0.0, 1.0)
            skin_indices[rows, 1] = parent
            skin_weights[rows, 1] = blend
            skin_weights[rows, 0] = 1.0 - blend
        cursor += count

    frozen = np.zeros(nv, dtype=bool)
    cursor = 0
    for piece, (bone, *_rest_spec) in zip(pieces, _PIECES + [("head",)]):
        count = len(piece.vertices)
        if bone in _SHAPE_FROZEN_BONES:
            frozen[cursor:cursor + count] = True
        cursor += count

    rng = np.random.default_rng(seed)
    shape_dirs = np.zeros((_SHAPE_COUNT, nv, 3))
    for s in range(_SHAPE_COUNT):
        freq = rng.uniform(1.0, 3.0, size=(3, 3))
        phase = rng.uniform(0.0, 2 * np.pi, size=3)
        amp = rng.uniform(0.5, 1.0, size=3)
        field = amp * np.sin(mesh.vertices @ freq.T + phase)
        peak = np.linalg.norm(field, axis=1).max()
        shape_dirs[s] = field * (_SHAPE_MAX_DISP / peak)
        shape_dirs[s, frozen] = 0.0

    marker_indices = geom.farthest_point_subset(mesh.vertices, NUM_MARKERS, seed)
    marker_joints = skin_indices[marker_indices, 0]
    return BodyTemplate(PARENTS.copy(), _OFFSETS.copy(), mesh, skin_indices,
                        skin_weights, shape_dirs, marker_indices, marker_joints)


def _global_transforms(template: BodyTemplate, params: BodyParams):
    """Per-joint world rotation (22, 3, 3) and translation (22, 3)."""
    local = geom.axis_angle_to_matrix(params.pose.reshape(21, 3))
    rot = np.empty((NUM_JOINTS, 3, 3))
    pos = np.empty((NUM_JOINTS, 3))
    rot[0] = geom.axis_angle_to_matrix(params.global_rot)
    pos[0] = params.translation
    for j in range(1, NUM_JOINTS):
        p = template.parents[j]
        rot[j] = rot[p] @ local[j - 1]
        pos[j] = rot[p] @ template.offsets[j] + pos[p]
    return rot, pos


def body_forward(template: BodyTemplate, params: BodyParams):
    """Pose the body: returns (surface TriMesh, marker positions (128, 3)).

    Linear blend skinning over the kinematic chain; differentiable in the
    graph path (`marker_positions_graph`), exact float64 here.
    """
    flat = params.flatten()
    if not np.all(np.isfinite(flat)):
        raise BodyParamError("non-finite body parameters")
    rot, pos = _global_transforms(template, params)
    rest = template.rest_joints()
    # per-joint affine [R | t - R rest]
    affine_t = pos - np.einsum("jab,jb->ja", rot, rest)
    v = template.mesh.vertices + np.einsum(
        "s,svk->vk", params.shape, template.shape_dirs)
    w = template.skin_weights  # (V, 4)
    idx = template.skin_indices
    blend_rot = np.einsum("vk,vkab->vab", w, rot[idx])
    blend_t = np.einsum("vk,vka->va", w, affine_t[idx])
    posed = np.einsum("vab,vb->va", blend_rot, v) + blend_t
    mesh = geom.TriMesh(posed, template.mesh.faces.copy())
    return mesh, posed[template.marker_indices].copy()


def marker_positions(template: BodyTemplate, params: BodyParams) -> np.ndarray:
    return body_forward(template, params)[1]


# ---------------------------------------------------------------------------
# differentiable path (float32 diffkit graph, batched over frames)
# ---------------------------------------------------------------------------

def marker_positions_graph(template: BodyTemplate, params: dk.Tensor) -> dk.Tensor:
    """Marker world positions (F, 128, 3) from a (F, 79) parameter tensor.

    Same kinematics as body_forward, recorded on the active tape so guidance
    can differentiate through pose, shape, rotation, and translation.
    """
    f = params.shape[0]
    pose = dk.reshape(dk.narrow(params, 1, 0, 63), (f, 21, 3))
    shape = dk.narrow(params, 1, 63, 10)
    grot = dk.narrow(params, 1, 73, 3)
    transl = dk.narrow(params, 1, 76, 3)

    local = geom.axis_angle_to_matrix_t(pose)  # (F, 21, 3, 3)
    rot = [geom.axis_angle_to_matrix_t(grot)]  # (F, 3, 3) per joint
    pos = [dk.reshape(transl, (f, 3, 1))]
    offsets32 = template.offsets.astype(np.float32)
    for j in range(1, NUM_JOINTS):
        p = int(template.parents[j])
        r_loc = dk.reshape(dk.narrow(local, 1, j - 1, 1), (f, 3, 3))
        rot.append(dk.matmul(rot[p], r_loc))
        off = dk.Tensor(offsets32[j].reshape(3, 1))
        pos.append(dk.matmul(rot[p], off) + pos[p])

    rot_all = dk.stack(rot, axis=1)  # (F, 22, 3, 3)
    pos_all = dk.stack(pos, axis=1)  # (F, 22, 3, 1)

    m_idx = template.marker_indices
    rest = template.rest_joints().astype(np.float32)
    base = template.mesh.vertices[m_idx].astype(np.float32)  # (128, 3)
    dirs = template.shape_dirs[:, m_idx, :].astype(np.float32)  # (10, 128, 3)
    disp = dk.matmul(shape, dk.Tensor(dirs.reshape(_SHAPE_COUNT, -1)))
    v = dk.reshape(disp, (f, NUM_MARKERS, 3)) + dk.Tensor(base)
    v = dk.reshape(v, (f, NUM_MARKERS, 3, 1))

    posed = None
    for k in range(template.skin_indices.shape[1]):
        w_col = template.skin_weights[m_idx, k]
        if not np.any(w_col):
            continue
        idx = template.skin_indices[m_idx, k]
        w = dk.Tensor(w_col.astype(np.float32).reshape(1, NUM_MARKERS, 1, 1))
        r_sel = dk.take(rot_all, idx, axis=1)  # (F, 128, 3, 3)
        t_sel = dk.take(pos_all, idx, axis=1)  # (F, 128, 3, 1)
        rest_sel = dk.Tensor(rest[idx].reshape(1, NUM_MARKERS, 3, 1))
        term = dk.matmul(r_sel, v - rest_sel) + t_sel
        contrib = w * term
        posed = contrib if posed is None else posed + contrib
    return dk.reshape(posed, (f, NUM_MARKERS, 3))
