"""Frame/sequence data model, contact labels, synthetic dataset, and file I/O.

A frame is 216 float32 channels: body parameters (79) | contact distances
(128) | object transform (9, translation then 6D rotation), all world frame.
Contact channels are derived: they always equal the recomputed closest-point
distances from the body markers to the object's sampled surface cloud.

The synthetic dataset couples each scripted interaction to a body part (a
carried box follows the hands, a stool seat meets the pelvis), so contact
labels are small exactly at the coupled markers.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import body as bodymod
from . import geom

FRAME_DIM = 216
BODY_DIM = 79
CONTACT_DIM = 128
OBJECT_DIM = 9
CLOUD_SIZE = 256
CLOUD_SEED = 0  # every object cloud is sampled once with this seed and reused

BODY_SLICE = slice(0, 79)
CONTACT_SLICE = slice(79, 207)
OBJECT_SLICE = slice(207, 216)

_SEQ_MAGIC = b"CGHOI1"
_SEQ_VERSION = 1


class SequenceFormatError(ValueError):
    """Sequence file with a bad magic, version, or truncated payload."""


class DatasetError(ValueError):
    """Unknown script name or inconsistent dataset request."""


# ---------------------------------------------------------------------------
# frames and sequences
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Frame:
    body: np.ndarray  # (79,)
    contact: np.ndarray  # (128,) nonnegative meters
    object: np.ndarray  # (9,) translation + 6D rotation


def pack_frames(body, contact, obj) -> np.ndarray:
    """Stack per-frame channel blocks into the canonical (F, 216) layout."""
    out = np.concatenate([np.asarray(body), np.asarray(contact),
                          np.asarray(obj)], axis=-1).astype(np.float32)
    if out.shape[-1] != FRAME_DIM:
        raise ValueError(f"frame width {out.shape[-1]} != {FRAME_DIM}")
    return out


def split_frames(frames) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    frames = np.asarray(frames)
    return (frames[..., BODY_SLICE], frames[..., CONTACT_SLICE],
            frames[..., OBJECT_SLICE])


@dataclass
class ConditionSpec:
    text_tokens: list[int]
    object_cloud: np.ndarray  # (256, 3) float32
    object_mesh_ref: str = ""


@dataclass
class Sequence:
    frames: np.ndarray  # (F, 216) float32
    fps: int
    condition: ConditionSpec
    id: str
    text: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[1] != FRAME_DIM:
            raise ValueError(f"sequence frames must be (F, {FRAME_DIM}), "
                             f"got {self.frames.shape}")

    def __len__(self) -> int:
        return self.frames.shape[0]

    def frame(self, i: int) -> Frame:
        row = self.frames[i]
        return Frame(row[BODY_SLICE].copy(), row[CONTACT_SLICE].copy(),
                     row[OBJECT_SLICE].copy())

    def object_transform(self, i: int) -> geom.RigidTransform:
        row = self.frames[i, OBJECT_SLICE].astype(np.float64)
        return geom.RigidTransform(row[:3], row[3:])

    def body_params(self, i: int) -> bodymod.BodyParams:
        return bodymod.BodyParams.from_vector(self.frames[i, BODY_SLICE])


def validate_sequence(seq: Sequence) -> None:
    """Frame invariants: width, finiteness, nonnegative contact channels."""
    if not np.all(np.isfinite(seq.frames)):
        raise ValueError(f"sequence {seq.id}: non-finite frame values")
    if seq.frames[:, CONTACT_SLICE].min() < 0.0:
        raise ValueError(f"sequence {seq.id}: negative contact distance")
    if len(seq.condition.object_cloud) != CLOUD_SIZE:
        raise ValueError(f"sequence {seq.id}: cloud size != {CLOUD_SIZE}")


# ---------------------------------------------------------------------------
# text tokens
# ---------------------------------------------------------------------------

UNK_TOKEN = "<unk>"


def build_vocab(texts) -> list[str]:
    words = set()
    for t in texts:
        words.update(t.lower().split())
    return [UNK_TOKEN] + sorted(words)


def tokenize(text: str, vocab: list[str]) -> list[int]:
    index = {w: i for i, w in enumerate(vocab)}
    return [index.get(w, 0) for w in text.lower().split()]


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

@dataclass
class Normalizer:
    """Per-channel z-score over the 216 frame channels; std floored at 1e-8."""

    mean: np.ndarray
    std: np.ndarray

    @staticmethod
    def fit(frame_rows: np.ndarray) -> "Normalizer":
        if frame_rows.size == 0:
            raise ValueError("cannot fit a normalizer on an empty set")
        rows = np.asarray(frame_rows, dtype=np.float64).reshape(-1, FRAME_DIM)
        mean = rows.mean(axis=0)
        std = np.maximum(rows.std(axis=0), 1e-8)
        return Normalizer(mean.astype(np.float32), std.astype(np.float32))

    def normalize(self, frames) -> np.ndarray:
        return ((np.asarray(frames) - self.mean) / self.std).astype(np.float32)

    def denormalize(self, frames) -> np.ndarray:
        return (np.asarray(frames) * self.std + self.mean).astype(np.float32)


def fit_normalizer(sequences) -> Normalizer:
    rows = np.concatenate([s.frames for s in sequences], axis=0)
    return Normalizer.fit(rows)


# ---------------------------------------------------------------------------
# contact labels
# ---------------------------------------------------------------------------

def compute_contact_labels(template: bodymod.BodyTemplate,
                           params: bodymod.BodyParams,
                           transform: geom.RigidTransform,
                           canonical_cloud) -> np.ndarray:
    """Unsigned distance from each marker to the transformed object cloud."""
    markers = bodymod.marker_positions(template, params)
    return geom.contact_distances(markers, transform.apply(canonical_cloud))


def contact_channels_for(template, body_mat, obj_mat, canonical_cloud) -> np.ndarray:
    """Contact labels for every frame: (F, 79) x (F, 9) -> (F, 128)."""
    out = np.empty((len(body_mat), CONTACT_DIM))
    for i in range(len(body_mat)):
        params = bodymod.BodyParams.from_vector(body_mat[i])
        tr = geom.RigidTransform(np.asarray(obj_mat[i][:3], dtype=np.float64),
                                 np.asarray(obj_mat[i][3:], dtype=np.float64))
        out[i] = compute_contact_labels(template, params, tr, canonical_cloud)
    return out


# ---------------------------------------------------------------------------
# sequence files (binary, little-endian)
# ---------------------------------------------------------------------------

def save_sequence(path, seq: Sequence) -> None:
    """magic CGHOI1 | u32 version | u32 frames | u32 fps | tokens | cloud | frames."""
    tokens = np.asarray(seq.condition.text_tokens, dtype="<u4")
    cloud = np.asarray(seq.condition.object_cloud, dtype="<f4").reshape(-1, 3)
    frames = np.asarray(seq.frames, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_SEQ_MAGIC)
        fh.write(struct.pack("<IIII", _SEQ_VERSION, frames.shape[0], seq.fps,
                             len(tokens)))
        fh.write(tokens.tobytes())
        fh.write(struct.pack("<I", cloud.shape[0]))
        fh.write(cloud.tobytes())
        fh.write(frames.tobytes())


def load_sequence(path, seq_id: str | None = None) -> Sequence:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:6] != _SEQ_MAGIC:
        raise SequenceFormatError(f"{path}: bad magic {blob[:6]!r}")
    try:
        version, frame_count, fps, token_count = struct.unpack_from("<IIII", blob, 6)
    except struct.error as exc:
        raise SequenceFormatError(f"{path}: truncated header") from exc
    if version != _SEQ_VERSION:
        raise SequenceFormatError(f"{path}: unsupported version {version}")
    off = 6 + 16
    need = token_count * 4
    if len(blob) < off + need:
        raise SequenceFormatError(f"{path}: truncated token table")
    tokens = np.frombuffer(blob, dtype="<u4", count=token_count, offset=off)
    off += need
    if len(blob) < off + 4:
        raise SequenceFormatError(f"{path}: truncated cloud header")
    (cloud_size,) = struct.unpack_from("<I", blob, off)
    off += 4
    need = cloud_size * 3 * 4
    if len(blob) < off + need:
        raise SequenceFormatError(f"{path}: truncated cloud payload")
    cloud = np.frombuffer(blob, dtype="<f4", count=cloud_size * 3,
                          offset=off).reshape(cloud_size, 3)
    off += need
    need = frame_count * FRAME_DIM * 4
    if len(blob) < off + need:
        raise SequenceFormatError(f"{path}: truncated frame payload")
    frames = np.frombuffer(blob, dtype="<f4", count=frame_count * FRAME_DIM,
                           offset=off).reshape(frame_count, FRAME_DIM)
    if len(blob) != off + need:
        raise SequenceFormatError(f"{path}: trailing bytes after frames")
    if seq_id is None:
        name = str(path)
        seq_id = name.rsplit("/", 1)[-1].rsplit(".", 1)[0]
    cond = ConditionSpec(list(map(int, tokens)), cloud.astype(np.float32))
    return Sequence(frames.astype(np.float32), int(fps), cond, seq_id)


# ---------------------------------------------------------------------------
# object catalog
# ---------------------------------------------------------------------------

def make_object_mesh(name: str) -> geom.TriMesh:
    """Canonical object meshes, centered at the origin, meters."""
    if name == "box":
        return geom.make_box((0.30, 0.24, 0.20))
    if name == "board":
        return geom.make_box((0.60, 0.40, 0.04))
    if name == "stool":
        seat = geom.make_box((0.32, 0.32, 0.05), center=(0, 0, 0.175))
        column = geom.make_box((0.05, 0.05, 0.356), center=(0, 0, -0.022))
        return geom.merge_meshes([seat, column])
    if name == "bar":
        return geom.make_cylinder((-0.40, 0, 0), (0.40, 0, 0), 0.035, n_seg=10)
    raise DatasetError(f"unknown object '{name}'")


# resting height of the canonical center when the object sits on the ground
_REST_Z = {"box": 0.10, "board": 0.02, "stool": 0.20, "bar": 0.035}

OBJECT_NAMES = ["box", "board", "stool", "bar"]


@dataclass
class ObjectAsset:
    name: str
    mesh: geom.TriMesh
    cloud: np.ndarray  # (256, 3) float32, canonical frame


def build_objects() -> dict[str, ObjectAsset]:
    assets = {}
    for name in OBJECT_NAMES:
        mesh = make_object_mesh(name)
        cloud = geom.sample_surface_points(mesh, CLOUD_SIZE, CLOUD_SEED)
        assets[name] = ObjectAsset(name, mesh, cloud.astype(np.float32))
    return assets


# ---------------------------------------------------------------------------
# scripted interactions
# ---------------------------------------------------------------------------

ACTIONS = ["lift", "carry", "push", "sit", "setdown", "pickup"]

_TEXT_TEMPLATES = {
    "lift": "lift the {obj}",
    "carry": "carry the {obj} forward",
    "push": "push the {obj}",
    "sit": "sit down on the {obj}",
    "setdown": "set the {obj} down",
    "pickup": "pick up the {obj}",
}

# (action, object) pairs in the catalog; sit and push are limited to the
# stool, the one object tall enough to sit on or shove at standing height
SCRIPT_PAIRS = [(a, o) for a in ("lift", "carry", "setdown", "pickup")
                for o in OBJECT_NAMES]
SCRIPT_PAIRS += [("push", "stool"), ("sit", "stool")]

# the six canonical scripts stay in the train split
_REQUIRED_TRAIN = [("lift", "box"), ("carry", "box"), ("push", "stool"),
                   ("sit", "stool"), ("setdown", "board"), ("pickup", "bar")]


def script_text(action: str, obj: str) -> str:
    if action not in _TEXT_TEMPLATES:
        raise DatasetError(f"unknown script '{action}'")
    return _TEXT_TEMPLATES[action].format(obj=obj)


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _ramp(tau, t0, t1):
    return _smoothstep((tau - t0) / max(t1 - t0, 1e-9))


def _joint(pose, joint_id, axis, values):
    pose[:, (joint_id - 1) * 3 + axis] += values


_J = {n: i for i, n in enumerate(bodymod.JOINT_NAMES)}


def _bow(pose, amount):
    """Forward pitch distributed over the three spine joints.

    The spine points up, so forward flexion is a negative rotation about x
    (the thighs, pointing down, flex forward with positive rotation).
    """
    for name in ("spine1", "spine2", "chest"):
        _joint(pose, _J[name], 0, -amount / 3.0)


_SPLAY_RATE = 0.5  # knees swing outward as the squat deepens


def _squat(pose, amount):
    """Hip/knee/ankle flexion that keeps the feet planted under the root.

    Knees splay outward proportionally to depth so a deep squat clears
    objects placed in front of the body.
    """
    amount = np.broadcast_to(np.asarray(amount, dtype=np.float64),
                             (pose.shape[0],))
    # R_y(-phi) tips the (downward) thigh toward +x, so left splays with -phi
    for side_sign, hip, knee, ankle in ((-1.0, "l_hip", "l_knee", "l_ankle"),
                                        (1.0, "r_hip", "r_knee", "r_ankle")):
        for i, amt in enumerate(amount):
            if abs(amt) < 1e-12:
                continue
            splay = _SPLAY_RATE * amt * side_sign
            rot = (geom.axis_angle_to_matrix(np.array([amt, 0.0, 0.0]))
                   @ geom.axis_angle_to_matrix(np.array([0.0, splay, 0.0])))
            pose[i, (_J[hip] - 1) * 3:(_J[hip] - 1) * 3 + 3] += \
                geom.matrix_to_axis_angle(rot)
        _joint(pose, _J[knee], 0, -2.0 * amount)
        _joint(pose, _J[ankle], 0, amount)


def _rotvec_between(a, b) -> np.ndarray:
    """Minimal axis-angle rotating unit vector a onto unit vector b."""
    axis = np.cross(a, b)
    s = np.linalg.norm(axis)
    c = float(np.dot(a, b))
    if s < 1e-9:
        if c > 0:
            return np.zeros(3)
        perp = np.cross(a, [1.0, 0, 0])
        if np.linalg.norm(perp) < 1e-6:
            perp = np.cross(a, [0, 1.0, 0])
        return perp / np.linalg.norm(perp) * np.pi
    return axis / s * np.arctan2(s, c)


def _posed_vertices(template, rot, pos, vert_ids):
    """LBS of selected template vertices; assumes their shape fields are zero."""
    rest = template.rest_joints()
    v = template.mesh.vertices[vert_ids]
    idx = template.skin_indices[vert_ids]
    w = template.skin_weights[vert_ids]
    affine_t = pos - np.einsum("jab,jb->ja", rot, rest)
    blend_rot = np.einsum("vk,vkab->vab", w, rot[idx])
    blend_t = np.einsum("vk,vka->va", w, affine_t[idx])
    return np.einsum("vab,vb->va", blend_rot, v) + blend_t


def _solve_arm(pose_row, m, rot, pos, target, r_yaw, twist_mode, bend=None):
    """Write shoulder/elbow/wrist rotations aiming one arm at target."""
    sign, l1, l2 = m["sign"], m["l1"], m["l2"]
    p_s = pos[m["sh"]]
    u = target - p_s
    d = np.linalg.norm(u)
    if d < 1e-9:
        return
    u /= d
    d = np.clip(d, abs(l1 - l2) + 1e-3, (l1 + l2) * 0.995)
    # elbow bends outward and slightly back
    hint = r_yaw @ np.array([sign, -0.3, 0.0])
    w = hint - (hint @ u) * u
    if np.linalg.norm(w) < 1e-6:
        w = np.array([0.0, 0.0, 1.0]) - u[2] * u
    w /= np.linalg.norm(w)
    cos_alpha = np.clip((l1 * l1 + d * d - l2 * l2) / (2 * l1 * d), -1.0, 1.0)
    sin_alpha = np.sqrt(1.0 - cos_alpha ** 2)
    upper = cos_alpha * u + sin_alpha * w
    lower = p_s + d * u - (p_s + l1 * upper)
    lower /= np.linalg.norm(lower)

    r_parent = rot[m["sh_parent"]]
    rest_dir = r_parent @ np.array([sign, 0.0, 0.0])
    rv_sh_world = _rotvec_between(rest_dir, upper)
    r_sh_world = geom.axis_angle_to_matrix(rv_sh_world) @ r_parent
    pose_row[(m["sh"] - 1) * 3:(m["sh"] - 1) * 3 + 3] = r_parent.T @ rv_sh_world
    rv_el_world = _rotvec_between(upper, lower)
    pose_row[(m["el"] - 1) * 3:(m["el"] - 1) * 3 + 3] = r_sh_world.T @ rv_el_world
    if twist_mode is None:
        return
    if twist_mode == "inward":
        t_raw = r_yaw @ np.array([-sign, 0.0, 0.0])
    elif twist_mode == "down":
        t_raw = np.array([0.0, 0.0, -1.0])
    else:  # forward
        t_raw = r_yaw @ np.array([0.0, 1.0, 0.0])
    r_wr_parent = geom.axis_angle_to_matrix(rv_el_world) @ r_sh_world
    hand_dir = lower
    r_bend = np.eye(3)
    if bend is not None:
        kind, amount = bend
        if kind == "along":
            # wrap grip: the hand turns parallel to the gripped bar
            hand_dir = r_yaw @ np.array([sign, 0.0, 0.0])
        elif kind == "out":
            hand_dir = lower + amount * (r_yaw @ np.array([sign, 0.0, 0.0]))
        elif kind == "down":
            hand_dir = lower + amount * np.array([0.0, 0.0, -1.0])
        elif kind == "back":
            hand_dir = lower + amount * (r_yaw @ np.array([0.0, -1.0, 0.0]))
        hand_dir = hand_dir / np.linalg.norm(hand_dir)
        r_bend = geom.axis_angle_to_matrix(_rotvec_between(lower, hand_dir))
    radial = (r_bend @ r_wr_parent) @ m["wrist_off"]
    radial = radial - (radial @ hand_dir) * hand_dir
    t_vec = t_raw - (t_raw @ hand_dir) * hand_dir
    r_total = r_bend
    if np.linalg.norm(radial) > 1e-6 and np.linalg.norm(t_vec) > 1e-6:
        radial /= np.linalg.norm(radial)
        t_vec /= np.linalg.norm(t_vec)
        psi = np.arctan2(hand_dir @ np.cross(radial, t_vec), radial @ t_vec)
        r_total = geom.axis_angle_to_matrix(hand_dir * psi) @ r_bend
    local = r_wr_parent.T @ r_total @ r_wr_parent
    pose_row[(m["wr"] - 1) * 3:(m["wr"] - 1) * 3 + 3] = \
        geom.matrix_to_axis_angle(local)


def _point_arms(template, pose, shape, yaw, translation, x_sep, targets_yz,
                twist_mode=None, bend=None, polish: int = 2):
    """Two-bone arm IK: the hand-marker centroids track per-frame targets.

    targets_yz is (F, 2): forward offset and absolute height in the body's
    local (pre-yaw) frame; x_sep is the half-separation between the hands.
    Elbows bend outward when the target is closer than the straight arm;
    unreachable targets are clamped to the reach sphere.

    twist_mode rotates each hand about the forearm axis (at the wrist) so the
    marker-bearing side faces the object: 'inward' (toward the midline),
    'down', or 'forward'. The twist displaces the marker centroid off the
    aimed point, so the solve is polished with measured-error feedback.
    """
    f = len(pose)
    rest = template.rest_joints()
    meta = {}
    for side, sign in (("l", 1.0), ("r", -1.0)):
        wrist, elbow, shoulder = (_J[f"{side}_wrist"], _J[f"{side}_elbow"],
                                  _J[f"{side}_shoulder"])
        hand_mk = template.marker_indices[template.marker_joints == wrist]
        centroid = template.mesh.vertices[hand_mk].mean(axis=0)
        meta[side] = {
            "l1": np.linalg.norm(rest[elbow] - rest[shoulder]),
            "l2": np.linalg.norm(centroid - rest[elbow]),
            "wrist_off": centroid - rest[wrist],
            "marks": hand_mk,
            "sh": shoulder, "el": elbow, "wr": wrist, "sign": sign,
            "sh_parent": int(template.parents[shoulder]),
        }
    for i in range(f):
        params = bodymod.BodyParams(pose[i], shape,
                                    np.array([0.0, 0.0, yaw[i]]),
                                    translation[i])
        rot, pos = bodymod._global_transforms(template, params)
        cy, sy = np.cos(yaw[i]), np.sin(yaw[i])
        r_yaw = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1.0]])
        for side, sign in (("l", 1.0), ("r", -1.0)):
            m = meta[side]
            local = np.array([sign * x_sep[i], targets_yz[i, 0], 0.0])
            target = r_yaw @ local
            target[:2] += translation[i, :2]
            target[2] = targets_yz[i, 1]
            aim = target.copy()
            for _ in range(max(1, polish)):
                _solve_arm(pose[i], m, rot, pos, aim, r_yaw, twist_mode, bend)
                p2 = bodymod.BodyParams(pose[i], shape,
                                        np.array([0.0, 0.0, yaw[i]]),
                                        translation[i])
                rot2, pos2 = bodymod._global_transforms(template, p2)
                achieved = _posed_vertices(template, rot2, pos2,
                                           m["marks"]).mean(axis=0)
                err = target - achieved
                if np.linalg.norm(err) < 2e-3:
                    break
                aim = aim + err


def _ground_translation(template, pose_mat, shape, yaw, xy):
    """Per-frame translation keeping the lowest body vertex on z=0."""
    f = len(pose_mat)
    out = np.zeros((f, 3))
    for i in range(f):
        yaw_aa = np.array([0.0, 0.0, yaw[i]])
        params = bodymod.BodyParams(pose_mat[i], shape, yaw_aa, np.zeros(3))
        mesh, _ = bodymod.body_forward(template, params)
        out[i] = (xy[i, 0], xy[i, 1], -mesh.vertices[:, 2].min())
    return out


def _hand_anchor(template, body_mat):
    """Midpoint of the two hand-marker centroids per frame."""
    hands = np.isin(template.marker_joints,
                    [_J["l_wrist"], _J["r_wrist"]])
    out = np.empty((len(body_mat), 3))
    for i in range(len(body_mat)):
        mk = bodymod.marker_positions(
            template, bodymod.BodyParams.from_vector(body_mat[i]))
        out[i] = mk[hands].mean(axis=0)
    return out


def _pelvis_anchor(template, body_mat):
    pelvis = template.marker_joints == _J["root"]
    out = np.empty((len(body_mat), 3))
    for i in range(len(body_mat)):
        mk = bodymod.marker_positions(
            template, bodymod.BodyParams.from_vector(body_mat[i]))
        out[i] = mk[pelvis].mean(axis=0)
    return out


def _yaw_rot6d(yaw):
    """6D rotation for a rotation about z by yaw, per frame."""
    c, s = np.cos(yaw), np.sin(yaw)
    return np.stack([c, s, np.zeros_like(c), -s, c, np.zeros_like(c)], axis=-1)


@dataclass
class _ScriptResult:
    body: np.ndarray  # (F, 79) float64
    obj: np.ndarray  # (F, 9) float64
    coupled: np.ndarray  # (F,) bool, frames where coupling holds
    coupled_joints: list[int]


def _assemble_body(pose, shape, yaw, translation):
    f = len(pose)
    yaw_aa = np.zeros((f, 3))
    yaw_aa[:, 2] = yaw
    return np.concatenate([pose, np.tile(shape, (f, 1)), yaw_aa, translation],
                          axis=1)


# grip geometry per object: the hands close on the object at a corner-height
# offset above its center (z_rel) with half-separation x_sep just outside the
# object extent, so object surface points never enter the hand capsules;
# grab_y holds the grab point far enough forward to clear the knees
# grip spec per object: `grip` is the canonical-frame point the hands close
# on (the object is anchored so this point tracks the hand markers), x_sep
# the half-separation between the hands, `twist` the side of the hand facing
# the object, `bend` an extra wrist bend keeping fingertips out of it, and
# `slope` how fast the carry path swings forward with height (clearing the
# knees). The box and stool are held by opposite side edges, the board by
# its near edge, the bar from above.
_GRIP = {
    "box": {"grip": (0.0, 0.0, 0.065), "x_sep": 0.176, "twist": "inward",
            "bend": ("out", 0.45), "grab_y": 0.42, "slope": 0.35},
    "board": {"grip": (0.0, -0.22, 0.09), "x_sep": 0.150, "twist": "forward",
              "bend": ("back", 0.6), "grab_y": 0.30, "slope": 0.45},
    "stool": {"grip": (0.0, 0.0, 0.21), "x_sep": 0.192, "twist": "inward",
              "bend": ("out", 0.45), "grab_y": 0.47, "slope": 0.35},
    "bar": {"grip": (0.0, 0.0, 0.085), "x_sep": 0.220, "twist": "down",
            "bend": ("along", 1.0), "grab_y": 0.30, "slope": 0.60},
}

# the board is carried hanging from its grip edge (tilted down-forward) so
# its footprint clears both legs and forearms; the tilt is limited so the
# hanging edge stays above the ground and eases out for the flat landing
_BOARD_TILT_MAX = 0.95
_BOARD_SPAN = 0.39  # grip edge to far edge, meters
_BOARD_HOVER = 0.09  # grip point height above the board top

_ARM_BUDGET = 0.50  # desired shoulder height above the hand target, meters


_CROUCH_SQUAT = 1.3  # deep squat; the splay keeps knees clear laterally
_CROUCH_BOW = 1.8


def _crouch_table(template, n: int = 21):
    """Shoulder pose as a function of a single crouch amount in [0, 1].

    Crouch c drives a splayed squat plus forward bow; the table lets scripts
    pick the crouch that puts the shoulders within arm reach of a hand
    target, and cap the forward reach of hand targets at any height.
    """
    cs = np.linspace(0.0, 1.0, n)
    heights = np.empty(n)
    forwards = np.empty(n)
    for i, c in enumerate(cs):
        pose = np.zeros((1, 63))
        _bow(pose, np.array([_CROUCH_BOW * c]))
        _squat(pose, np.array([_CROUCH_SQUAT * c]))
        translation = _ground_translation(template, pose, np.zeros(10),
                                          np.zeros(1), np.zeros((1, 2)))
        params = bodymod.BodyParams(pose[0], np.zeros(10), np.zeros(3),
                                    translation[0])
        _, pos = bodymod._global_transforms(template, params)
        heights[i] = 0.5 * (pos[_J["l_shoulder"], 2] + pos[_J["r_shoulder"], 2])
        forwards[i] = 0.5 * (pos[_J["l_shoulder"], 1] + pos[_J["r_shoulder"], 1])
    return cs, heights, forwards


def _crouch_for_height(z_star, crouch):
    """Crouch curve tracking shoulder height z* + arm budget (clipped)."""
    cs, heights, _ = crouch
    desired = np.asarray(z_star) + _ARM_BUDGET
    # heights decrease with c; np.interp needs ascending x
    return np.interp(desired, heights[::-1], cs[::-1])


def _reach_cap(c, z_star, x_sep, crouch, budget: float = 0.575):
    """Farthest forward hand target reachable at crouch c and height z*."""
    cs, heights, forwards = crouch
    p_z = np.interp(c, cs, heights)
    p_y = np.interp(c, cs, forwards)
    lateral = (x_sep - 0.17) ** 2
    span = np.maximum(budget ** 2 - lateral - (p_z - np.asarray(z_star)) ** 2,
                      0.01)
    return p_y + np.sqrt(span)


@dataclass
class _ScriptResult:
    body: np.ndarray  # (F, 79) float64
    obj: np.ndarray  # (F, 9) float64
    coupled: np.ndarray  # (F,) bool, frames where coupling holds
    coupled_joints: list[int]


def _assemble_body(pose, shape, yaw, translation):
    f = len(pose)
    yaw_aa = np.zeros((f, 3))
    yaw_aa[:, 2] = yaw
    return np.concatenate([pose, np.tile(shape, (f, 1)), yaw_aa, translation],
                          axis=1)


def _build_script(action, obj_name, template, F, rng, crouch=None):
    """Procedural body/object curves for one sequence of a scripted action.

    The torso/leg pose follows a crouch curve derived from the hand-height
    targets; arms are aimed straight at analytic grip targets; the object is
    then anchored to the measured hand (or pelvis) markers.
    """
    if action not in ACTIONS:
        raise DatasetError(f"unknown script '{action}'")
    if obj_name not in OBJECT_NAMES:
        raise DatasetError(f"unknown object '{obj_name}'")
    if crouch is None:
        crouch = _crouch_table(template)
    tau = np.linspace(0.0, 1.0, F)
    shape = rng.uniform(-0.3, 0.3, 10)
    yaw = np.full(F, rng.uniform(-0.25, 0.25))
    xy = np.tile(rng.uniform(-0.04, 0.04, 2), (F, 1))
    grip = _GRIP[obj_name]
    grip_pt = np.asarray(grip["grip"], dtype=np.float64)
    x_sep = grip["x_sep"]
    rest_z = _REST_Z[obj_name]
    z_grab = rest_z + grip_pt[2]  # world grip height at rest (object flat)
    wobble = 0.015 * np.sin(2 * np.pi * (tau * 1.5 + rng.uniform(0, 1)))
    hang = 0.82 + rng.uniform(-0.02, 0.02)
    coupled = np.zeros(F, dtype=bool)
    coupled_joints = [_J["l_wrist"], _J["r_wrist"]]
    sit_ramp = None

    # hand height curve, forward-target curve tied to it so rising objects
    # swing clear of the knees
    if action in ("lift", "pickup"):
        t_grab = 0.30 + rng.uniform(-0.02, 0.02)
        z_end = (0.95 if action == "lift" else 0.90) + rng.uniform(-0.03, 0.03)
        z_star = (hang + (z_grab - hang) * _ramp(tau, 0.05, t_grab)
                  + (z_end - z_grab) * _ramp(tau, t_grab + 0.08, 0.85))
        reach_in = _ramp(tau, 0.05, t_grab)
        y_des = (0.28 + (grip["grab_y"] - 0.28) * reach_in
                 + grip["slope"] * np.maximum(z_star - z_grab, 0.0) * reach_in)
        couple_from = t_grab
    elif action == "carry":
        z_hold = 0.95 + rng.uniform(-0.02, 0.02)
        z_star = np.full(F, z_hold)
        y_des = np.full(F, 0.42)
        xy = xy + np.stack([np.zeros(F),
                            0.55 * _ramp(tau, 0.12, 0.88)], axis=1)
        couple_from = -1.0  # coupled for the whole sequence
    elif action == "push":
        z_star = hang + (z_grab - hang) * _ramp(tau, 0.08, 0.28)
        y_des = np.full(F, 0.32)
        push = _ramp(tau, 0.35, 0.82)
        xy = xy + np.stack([np.zeros(F), 0.30 * push], axis=1)
        couple_from = 0.30
    elif action == "sit":
        sit_ramp = _ramp(tau, 0.25, 0.62)
        z_star = 0.80 - 0.30 * sit_ramp
        y_des = np.full(F, 0.30)
        # approach from in front of the seat, settling back onto it
        xy = xy + np.stack([np.zeros(F), 0.25 * (1.0 - sit_ramp)], axis=1)
        couple_from = 0.66
        coupled_joints = [_J["root"]]
    elif action == "setdown":
        t_down = 0.62 + rng.uniform(-0.02, 0.02)
        z_place = z_grab - 0.015  # slight overshoot so the landing triggers
        z_star = (0.72 + (z_place - 0.72) * _ramp(tau, 0.15, t_down)
                  + (0.74 - z_place) * _ramp(tau, t_down + 0.12, 0.98))
        y_des = grip["grab_y"] + grip["slope"] * np.maximum(z_star - z_grab, 0.0)
        couple_from = -1.0

    pose = np.zeros((F, 63))
    sway = 0.02 * np.sin(2 * np.pi * (tau + rng.uniform(0, 1)))
    _joint(pose, _J["spine2"], 1, sway)
    if action == "sit":
        # near-level thighs, vertical shins: the pelvis stays above the seat
        for hip, knee, ankle in (("l_hip", "l_knee", "l_ankle"),
                                 ("r_hip", "r_knee", "r_ankle")):
            _joint(pose, _J[hip], 0, 1.30 * sit_ramp)
            _joint(pose, _J[knee], 0, -1.32 * sit_ramp)
            _joint(pose, _J[ankle], 0, 0.02 * sit_ramp)
        _bow(pose, 0.25 * sit_ramp)
        y_star = y_des
    else:
        c = _crouch_for_height(z_star, crouch)
        _bow(pose, _CROUCH_BOW * c)
        _squat(pose, _CROUCH_SQUAT * c)
        y_star = np.minimum(y_des, _reach_cap(c, z_star, x_sep, crouch) - 0.01)

    translation = _ground_translation(template, pose, shape, yaw, xy)
    targets_yz = np.stack([y_star, z_star], axis=1)
    if action == "sit":
        twist, bend = None, None
    elif action == "push":
        twist, bend = "forward", ("back", 0.35)
    else:
        twist, bend = grip["twist"], grip["bend"]
    _point_arms(template, pose, shape, yaw, translation, np.full(F, x_sep),
                targets_yz, twist, bend)
    body_mat = _assemble_body(pose, shape, yaw, translation)

    obj = np.zeros((F, 9))
    if action == "sit":
        obj[:, 3:] = _yaw_rot6d(np.full(F, yaw[0]))
        anchor = _pelvis_anchor(template, body_mat)
        seat_frame = int(0.85 * (F - 1))
        obj[:, :3] = [anchor[seat_frame, 0], anchor[seat_frame, 1], rest_z]
        coupled = tau >= couple_from
        return _ScriptResult(body_mat, obj, coupled, coupled_joints)

    anchor = _hand_anchor(template, body_mat)
    if action == "push":
        cy, sy = np.cos(yaw[0]), np.sin(yaw[0])
        off = 0.16 + 0.038  # hands just behind the seat's trailing face
        anchored = anchor + np.array([-off * sy, off * cy, 0.0])
        anchored[:, 2] = rest_z
        obj[:, 3:] = _yaw_rot6d(np.full(F, yaw[0]))
        grab = int(np.searchsorted(tau, couple_from))
        rest = np.array([anchored[grab, 0], anchored[grab, 1], rest_z])
        blend = _ramp(tau, couple_from, couple_from + 0.10)[:, None]
        obj[:, :3] = rest + blend * (anchored - rest)
        coupled = tau >= couple_from + 0.10
        return _ScriptResult(body_mat, obj, coupled, coupled_joints)

    # grip-frame rotation: yaw plus (board only) a carry tilt about the grip
    # axis that eases out near the ground
    if couple_from < 0:
        gate = np.ones(F)
    else:
        gate = _ramp(tau, couple_from, couple_from + 0.10)
    tilt = np.zeros(F)
    if obj_name == "board":
        room = (z_star - _BOARD_HOVER - 0.05) / _BOARD_SPAN
        drop = np.arcsin(np.clip(room, 0.0, 1.0))
        tilt = -gate * np.minimum(_BOARD_TILT_MAX, drop)
    rots = np.empty((F, 3, 3))
    anchored = np.empty((F, 3))
    for i in range(F):
        rz = geom.axis_angle_to_matrix(np.array([0, 0, yaw[i] + wobble[i]]))
        rx = geom.axis_angle_to_matrix(np.array([tilt[i], 0, 0]))
        rots[i] = rz @ rx
        anchored[i] = anchor[i] - rots[i] @ grip_pt
        obj[i, 3:] = geom.matrix_to_rot6d(rots[i])

    if action == "setdown":
        # follow the hands down until the object lands, then freeze it; if
        # the hands release above the ground, the object drops the last bit
        land = np.nonzero(anchored[:, 2] <= rest_z)[0]
        t_land = int(land[0]) if len(land) else int(np.argmin(anchored[:, 2]))
        obj[:t_land, :3] = anchored[:t_land]
        obj[t_land:, :3] = [anchored[t_land, 0], anchored[t_land, 1], rest_z]
        if not len(land):
            fall = max(2, F // 10)
            stop = min(t_land + fall, F)
            ease = _smoothstep(np.arange(stop - t_land) / fall)
            obj[t_land:stop, 2] = (anchored[t_land, 2]
                                   + ease * (rest_z - anchored[t_land, 2]))
        obj[t_land:, 3:] = obj[t_land, 3:]
        coupled = np.arange(F) < t_land
    elif couple_from < 0:
        obj[:, :3] = anchored
        coupled[:] = True
    else:
        grab = int(np.searchsorted(tau, couple_from))
        rest = np.array([anchored[grab, 0], anchored[grab, 1], rest_z])
        blend = gate[:, None]
        obj[:, :3] = rest + blend * (anchored - rest)
        coupled = tau >= couple_from + 0.10
    return _ScriptResult(body_mat, obj, coupled, coupled_joints)


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    frames: int = 32
    fps: int = 20
    sequences_per_pair: int = 4
    template_seed: int = 0
    pairs: list = field(default_factory=lambda: list(SCRIPT_PAIRS))
    val_pairs: int = 2
    test_pairs: int = 2


@dataclass
class Dataset:
    sequences: list[Sequence]
    splits: dict[str, list[str]]  # split name -> sequence ids
    objects: dict[str, ObjectAsset]
    vocab: list[str]
    template: bodymod.BodyTemplate
    config: SynthConfig

    def split(self, name: str) -> list[Sequence]:
        wanted = set(self.splits[name])
        return [s for s in self.sequences if s.id in wanted]

    def by_id(self, seq_id: str) -> Sequence:
        for s in self.sequences:
            if s.id == seq_id:
                return s
        raise KeyError(seq_id)


def _split_pairs(pairs, n_val, n_test, rng):
    holdable = [p for p in pairs if p not in _REQUIRED_TRAIN]
    order = rng.permutation(len(holdable))
    val = [holdable[i] for i in order[:n_val]]
    test = [holdable[i] for i in order[n_val:n_val + n_test]]
    train = [p for p in pairs if p not in val and p not in test]
    return train, val, test


def synth_dataset(config: SynthConfig, seed: int) -> Dataset:
    """Deterministic procedural dataset over scripted human-object interactions.

    Splits are disjoint by (object, script) pair; the held-out val/test pairs
    never appear in train. Contact channels are recomputed labels, never
    independent predictions.
    """
    for action, obj in config.pairs:
        if action not in ACTIONS:
            raise DatasetError(f"unknown script '{action}'")
        if obj not in OBJECT_NAMES:
            raise DatasetError(f"unknown object '{obj}'")
    template = bodymod.build_template(config.template_seed)
    objects = build_objects()
    vocab = build_vocab(script_text(a, o) for a, o in config.pairs)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD5]))
    train_p, val_p, test_p = _split_pairs(config.pairs, config.val_pairs,
                                          config.test_pairs, rng)
    membership = {p: "train" for p in train_p}
    membership.update({p: "val" for p in val_p})
    membership.update({p: "test" for p in test_p})

    sequences = []
    splits = {"train": [], "val": [], "test": []}
    crouch = _crouch_table(template)
    for pair_idx, (action, obj_name) in enumerate(config.pairs):
        for k in range(config.sequences_per_pair):
            seq_rng = np.random.default_rng(
                np.random.SeedSequence([seed, pair_idx, k]))
            built = _build_script(action, obj_name, template, config.frames,
                                  seq_rng, crouch)
            asset = objects[obj_name]
            contact = contact_channels_for(template, built.body, built.obj,
                                           asset.cloud)
            frames = pack_frames(built.body, contact, built.obj)
            text = script_text(action, obj_name)
            cond = ConditionSpec(tokenize(text, vocab), asset.cloud.copy(),
                                 obj_name)
            seq = Sequence(frames, config.fps, cond,
                           f"{action}_{obj_name}_{k:03d}", text)
            validate_sequence(seq)
            sequences.append(seq)
            splits[membership[(action, obj_name)]].append(seq.id)
    return Dataset(sequences, splits, objects, vocab, template, config)


# ---------------------------------------------------------------------------
# dataset directory layout
# ---------------------------------------------------------------------------

def save_dataset(dataset: Dataset, out_dir) -> None:
    """sequences/<id>.seq + meshes/<obj>.obj + vocab.txt + manifest.tsv."""
    import os

    os.makedirs(f"{out_dir}/sequences", exist_ok=True)
    os.makedirs(f"{out_dir}/meshes", exist_ok=True)
    for name, asset in sorted(dataset.objects.items()):
        geom.save_mesh(f"{out_dir}/meshes/{name}.obj", asset.mesh)
    with open(f"{out_dir}/vocab.txt", "w", encoding="utf-8") as fh:
        fh.write("\n".join(dataset.vocab) + "\n")
    lines = []
    id_to_split = {sid: split for split, ids in dataset.splits.items()
                   for sid in ids}
    for seq in dataset.sequences:
        rel = f"sequences/{seq.id}.seq"
        save_sequence(f"{out_dir}/{rel}", seq)
        lines.append(f"{seq.id}\t{id_to_split[seq.id]}\t{rel}\t{seq.text}")
    with open(f"{out_dir}/manifest.tsv", "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(root, template_seed: int = 0) -> Dataset:
    """Rebuild a Dataset from a directory written by save_dataset."""
    import os

    objects = {}
    mesh_dir = f"{root}/meshes"
    for fname in sorted(os.listdir(mesh_dir)):
        if not fname.endswith(".obj"):
            continue
        name = fname[:-4]
        mesh = geom.load_mesh(f"{mesh_dir}/{fname}")
        cloud = geom.sample_surface_points(mesh, CLOUD_SIZE, CLOUD_SEED)
        objects[name] = ObjectAsset(name, mesh, cloud.astype(np.float32))
    with open(f"{root}/vocab.txt", "r", encoding="utf-8") as fh:
        vocab = [line.rstrip("\n") for line in fh if line.strip()]
    sequences = []
    splits: dict[str, list[str]] = {"train": [], "val": [], "test": []}
    with open(f"{root}/manifest.tsv", "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            seq_id, split, rel, text = line.split("\t")
            seq = load_sequence(f"{root}/{rel}", seq_id)
            seq.text = text
            for name, asset in objects.items():
                if np.allclose(asset.cloud, seq.condition.object_cloud,
                               atol=1e-6):
                    seq.condition.object_mesh_ref = name
                    break
            sequences.append(seq)
            splits.setdefault(split, []).append(seq_id)
    template = bodymod.build_template(template_seed)
    config = SynthConfig(frames=len(sequences[0]) if sequences else 32,
                         fps=sequences[0].fps if sequences else 20,
                         template_seed=template_seed)
    return Dataset(sequences, splits, objects, vocab, template, config)
