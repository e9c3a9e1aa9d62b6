"""Parametric deformable object: kinematic-chain, linear-blend-skinned mesh.

A template bundles a rest mesh, a bone tree, per-vertex skinning weights,
joint sites, and an optional low-dimensional linear (PCA-style) pose
subspace. Pose vectors are either raw per-bone Euler angles (3 per bone,
intrinsic X-Y-Z) or subspace coefficients when a basis is present.

Three built-in templates mirror increasing articulation complexity:
``finger3`` (single 3-bone digit), ``hand5`` (palm plus five 3-bone digits
with a 6-dim pose subspace), and ``armhand`` (hand5 attached to a 3-DoF
forearm).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

__all__ = [
    "ModelError",
    "Bone",
    "JointSite",
    "KinematicTemplate",
    "PosedMesh",
    "pose_mesh",
    "joint_positions",
    "load_template",
    "save_template",
    "get_builtin_template",
    "build_finger3",
    "build_hand5",
    "build_armhand",
    "BUILTIN_TEMPLATES",
]


class ModelError(ValueError):
    """Raised on malformed templates or pose vectors."""


@dataclass(frozen=True)
class Bone:
    parent: int  # -1 for the root
    rest: NDArray[np.float64]  # 4x4 local transform relative to the parent


@dataclass(frozen=True)
class JointSite:
    bone: int
    offset: NDArray[np.float64]  # 3-vector in the bone's local frame


@dataclass
class KinematicTemplate:
    """Skinned articulated triangle mesh with optional linear pose subspace."""

    name: str
    rest_vertices: NDArray[np.float64]      # (V, 3)
    faces: NDArray[np.int64]                # (F, 3)
    bones: list[Bone]
    skinning_weights: NDArray[np.float64]   # (V, B), rows sum to 1
    joint_sites: list[JointSite]
    pca_basis: NDArray[np.float64] | None = None  # (3B, D)
    pca_mean: NDArray[np.float64] | None = None   # (3B,)
    _rest_world: NDArray[np.float64] = field(init=False, repr=False)
    _rest_world_inv: NDArray[np.float64] = field(init=False, repr=False)

    def __post_init__(self):
        self.rest_vertices = np.asarray(self.rest_vertices, dtype=float)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        self.skinning_weights = np.asarray(self.skinning_weights, dtype=float)
        self._validate()
        self._rest_world = self._compose(np.zeros(3 * len(self.bones)))
        self._rest_world_inv = np.linalg.inv(self._rest_world)

    def _validate(self):
        nv = len(self.rest_vertices)
        nb = len(self.bones)
        if self.bones[0].parent != -1:
            raise ModelError("bone 0 must be the root (parent = -1)")
        for i, b in enumerate(self.bones[1:], start=1):
            if not (0 <= b.parent < i):
                raise ModelError(f"bone {i} parent {b.parent} does not precede it")
        if self.skinning_weights.shape != (nv, nb):
            raise ModelError("skinning weight matrix shape mismatch")
        if np.any(self.skinning_weights < -1e-12):
            raise ModelError("negative skinning weight")
        if np.max(np.abs(self.skinning_weights.sum(axis=1) - 1.0)) > 1e-9:
            raise ModelError("skinning weights must sum to 1 per vertex")
        if self.faces.min() < 0 or self.faces.max() >= nv:
            raise ModelError("face index out of range")
        v = self.rest_vertices
        cross = np.cross(v[self.faces[:, 1]] - v[self.faces[:, 0]],
                         v[self.faces[:, 2]] - v[self.faces[:, 0]])
        if np.linalg.norm(cross, axis=1).min() <= 1e-12:
            raise ModelError("degenerate rest face")
        if (self.pca_basis is None) != (self.pca_mean is None):
            raise ModelError("pca_basis and pca_mean must be given together")
        if self.pca_basis is not None:
            self.pca_basis = np.asarray(self.pca_basis, dtype=float)
            self.pca_mean = np.asarray(self.pca_mean, dtype=float)
            if self.pca_basis.shape[0] != 3 * nb or self.pca_mean.shape != (3 * nb,):
                raise ModelError("pose subspace dimensions do not match bone count")

    @property
    def num_bones(self) -> int:
        return len(self.bones)

    @property
    def pose_dim(self) -> int:
        """Dimension of the pose vector this template expects."""
        if self.pca_basis is not None:
            return self.pca_basis.shape[1]
        return 3 * len(self.bones)

    @property
    def num_joints(self) -> int:
        return len(self.joint_sites)

    def bbox_diagonal(self) -> float:
        """Rest-pose bounding box diagonal, used to scale tolerances."""
        v = self.rest_vertices
        return float(np.linalg.norm(v.max(axis=0) - v.min(axis=0)))

    def full_angles(self, theta: NDArray[np.float64]) -> NDArray[np.float64]:
        """Expand a pose vector to per-bone Euler angles (3 per bone)."""
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.pose_dim,):
            raise ModelError(f"pose dimension {theta.shape} != ({self.pose_dim},)")
        if not np.all(np.isfinite(theta)):
            raise ModelError("non-finite pose vector")
        if self.pca_basis is not None:
            return self.pca_mean + self.pca_basis @ theta
        return theta

    def _compose(self, angles: NDArray[np.float64]) -> NDArray[np.float64]:
        """World transforms (B, 4, 4) for per-bone angles."""
        nb = len(self.bones)
        world = np.empty((nb, 4, 4))
        for b, bone in enumerate(self.bones):
            local = bone.rest @ _rot4(angles[3 * b:3 * b + 3])
            world[b] = local if bone.parent < 0 else world[bone.parent] @ local
        return world


@dataclass
class PosedMesh:
    """Deformed mesh with flat per-face normals, centroids, and joints."""

    vertices: NDArray[np.float64]   # (V, 3)
    faces: NDArray[np.int64]        # (F, 3)
    normals: NDArray[np.float64]    # (F, 3)
    centroids: NDArray[np.float64]  # (F, 3)
    joints: NDArray[np.float64]     # (J, 3)

    @property
    def v0(self):
        return self.vertices[self.faces[:, 0]]

    @property
    def v1(self):
        return self.vertices[self.faces[:, 1]]

    @property
    def v2(self):
        return self.vertices[self.faces[:, 2]]


def _rot4(angles) -> NDArray[np.float64]:
    """Intrinsic X-Y-Z Euler rotation as a homogeneous 4x4 matrix."""
    ax, ay, az = angles
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    out = np.eye(4)
    out[:3, :3] = rx @ ry @ rz
    return out


def _translate4(t) -> NDArray[np.float64]:
    out = np.eye(4)
    out[:3, 3] = t
    return out


def pose_mesh(template: KinematicTemplate, theta) -> PosedMesh:
    """Pose a template by linear blend skinning.

    Vertices are blended as sum_b w_b * (T_b @ T_b_rest^-1) applied to the
    rest vertex; joints are the bone transforms applied to the joint sites.
    """
    angles = template.full_angles(theta)
    world = template._compose(angles)
    # per-bone skinning matrices mapping rest space to posed space
    skin = np.einsum("bij,bjk->bik", world, template._rest_world_inv)

    v_h = np.concatenate([template.rest_vertices,
                          np.ones((len(template.rest_vertices), 1))], axis=1)
    per_bone = np.einsum("bij,vj->bvi", skin, v_h)[:, :, :3]      # (B, V, 3)
    vertices = np.einsum("vb,bvi->vi", template.skinning_weights, per_bone)

    joints = np.empty((len(template.joint_sites), 3))
    for j, site in enumerate(template.joint_sites):
        joints[j] = world[site.bone, :3, :3] @ np.asarray(site.offset, dtype=float) \
            + world[site.bone, :3, 3]

    f = template.faces
    cross = np.cross(vertices[f[:, 1]] - vertices[f[:, 0]],
                     vertices[f[:, 2]] - vertices[f[:, 0]])
    norms = np.linalg.norm(cross, axis=1)
    normals = cross / np.maximum(norms, 1e-300)[:, None]
    centroids = vertices[f].mean(axis=1)
    return PosedMesh(vertices=vertices, faces=f, normals=normals,
                     centroids=centroids, joints=joints)


def joint_positions(template: KinematicTemplate, theta) -> NDArray[np.float64]:
    """Joint locations for a pose, consistent with pose_mesh().joints."""
    angles = template.full_angles(theta)
    world = template._compose(angles)
    joints = np.empty((len(template.joint_sites), 3))
    for j, site in enumerate(template.joint_sites):
        joints[j] = world[site.bone, :3, :3] @ np.asarray(site.offset, dtype=float) \
            + world[site.bone, :3, 3]
    return joints


# --- template file format -----------------------------------------------

def save_template(template: KinematicTemplate, path):
    """Write a template to the JSON template format."""
    doc = {
        "name": template.name,
        "vertices": template.rest_vertices.tolist(),
        "faces": template.faces.tolist(),
        "bones": [{"parent": b.parent, "rest": np.asarray(b.rest).tolist()}
                  for b in template.bones],
        "weights": template.skinning_weights.tolist(),
        "joint_sites": [{"bone": s.bone, "offset": np.asarray(s.offset).tolist()}
                        for s in template.joint_sites],
    }
    if template.pca_basis is not None:
        doc["pca"] = {"basis": template.pca_basis.tolist(),
                      "mean": template.pca_mean.tolist()}
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_template(path) -> KinematicTemplate:
    """Load a template from the JSON template format."""
    with open(path) as fh:
        doc = json.load(fh)
    try:
        pca = doc.get("pca")
        return KinematicTemplate(
            name=doc.get("name", "unnamed"),
            rest_vertices=np.asarray(doc["vertices"], dtype=float),
            faces=np.asarray(doc["faces"], dtype=np.int64),
            bones=[Bone(parent=int(b["parent"]), rest=np.asarray(b["rest"], dtype=float))
                   for b in doc["bones"]],
            skinning_weights=np.asarray(doc["weights"], dtype=float),
            joint_sites=[JointSite(bone=int(s["bone"]),
                                   offset=np.asarray(s["offset"], dtype=float))
                         for s in doc["joint_sites"]],
            pca_basis=None if pca is None else np.asarray(pca["basis"], dtype=float),
            pca_mean=None if pca is None else np.asarray(pca["mean"], dtype=float),
        )
    except KeyError as exc:
        raise ModelError(f"template file missing field {exc}") from exc


# --- mesh construction helpers ------------------------------------------

def _tube(base, length, radius, rings, segments, cap=True):
    """Open/capped tube along +y starting at `base`. Returns (verts, faces)."""
    base = np.asarray(base, dtype=float)
    verts = []
    for r in range(rings + 1):
        y = length * r / rings
        for s in range(segments):
            ang = 2 * np.pi * s / segments
            verts.append(base + [radius * np.cos(ang), y, radius * np.sin(ang)])
    faces = []
    for r in range(rings):
        for s in range(segments):
            a = r * segments + s
            b = r * segments + (s + 1) % segments
            c = (r + 1) * segments + s
            d = (r + 1) * segments + (s + 1) % segments
            faces.append([a, b, d])
            faces.append([a, d, c])
    if cap:
        tip = len(verts)
        verts.append(base + [0.0, length + 0.6 * radius, 0.0])
        top = rings * segments
        for s in range(segments):
            faces.append([top + s, top + (s + 1) % segments, tip])
    return np.asarray(verts), np.asarray(faces, dtype=np.int64)


def _box(center, half_extents, subdiv=3):
    """Axis-aligned box with subdivided quads. Returns (verts, faces)."""
    cx, cy, cz = center
    hx, hy, hz = half_extents
    verts = []
    faces = []

    def grid(origin, du, dv, n):
        base = len(verts)
        for i in range(n + 1):
            for j in range(n + 1):
                verts.append(np.asarray(origin) + du * (i / n) + dv * (j / n))
        for i in range(n):
            for j in range(n):
                a = base + i * (n + 1) + j
                b = a + 1
                c = a + (n + 1)
                d = c + 1
                faces.append([a, b, d])
                faces.append([a, d, c])

    ex = np.array([2 * hx, 0, 0])
    ey = np.array([0, 2 * hy, 0])
    ez = np.array([0, 0, 2 * hz])
    c0 = np.array([cx - hx, cy - hy, cz - hz])
    grid(c0, ey, ex, subdiv)                    # z- side
    grid(c0 + ez, ex, ey, subdiv)               # z+ side
    grid(c0, ex, ez, subdiv)                    # y- side
    grid(c0 + ey, ez, ex, subdiv)               # y+ side
    grid(c0, ez, ey, subdiv)                    # x- side
    grid(c0 + ex, ey, ez, subdiv)               # x+ side
    return np.asarray(verts, dtype=float), np.asarray(faces, dtype=np.int64)


def _chain_weights(y, seg_starts, seg_len, blend):
    """Weights over a chain of stacked bones for a vertex height y.

    Rigid inside each segment, linear blend of width `blend` across joints.
    """
    nb = len(seg_starts)
    w = np.zeros(nb)
    for b in range(nb):
        lo = seg_starts[b]
        hi = lo + seg_len
        if b == 0 and y < lo:
            w[b] = 1.0
        elif b == nb - 1 and y >= hi:
            w[b] = 1.0
        if lo <= y < hi:
            w[b] = 1.0
    # soften across joint boundaries
    for b in range(nb - 1):
        j = seg_starts[b + 1]
        if abs(y - j) < blend:
            t = 0.5 + (y - j) / (2 * blend)
            w[:] = 0.0
            w[b] = 1.0 - t
            w[b + 1] = t
    return w / w.sum()


def _finger_geometry(base_x, base_y, z, seg_len, radius, rings_per_seg, segments):
    """Tube mesh plus per-vertex chain heights for one 3-bone digit."""
    verts, faces = _tube([base_x, base_y, z], 3 * seg_len, radius,
                         rings=3 * rings_per_seg, segments=segments)
    heights = verts[:, 1] - base_y
    return verts, faces, heights


def _pca_from_samples(samples, k):
    """Top-k linear subspace of mean-centered samples, scaled to unit-variance
    coefficients (basis columns carry the per-component standard deviation)."""
    mean = samples.mean(axis=0)
    centered = samples - mean
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    std = svals[:k] / np.sqrt(len(samples) - 1)
    basis = vt[:k].T * std[None, :]
    return basis, mean


def build_finger3() -> KinematicTemplate:
    """Single digit: 3-bone chain, ~200 faces, raw 9-DoF pose vector."""
    seg_len = 0.04
    radius = 0.012
    verts, faces, heights = _finger_geometry(0.0, 0.0, 0.0, seg_len, radius,
                                             rings_per_seg=4, segments=8)
    root_t = np.array([0.0, -0.06, 0.30])
    verts = verts + root_t  # rest vertices live in world coordinates
    bones = [
        Bone(parent=-1, rest=_translate4(root_t)),
        Bone(parent=0, rest=_translate4([0.0, seg_len, 0.0])),
        Bone(parent=1, rest=_translate4([0.0, seg_len, 0.0])),
    ]
    seg_starts = [0.0, seg_len, 2 * seg_len]
    weights = np.stack([_chain_weights(h, seg_starts, seg_len, blend=0.25 * seg_len)
                        for h in heights])
    sites = [JointSite(bone=b, offset=np.array([0.0, seg_len, 0.0])) for b in range(3)]
    return KinematicTemplate(name="finger3", rest_vertices=verts, faces=faces,
                             bones=bones, skinning_weights=weights, joint_sites=sites)


def _grasp_samples(rng, n, num_fingers, finger_bone_idx, total_dof):
    """Random plausible grasp-like joint-angle vectors (flexion-dominated)."""
    out = np.zeros((n, total_dof))
    for i in range(n):
        for f in range(num_fingers):
            curl = rng.uniform(0.0, 1.0)
            for k, b in enumerate(finger_bone_idx[f]):
                flex = curl * (0.9, 1.0, 0.8)[k] + rng.normal(0.0, 0.08)
                out[i, 3 * b + 0] = flex
                out[i, 3 * b + 1] = rng.normal(0.0, 0.04)
                out[i, 3 * b + 2] = rng.normal(0.0, 0.06)
    return out


def _build_hand(root_rest, extra_bones=None, extra_mesh=None, pca_dim=6,
                name="hand5", elbow_dof=False, seed=20240817):
    """Shared construction for the palm-plus-five-digits templates."""
    palm_half = np.array([0.040, 0.035, 0.011])
    finger_xs = [-0.032, -0.016, 0.0, 0.016, 0.032]
    seg_len = 0.030
    radius = 0.0085
    palm_top = 2 * palm_half[1]

    extra_bones = extra_bones or []
    n_extra = len(extra_bones)
    bones = list(extra_bones)
    palm_bone = n_extra
    palm_parent = n_extra - 1 if n_extra else -1
    bones.append(Bone(parent=palm_parent, rest=root_rest))
    # world position of the palm base at rest (all rests are pure translations)
    palm_origin = np.asarray(root_rest)[:3, 3].copy()
    for b in extra_bones:
        palm_origin += np.asarray(b.rest)[:3, 3]

    all_verts = []
    all_faces = []
    all_weights = []

    if extra_mesh is not None:
        ev, ef, ew = extra_mesh
        all_verts.append(ev)
        all_faces.append(ef)
        all_weights.append(ew)

    def add_part(verts, faces, weights):
        offset = sum(len(v) for v in all_verts)
        all_verts.append(verts + palm_origin)
        all_faces.append(faces + offset)
        all_weights.append(weights)

    nb_total = 1 + n_extra + 3 * len(finger_xs)

    pv, pf = _box([0.0, palm_half[1], 0.0], palm_half, subdiv=4)
    pw = np.zeros((len(pv), nb_total))
    pw[:, palm_bone] = 1.0
    add_part(pv, pf, pw)

    finger_bone_idx = []
    sites = []
    for fi, fx in enumerate(finger_xs):
        b0 = palm_bone + 1 + 3 * fi
        finger_bone_idx.append([b0, b0 + 1, b0 + 2])
        bones.append(Bone(parent=palm_bone, rest=_translate4([fx, palm_top, 0.0])))
        bones.append(Bone(parent=b0, rest=_translate4([0.0, seg_len, 0.0])))
        bones.append(Bone(parent=b0 + 1, rest=_translate4([0.0, seg_len, 0.0])))
        verts, faces, heights = _finger_geometry(fx, palm_top, 0.0, seg_len, radius,
                                                 rings_per_seg=4, segments=7)
        fw = np.zeros((len(verts), nb_total))
        seg_starts = [0.0, seg_len, 2 * seg_len]
        for vi, h in enumerate(heights):
            cw = _chain_weights(h, seg_starts, seg_len, blend=0.25 * seg_len)
            if h < 0.2 * seg_len:
                # blend the ring nearest the palm into the palm bone
                t = h / (0.2 * seg_len)
                fw[vi, palm_bone] = 1.0 - t
                fw[vi, [b0, b0 + 1, b0 + 2]] = t * cw
            else:
                fw[vi, [b0, b0 + 1, b0 + 2]] = cw
        add_part(verts, faces, fw)
        for k in range(3):
            sites.append(JointSite(bone=b0 + k, offset=np.array([0.0, seg_len, 0.0])))

    if elbow_dof:
        # wrist joint at the palm root, ahead of the 15 digit joints
        sites = [JointSite(bone=palm_bone, offset=np.zeros(3))] + sites

    verts = np.concatenate(all_verts)
    faces = np.concatenate(all_faces)
    weights = np.concatenate(all_weights)

    rng = np.random.default_rng(seed)
    samples = _grasp_samples(rng, 500, len(finger_xs), finger_bone_idx, 3 * nb_total)
    basis, mean = _pca_from_samples(samples, pca_dim)
    if elbow_dof:
        # raw 3-DoF elbow rotation prepended to the digit subspace coefficients
        full = np.zeros((3 * nb_total, 3 + pca_dim))
        full[0:3, 0:3] = np.eye(3)
        full[:, 3:] = basis
        basis = full

    return KinematicTemplate(name=name, rest_vertices=verts, faces=faces,
                             bones=bones, skinning_weights=weights,
                             joint_sites=sites, pca_basis=basis, pca_mean=mean)


def build_hand5() -> KinematicTemplate:
    """Palm plus five 3-bone digits, >=1k faces, 6-dim pose subspace."""
    return _build_hand(root_rest=_translate4([0.0, -0.055, 0.35]))


def build_armhand() -> KinematicTemplate:
    """hand5 attached to a forearm with a raw 3-DoF elbow; 9-dim pose vector."""
    fore_len = 0.20
    fore_radius = 0.024
    elbow_t = np.array([0.0, -0.26, 0.42])
    elbow = Bone(parent=-1, rest=_translate4(elbow_t))
    ev, ef = _tube([0.0, 0.0, 0.0], fore_len, fore_radius, rings=6, segments=8,
                   cap=False)
    heights = ev[:, 1].copy()
    ev = ev + elbow_t  # world-frame rest coordinates
    nb_total = 2 + 15
    ew = np.zeros((len(ev), 3 * 0 + nb_total))
    # forearm vertices follow the elbow bone; the top ring blends into the palm
    t = np.clip((heights - 0.85 * fore_len) / (0.15 * fore_len), 0.0, 1.0)
    ew[:, 0] = 1.0 - t
    ew[:, 1] = t
    return _build_hand(root_rest=_translate4([0.0, fore_len, 0.0]),
                       extra_bones=[elbow], extra_mesh=(ev, ef, ew),
                       name="armhand", elbow_dof=True)


BUILTIN_TEMPLATES = {
    "finger3": build_finger3,
    "hand5": build_hand5,
    "armhand": build_armhand,
}


def get_builtin_template(name: str) -> KinematicTemplate:
    try:
        return BUILTIN_TEMPLATES[name]()
    except KeyError:
        raise ModelError(
            f"unknown template {name!r}; built-ins: {sorted(BUILTIN_TEMPLATES)}"
        ) from None
