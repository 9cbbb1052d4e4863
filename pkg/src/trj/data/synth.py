"""Procedural tube bodies over a kinematic tree and smooth joint-angle motions.

Bodies are a box torso with rectangular holes from which capped tubes follow
the limb chains, or a single capped tube along a joint chain. Shape parameters
are positive scale factors on a body plan's default dimensions; the padded
vector of those factors is the shape signature beta fed to the model.
Ground-truth frames come from linear blend skinning with distance-based
weights that never leave this module, plus a damped-spring soft-tissue lag
so that the deformation depends on motion history and not only on the
current pose.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..mesh import TriMesh, check_manifold, n_components
from .formats import MotionManifest
from .skeleton import KinematicTree, lbs_pose

BETA_WIDTH = 16


# ---------------------------------------------------------------------------
# body plans


@dataclass(frozen=True)
class LimbSpec:
    side: tuple[int, int]  # (axis, sign) of the torso face the limb leaves from
    cell: tuple[int, int]  # first hole cell along the face's two in-plane axes (in units of res)
    size: tuple[int, int]  # hole size in cells (in units of res)
    joints: tuple[str, ...]  # joint names along the chain, first sits on the hole
    direction: tuple[float, float, float]
    lengths: tuple[str, ...]  # dimension keys, one per bone
    radii: tuple[str, ...]
    parent: str = "root"
    tip_scale: float = 0.6


@dataclass(frozen=True)
class BodyPlan:
    name: str
    kind: str  # "torso" or "tube"
    dims: dict = field(default_factory=dict)  # default dimensions (meters)
    beta_keys: tuple[str, ...] = ()
    cells: tuple[int, int, int] = (1, 1, 1)  # torso grid per res unit
    limbs: tuple[LimbSpec, ...] = ()
    spine: bool = True
    dynamics: float = 1.0  # default gain of the soft-tissue secondary motion

    def scaled_dims(self, beta) -> dict:
        beta = np.asarray(beta, dtype=float)
        if beta.shape != (len(self.beta_keys),):
            raise ValueError(f"{self.name} takes {len(self.beta_keys)} shape parameters, got {beta.shape}")
        if not np.all(np.isfinite(beta)) or np.any(beta <= 0):
            raise ValueError(f"shape parameters must be positive scale factors, got {beta.tolist()}")
        d = dict(self.dims)
        for k, s in zip(self.beta_keys, beta):
            for key in k.split("+"):
                d[key] = d[key] * s
        return d


HUMANOID = BodyPlan(
    name="humanoid",
    kind="torso",
    dims=dict(
        torso_h=0.34, torso_w=0.24, torso_d=0.14, leg_upper=0.23, leg_lower=0.23, leg_r=0.045,
        arm_upper=0.2, arm_lower=0.2, arm_r=0.035, neck=0.05, head=0.12, head_r=0.06,
    ),
    beta_keys=("torso_h", "torso_w+torso_d", "arm_upper+arm_lower", "arm_r", "leg_upper+leg_lower", "leg_r", "neck+head", "head_r"),
    cells=(5, 2, 4),
    limbs=(
        LimbSpec((2, -1), (0, 0), (1, 2), ("l_hip", "l_knee"), (0, 0, -1), ("leg_upper", "leg_lower"), ("leg_r", "leg_r")),
        LimbSpec((2, -1), (4, 0), (1, 2), ("r_hip", "r_knee"), (0, 0, -1), ("leg_upper", "leg_lower"), ("leg_r", "leg_r")),
        LimbSpec((0, 1), (0, 2), (2, 1), ("l_shoulder", "l_elbow"), (1, 0, 0), ("arm_upper", "arm_lower"), ("arm_r", "arm_r"), parent="spine"),
        LimbSpec((0, -1), (0, 2), (2, 1), ("r_shoulder", "r_elbow"), (-1, 0, 0), ("arm_upper", "arm_lower"), ("arm_r", "arm_r"), parent="spine"),
        LimbSpec((2, 1), (2, 0), (1, 2), ("neck", "head"), (0, 0, 1), ("neck", "head"), ("head_r", "head_r"), parent="spine", tip_scale=0.8),
    ),
    dynamics=2.0,
)

QUADRUPED = BodyPlan(
    name="quadruped",
    kind="torso",
    dims=dict(
        torso_h=0.16, torso_w=0.18, torso_d=0.5, leg_upper=0.16, leg_lower=0.16, leg_r=0.035,
        neck=0.14, head=0.1, head_r=0.05, tail=0.18, tail_r=0.025,
    ),
    beta_keys=("torso_d", "torso_w+torso_h", "leg_upper+leg_lower", "leg_r", "neck+head", "head_r", "tail", "tail_r"),
    cells=(3, 6, 2),
    limbs=(
        LimbSpec((2, -1), (0, 0), (1, 1), ("fl_hip", "fl_knee"), (0, 0, -1), ("leg_upper", "leg_lower"), ("leg_r", "leg_r")),
        LimbSpec((2, -1), (2, 0), (1, 1), ("fr_hip", "fr_knee"), (0, 0, -1), ("leg_upper", "leg_lower"), ("leg_r", "leg_r")),
        LimbSpec((2, -1), (0, 5), (1, 1), ("bl_hip", "bl_knee"), (0, 0, -1), ("leg_upper", "leg_lower"), ("leg_r", "leg_r")),
        LimbSpec((2, -1), (2, 5), (1, 1), ("br_hip", "br_knee"), (0, 0, -1), ("leg_upper", "leg_lower"), ("leg_r", "leg_r")),
        LimbSpec((1, -1), (1, 1), (1, 1), ("neck", "head"), (0, -0.6, 0.8), ("neck", "head"), ("head_r", "head_r"), parent="spine", tip_scale=0.8),
        LimbSpec((1, 1), (1, 1), (1, 1), ("tail",), (0, 0.8, 0.6), ("tail",), ("tail_r",)),
    ),
    dynamics=1.0,
)

ARM = BodyPlan(
    name="arm",
    kind="tube",
    dims=dict(length=1.0, radius=0.08),
    beta_keys=("length", "radius"),
    dynamics=0.2,
)

PLANS = {p.name: p for p in (HUMANOID, QUADRUPED, ARM)}


@dataclass(eq=False)
class Body:
    plan: str
    mesh: TriMesh
    tree: KinematicTree
    weights: np.ndarray
    height: float
    shape_params: np.ndarray
    softness: np.ndarray | None = None  # per-vertex gain of the secondary motion

    @property
    def beta(self) -> np.ndarray:
        return pad_beta(self.shape_params)


def pad_beta(params, width: int = BETA_WIDTH) -> np.ndarray:
    p = np.asarray(params, dtype=np.float64).ravel()
    if p.size > width:
        raise ValueError(f"shape signature wider than {width}")
    out = np.zeros(width)
    out[: p.size] = p
    return out


# ---------------------------------------------------------------------------
# mesh assembly


def _box_surface(cells: tuple[int, int, int], holes: list[tuple[int, int, tuple[int, int], tuple[int, int]]]):
    """Quads of an integer-lattice box surface with outward orientation.

    Returns lattice points (P, 3) and triangles, leaving out the quads listed
    in ``holes`` as (axis, sign, first cell, size).
    """
    n = np.array(cells)
    index: dict[tuple[int, int, int], int] = {}
    pts: list[tuple[int, int, int]] = []

    def vid(p):
        p = tuple(int(c) for c in p)
        if p not in index:
            index[p] = len(pts)
            pts.append(p)
        return index[p]

    removed = set()
    for axis, sign, (c0, c1), (s0, s1) in holes:
        for i in range(c0, c0 + s0):
            for j in range(c1, c1 + s1):
                removed.add((axis, sign, i, j))

    tris = []
    for axis in range(3):
        b, c = (axis + 1) % 3, (axis + 2) % 3
        for sign in (-1, 1):
            for i in range(n[b]):
                for j in range(n[c]):
                    if (axis, sign, i, j) in removed:
                        continue
                    corners = []
                    for di, dj in ((0, 0), (1, 0), (1, 1), (0, 1)):
                        p = np.zeros(3, dtype=int)
                        p[axis] = n[axis] if sign > 0 else 0
                        p[b] = i + di
                        p[c] = j + dj
                        corners.append(vid(p))
                    if sign < 0:
                        corners = corners[::-1]
                    q0, q1, q2, q3 = corners
                    tris += [(q0, q1, q2), (q0, q2, q3)]
    return np.array(pts, dtype=float), tris


def _boundary_loops(tris) -> list[list[int]]:
    """Ordered boundary cycles following the triangles' half-edge direction."""
    half = set()
    for a, b, c in tris:
        half |= {(a, b), (b, c), (c, a)}
    nxt = {}
    for a, b in half:
        if (b, a) not in half:
            if a in nxt:
                raise ValueError("boundary is not a set of simple loops")
            nxt[a] = b
    loops, seen = [], set()
    for start in sorted(nxt):
        if start in seen:
            continue
        loop, v = [], start
        while v not in seen:
            seen.add(v)
            loop.append(v)
            v = nxt[v]
        loops.append(loop)
    return loops


def _attach_tube(verts: list, tris: list, loop: list[int], centers, radii, direction, tip):
    """Sweep rings along ``centers`` starting from the boundary ``loop``.

    Ring vertices keep the angular placement of the loop vertices around the
    limb axis so the tube does not twist.
    """
    d = np.asarray(direction, float)
    d /= np.linalg.norm(d)
    hole_c = np.mean([verts[k] for k in loop], axis=0)
    dirs = []
    for k in loop:
        r = verts[k] - hole_c
        r = r - d * (r @ d)
        dirs.append(r / np.linalg.norm(r))
    prev = loop
    for c, rad in zip(centers, radii):
        ring = []
        for u in dirs:
            verts.append(np.asarray(c) + rad * u)
            ring.append(len(verts) - 1)
        m = len(loop)
        for j in range(m):
            a, b = prev[j], prev[(j + 1) % m]
            ra, rb = ring[j], ring[(j + 1) % m]
            tris += [(b, a, ra), (b, ra, rb)]
        prev = ring
    verts.append(np.asarray(tip))
    t = len(verts) - 1
    m = len(prev)
    for j in range(m):
        tris.append((prev[(j + 1) % m], prev[j], t))


def _bone_distances(vertices: np.ndarray, tree: KinematicTree, bone_ends: np.ndarray) -> np.ndarray:
    """(N, J) distances from each vertex to each bone segment."""
    start = tree.rest_positions()
    seg = bone_ends - start
    rel = vertices[:, None, :] - start[None, :, :]
    t = np.clip(np.einsum("njc,jc->nj", rel, seg) / np.maximum(np.einsum("jc,jc->j", seg, seg), 1e-12), 0.0, 1.0)
    return np.linalg.norm(rel - t[..., None] * seg[None], axis=-1)


def _skin_weights(dist: np.ndarray, falloff: float) -> np.ndarray:
    """Soft-min of vertex-to-bone-segment distances; rows sum to one."""
    w = np.exp(-(dist - dist.min(axis=1, keepdims=True)) / falloff)
    w[w < 1e-6] = 0.0
    return w / w.sum(axis=1, keepdims=True)


def _softness(dist: np.ndarray) -> np.ndarray:
    # flesh far from the nearest bone moves more
    r = dist.min(axis=1)
    return 0.3 + 0.7 * r / r.max()


def build_body(plan: BodyPlan | str, shape_params=None, res: int = 1) -> Body:
    """Rest mesh, kinematic tree and skinning weights for a body plan.

    ``res`` multiplies the torso lattice and tube sampling (about 300 faces
    at res=1 for the humanoid and ~1100 at res=2).
    """
    if isinstance(plan, str):
        plan = PLANS[plan]
    if shape_params is None:
        shape_params = np.ones(len(plan.beta_keys))
    shape_params = np.asarray(shape_params, dtype=float)
    d = plan.scaled_dims(shape_params)
    if plan.kind == "tube":
        body = _build_tube(plan, d, res)
    else:
        body = _build_torso_body(plan, d, res)
    body.shape_params = shape_params
    check_manifold(body.mesh)
    if n_components(body.mesh) != 1:
        raise RuntimeError(f"{plan.name} body is not connected")
    return body


def _build_tube(plan: BodyPlan, d: dict, res: int) -> Body:
    from .primitives import tube

    sides, rings = 10 * res, 14 * res
    mesh = tube(length=d["length"], radius=d["radius"], sides=sides, rings=rings)
    length = d["length"]
    names = ("base", "mid", "wrist")
    offsets = np.array([[0, 0, 0], [0, 0, length / 3], [0, 0, length / 3]], float)
    tree = KinematicTree(names, np.array([-1, 0, 1]), offsets)
    ends = np.array([[0, 0, length / 3], [0, 0, 2 * length / 3], [0, 0, length]])
    dist = _bone_distances(mesh.vertices, tree, ends)
    w = _skin_weights(dist, falloff=0.25 * d["radius"])
    return Body(plan.name, mesh, tree, w, float(length), np.zeros(0), _softness(dist))


def _build_torso_body(plan: BodyPlan, d: dict, res: int) -> Body:
    cells = tuple(c * res for c in plan.cells)
    holes = [(ls.side[0], ls.side[1], tuple(c * res for c in ls.cell), tuple(s * res for s in ls.size)) for ls in plan.limbs]
    lattice, tris = _box_surface(cells, holes)

    legs = [ls for ls in plan.limbs if ls.direction == (0, 0, -1)]
    leg_len = max((sum(d[k] for k in ls.lengths) for ls in legs), default=0.0)
    ext = np.array([d["torso_w"], d["torso_d"], d["torso_h"]])
    lo = np.array([-ext[0] / 2, -ext[1] / 2, leg_len])
    verts = list(lo + lattice / np.array(cells) * ext)

    names = ["root", "spine"] if plan.spine else ["root"]
    parents = [-1, 0] if plan.spine else [-1]
    positions = [lo + ext * [0.5, 0.5, 0.15]]
    if plan.spine:
        positions.append(lo + ext * [0.5, 0.5, 0.55])
    ends = {0: positions[1] if plan.spine else lo + ext * [0.5, 0.5, 1.0]}
    if plan.spine:
        ends[1] = lo + ext * [0.5, 0.5, 0.9]

    loops = _boundary_loops(tris)
    centers_of = [np.mean([verts[k] for k in lp], axis=0) for lp in loops]
    for ls, hole in zip(plan.limbs, holes):
        axis, sign, c, s = hole
        b, cc = (axis + 1) % 3, (axis + 2) % 3
        target = np.zeros(3)
        target[axis] = cells[axis] if sign > 0 else 0
        target[b] = c[0] + s[0] / 2
        target[cc] = c[1] + s[1] / 2
        target = lo + target / np.array(cells) * ext
        k = int(np.argmin([np.linalg.norm(x - target) for x in centers_of]))
        loop = loops[k]
        direction = np.asarray(ls.direction, float)
        direction /= np.linalg.norm(direction)

        joint_pos = [target]
        for key in ls.lengths:
            joint_pos.append(joint_pos[-1] + d[key] * direction)
        segs = res
        centers, radii = [], []
        for bone, rkey in enumerate(ls.radii):
            for q in range(1, segs + 1):
                centers.append(joint_pos[bone] + (joint_pos[bone + 1] - joint_pos[bone]) * q / segs)
                radii.append(d[rkey])
        # shorten the last ring so the cap tip lands on the chain end
        tip = joint_pos[-1]
        centers[-1] = tip - direction * d[ls.radii[-1]] * ls.tip_scale
        _attach_tube(verts, tris, loop, centers, radii, direction, tip)

        parent = names.index(ls.parent)
        for q, jn in enumerate(ls.joints):
            names.append(jn)
            parents.append(parent if q == 0 else len(names) - 2)
            positions.append(joint_pos[q])
            ends[len(names) - 1] = joint_pos[q + 1]

    positions = np.array(positions)
    offsets = positions.copy()
    for j in range(1, len(names)):
        offsets[j] = positions[j] - positions[parents[j]]
    tree = KinematicTree(tuple(names), np.array(parents), offsets)
    bone_ends = np.array([ends[j] for j in range(len(names))])
    mesh = TriMesh(np.array(verts), np.array(tris))
    falloff = 0.3 * min(d[k] for ls in plan.limbs for k in ls.radii)
    dist = _bone_distances(mesh.vertices, tree, bone_ends)
    w = _skin_weights(dist, falloff)
    height = float(mesh.vertices[:, 2].max() - mesh.vertices[:, 2].min())
    return Body(plan.name, mesh, tree, w, height, np.zeros(0), _softness(dist))


# ---------------------------------------------------------------------------
# motions


@dataclass(frozen=True)
class JointWave:
    joint: str
    axis: int
    amplitude: float
    frequency: float  # Hz
    phase: float = 0.0


MOTIONS: dict[str, dict[str, tuple[JointWave, ...]]] = {
    "humanoid": {
        "walk": (
            JointWave("root", 2, 0.4, 0.3),
            JointWave("spine", 2, 0.12, 1.0, 0.5),
            JointWave("l_hip", 0, 0.45, 1.0),
            JointWave("r_hip", 0, 0.45, 1.0, np.pi),
            JointWave("l_knee", 0, 0.35, 1.0, 0.8),
            JointWave("r_knee", 0, 0.35, 1.0, 0.8 + np.pi),
            JointWave("l_shoulder", 0, 0.4, 1.0, np.pi),
            JointWave("r_shoulder", 0, 0.4, 1.0),
            JointWave("l_elbow", 0, 0.25, 1.0, np.pi + 0.5),
            JointWave("r_elbow", 0, 0.25, 1.0, 0.5),
            JointWave("head", 0, 0.1, 2.0),
        ),
        "wave": (
            JointWave("root", 2, 0.3, 0.25, 1.0),
            JointWave("r_shoulder", 1, 0.6, 0.5, -0.3),
            JointWave("r_elbow", 2, 0.5, 1.5),
            JointWave("l_shoulder", 1, 0.3, 0.5, 2.0),
            JointWave("l_elbow", 2, 0.2, 0.7),
            JointWave("spine", 1, 0.12, 0.5, 0.3),
            JointWave("neck", 1, 0.15, 0.8),
            JointWave("l_hip", 0, 0.15, 0.6),
            JointWave("r_knee", 0, 0.15, 0.6, 1.0),
        ),
    },
    "quadruped": {
        "walk": (
            JointWave("root", 2, 0.3, 0.3),
            JointWave("fl_hip", 0, 0.3, 1.0),
            JointWave("br_hip", 0, 0.3, 1.0),
            JointWave("fr_hip", 0, 0.3, 1.0, np.pi),
            JointWave("bl_hip", 0, 0.3, 1.0, np.pi),
            JointWave("fl_knee", 0, 0.25, 1.0, 0.7),
            JointWave("fr_knee", 0, 0.25, 1.0, 0.7 + np.pi),
            JointWave("tail", 1, 0.3, 1.5),
            JointWave("neck", 0, 0.15, 1.0),
        ),
        "wave": (
            JointWave("root", 2, 0.3, 0.25),
            JointWave("neck", 2, 0.35, 0.6),
            JointWave("head", 0, 0.3, 1.2),
            JointWave("tail", 0, 0.3, 1.0),
            JointWave("tail", 1, 0.3, 0.7, 1.0),
            JointWave("fl_hip", 0, 0.3, 0.5),
        ),
    },
    "arm": {
        "walk": (
            JointWave("base", 0, 0.3, 0.5),
            JointWave("mid", 0, 0.6, 1.0),
            JointWave("wrist", 0, 0.5, 1.0, 1.0),
        ),
        "wave": (
            JointWave("base", 2, 0.4, 0.3),
            JointWave("mid", 1, 0.7, 0.8),
            JointWave("wrist", 0, 0.6, 1.6, 0.5),
            JointWave("wrist", 1, 0.3, 1.1),
        ),
    },
}


def joint_angles(tree: KinematicTree, waves, frames: int, fps: float = 30.0) -> np.ndarray:
    """(frames, J*3) angle track; every term is offset so frame 0 is the rest pose."""
    t = np.arange(frames) / fps
    out = np.zeros((frames, tree.n_joints, 3))
    for w in waves:
        j = tree.index(w.joint)
        out[:, j, w.axis] += w.amplitude * (np.sin(2 * np.pi * w.frequency * t + w.phase) - np.sin(w.phase))
    return out.reshape(frames, -1)


def jitter_waves(waves, rng: np.random.Generator, amount: float = 0.15):
    return tuple(
        JointWave(w.joint, w.axis, w.amplitude * rng.uniform(1 - amount, 1 + amount),
                  w.frequency * rng.uniform(1 - amount / 2, 1 + amount / 2), w.phase + rng.uniform(-0.5, 0.5))
        for w in waves
    )


def secondary_motion(
    positions: np.ndarray,
    fps: float,
    softness: np.ndarray,
    gain: float = 1.0,
    frequency: float = 2.5,
    damping: float = 0.3,
    substeps: int = 8,
) -> np.ndarray:
    """Soft-tissue lag on top of skinned positions (T, N, 3).

    Each vertex carries a damped spring offset d driven by the skin's own
    acceleration: d'' = -w^2 d - 2 z w d' - gain * softness * a. The
    acceleration is the backward second difference, so the response at a
    frame depends only on earlier frames and the first frame is untouched.
    """
    x = np.asarray(positions, dtype=np.float64)
    if gain == 0.0 or len(x) < 3:
        return x.copy()
    dt = 1.0 / fps
    w = 2.0 * np.pi * frequency
    k = (gain * np.asarray(softness, dtype=np.float64))[:, None]
    d = np.zeros(x.shape[1:])
    v = np.zeros(x.shape[1:])
    out = x.copy()
    h = dt / substeps
    for t in range(2, len(x)):
        acc = (x[t] - 2.0 * x[t - 1] + x[t - 2]) / dt**2
        for _ in range(substeps):
            v += h * (-(w * w) * d - 2.0 * damping * w * v - k * acc)
            d += h * v
        out[t] += d
    return out


@dataclass(eq=False)
class SynthSequence:
    name: str
    body: Body
    manifest: MotionManifest  # world-space motion (root orientation not zeroed)
    frames: np.ndarray  # (T, N, 3) world-space ground truth


def synth_generate(
    plan: str = "humanoid",
    shape_params=None,
    motion: str = "walk",
    frames: int = 64,
    fps: float = 30.0,
    seed: int = 0,
    res: int = 1,
    travel_speed: float = 0.3,
    name: str | None = None,
    dynamics: float = 1.0,
) -> SynthSequence:
    """One synthetic sequence: body, joint-angle track and ground truth.

    Ground truth is linear blend skinning plus a soft-tissue lag whose gain
    is the plan's default times ``dynamics`` (0 gives pure skinning). The
    root carries a slow yaw and the sequence travels along -y at
    ``travel_speed`` m/s; both are part of the world-space ground truth and
    are stripped by preprocessing.
    """
    body = build_body(plan, shape_params, res=res)
    rng = np.random.default_rng(seed)
    waves = jitter_waves(MOTIONS[body.plan][motion], rng) if seed else MOTIONS[body.plan][motion]
    angles = joint_angles(body.tree, waves, frames, fps)
    world = lbs_pose(body.mesh.vertices, body.tree, body.weights, angles)
    world = secondary_motion(world, fps, body.softness, gain=dynamics * PLANS[body.plan].dynamics)
    t = np.arange(frames) / fps
    transforms = np.tile(np.eye(4), (frames, 1, 1))
    transforms[:, 1, 3] = -travel_speed * t
    transforms[:, 2, 3] = 0.01 * np.sin(2 * np.pi * 2.0 * t)
    world = world + transforms[:, None, :3, 3]
    manifest = MotionManifest(
        tree=body.tree,
        angles=angles,
        frame_rate=fps,
        beta=body.beta,
        global_transforms=transforms,
        source_height=body.height,
        name=name or f"{body.plan}_{motion}_{seed}",
    )
    return SynthSequence(manifest.name, body, manifest, world)


def zero_trajectory(plan: str = "humanoid", frames: int = 8, shape_params=None, res: int = 1) -> SynthSequence:
    body = build_body(plan, shape_params, res=res)
    angles = np.zeros((frames, body.tree.n_joints * 3))
    world = lbs_pose(body.mesh.vertices, body.tree, body.weights, angles)
    manifest = MotionManifest(tree=body.tree, angles=angles, beta=body.beta, source_height=body.height, name="static")
    return SynthSequence("static", body, manifest, world)
