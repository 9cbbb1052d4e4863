"""Canonicalization of world-space motion: root-orientation zeroing, global
transform tracks and translation-free ground truth."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..mesh import TriMesh, vertex_masses
from .formats import MotionManifest
from .skeleton import euler_to_matrix


def _affine(rot: np.ndarray, trans: np.ndarray) -> np.ndarray:
    m = np.zeros(rot.shape[:-2] + (4, 4))
    m[..., :3, :3] = rot
    m[..., :3, 3] = trans
    m[..., 3, 3] = 1.0
    return m


def check_rigid(transforms: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    t = np.asarray(transforms, dtype=np.float64)
    if t.shape[-2:] != (4, 4):
        raise ValueError(f"transforms must be 4x4, got {t.shape}")
    r = t[..., :3, :3]
    det = np.linalg.det(r)
    ortho = np.abs(np.einsum("...ji,...jk->...ik", r, r) - np.eye(3)).max(axis=(-2, -1))
    bad = np.flatnonzero((np.abs(det - 1.0) > tol) | (ortho > tol) | np.any(t[..., 3, :] != [0, 0, 0, 1], axis=-1).ravel())
    if bad.size:
        raise ValueError(f"transform {bad[0]} is not rigid (det {det.ravel()[bad[0]]:.9f})")
    return t


def apply_global_transform(positions: np.ndarray, transforms: np.ndarray, height_scale: float = 1.0) -> np.ndarray:
    """x -> R x + s t per frame, with the translation scaled by the
    target-to-source height ratio ``s``."""
    if not height_scale > 0:
        raise ValueError(f"height scale must be positive, got {height_scale}")
    x = np.asarray(positions, dtype=np.float64)
    t = check_rigid(transforms)
    if t.shape[:-2] != x.shape[:-2]:
        raise ValueError(f"{t.shape[0]} transforms for positions of shape {x.shape}")
    return np.einsum("...ij,...nj->...ni", t[..., :3, :3], x) + height_scale * t[..., None, :3, 3]


def root_transform_track(manifest: MotionManifest) -> np.ndarray:
    """Per-frame rigid motion induced by the root's rotation about its rest position."""
    rot = euler_to_matrix(manifest.angles[:, :3])
    p0 = manifest.tree.offsets[0]
    return _affine(rot, p0 - rot @ p0)


def zero_root_orientation(manifest: MotionManifest) -> MotionManifest:
    """Move the root rotation out of the angles and into the global transforms.

    Poses then stay front facing; the returned transforms map the zeroed
    motion back to the original world placement.
    """
    if manifest.root_zeroed or not np.any(manifest.angles[:, :3]):
        return replace(manifest, angles=manifest.angles.copy(), root_zeroed=True)
    base = manifest.global_transforms if manifest.global_transforms is not None else np.tile(np.eye(4), (manifest.n_frames, 1, 1))
    transforms = base @ root_transform_track(manifest)
    angles = manifest.angles.copy()
    angles[:, :3] = 0.0
    return replace(manifest, angles=angles, global_transforms=transforms, root_zeroed=True)


@dataclass(eq=False)
class CanonicalSequence:
    """Training tuple: rest mesh, root-zeroed motion and canonical gt.

    ``frames`` have the global transform removed and are re-centred so their
    mass-weighted centroid matches X_0's; the shift is folded into
    ``manifest.global_transforms`` so ``apply_global_transform`` recovers
    the world-space sequence.
    """

    name: str
    rest: TriMesh
    manifest: MotionManifest
    frames: np.ndarray | None

    @property
    def n_frames(self) -> int:
        return self.manifest.n_frames


def canonicalize(name: str, rest: TriMesh, manifest: MotionManifest, world_frames: np.ndarray | None) -> CanonicalSequence:
    m = zero_root_orientation(manifest)
    if world_frames is None:
        return CanonicalSequence(name, rest, m, None)
    world = np.asarray(world_frames, dtype=np.float64)
    if world.shape != (m.n_frames, rest.n_vertices, 3):
        raise ValueError(f"{name}: gt frames have shape {world.shape}, expected ({m.n_frames}, {rest.n_vertices}, 3)")
    g = m.global_transforms if m.global_transforms is not None else np.tile(np.eye(4), (m.n_frames, 1, 1))
    inv = np.linalg.inv(check_rigid(g))
    canon = np.einsum("tij,tnj->tni", inv[:, :3, :3], world) + inv[:, None, :3, 3]
    w = vertex_masses(rest)
    shift = (np.einsum("n,tnc->tc", w, canon) - w @ rest.vertices) / w.sum()
    canon = canon - shift[:, None, :]
    g = g @ _affine(np.broadcast_to(np.eye(3), shift.shape[:1] + (3, 3)), shift)
    return CanonicalSequence(name, rest, replace(m, global_transforms=g), canon)
