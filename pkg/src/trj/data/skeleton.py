"""Kinematic trees, Euler-angle forward kinematics and linear blend skinning.

Skinning exists only to manufacture ground truth; the learned pipeline never
sees a skeleton binding or skinning weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class KinematicTree:
    """Joints in traversal order: ``parents[0] == -1`` and ``parents[j] < j``.

    ``offsets[j]`` is the rest-pose offset of joint j from its parent (the
    root's offset is its absolute rest position), in meters.
    """

    names: tuple[str, ...]
    parents: np.ndarray
    offsets: np.ndarray

    def __post_init__(self):
        parents = np.asarray(self.parents, dtype=np.int64)
        offsets = np.asarray(self.offsets, dtype=np.float64)
        n = len(self.names)
        if parents.shape != (n,) or offsets.shape != (n, 3):
            raise ValueError(f"tree arrays do not match {n} joint names")
        if n == 0 or parents[0] != -1:
            raise ValueError("joint 0 must be the root (parent -1)")
        for j in range(1, n):
            if not 0 <= parents[j] < j:
                raise ValueError(f"joint {j} ({self.names[j]}) has parent {parents[j]}; parents must precede children")
        if not np.all(np.isfinite(offsets)):
            raise ValueError("joint offsets must be finite")
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "offsets", offsets)

    @property
    def n_joints(self) -> int:
        return len(self.names)

    def rest_positions(self) -> np.ndarray:
        pos = np.zeros((self.n_joints, 3))
        for j in range(self.n_joints):
            p = self.parents[j]
            pos[j] = self.offsets[j] + (pos[p] if p >= 0 else 0.0)
        return pos

    def children(self, j: int) -> list[int]:
        return [int(c) for c in np.flatnonzero(self.parents == j)]

    def index(self, name: str) -> int:
        return self.names.index(name)


def euler_to_matrix(angles: np.ndarray) -> np.ndarray:
    """Intrinsic X-Y-Z Euler angles (..., 3) to rotation matrices (..., 3, 3):
    R = Rx(a) @ Ry(b) @ Rz(c)."""
    a = np.asarray(angles, dtype=np.float64)
    ca, sa = np.cos(a[..., 0]), np.sin(a[..., 0])
    cb, sb = np.cos(a[..., 1]), np.sin(a[..., 1])
    cc, sc = np.cos(a[..., 2]), np.sin(a[..., 2])
    r = np.empty(a.shape[:-1] + (3, 3))
    r[..., 0, 0] = cb * cc
    r[..., 0, 1] = -cb * sc
    r[..., 0, 2] = sb
    r[..., 1, 0] = ca * sc + sa * sb * cc
    r[..., 1, 1] = ca * cc - sa * sb * sc
    r[..., 1, 2] = -sa * cb
    r[..., 2, 0] = sa * sc - ca * sb * cc
    r[..., 2, 1] = sa * cc + ca * sb * sc
    r[..., 2, 2] = ca * cb
    return r


def matrix_to_euler(r: np.ndarray) -> np.ndarray:
    """Inverse of ``euler_to_matrix`` away from gimbal lock (|b| < pi/2)."""
    r = np.asarray(r, dtype=np.float64)
    b = np.arcsin(np.clip(r[..., 0, 2], -1.0, 1.0))
    a = np.arctan2(-r[..., 1, 2], r[..., 2, 2])
    c = np.arctan2(-r[..., 0, 1], r[..., 0, 0])
    return np.stack([a, b, c], axis=-1)


def forward_kinematics(tree: KinematicTree, angles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """World rotations (..., J, 3, 3) and joint positions (..., J, 3) for
    relative Euler angles of shape (..., J*3) or (..., J, 3)."""
    a = np.asarray(angles, dtype=np.float64)
    j = tree.n_joints
    if a.shape[-1] == 3 * j and (a.ndim == 1 or a.shape[-2:] != (j, 3)):
        a = a.reshape(a.shape[:-1] + (j, 3))
    if a.shape[-2:] != (j, 3):
        raise ValueError(f"angles of shape {np.shape(angles)} do not match {j} joints")
    local = euler_to_matrix(a)
    rot = np.empty_like(local)
    pos = np.empty(a.shape[:-2] + (j, 3))
    for k in range(j):
        p = tree.parents[k]
        if p < 0:
            rot[..., k, :, :] = local[..., k, :, :]
            pos[..., k, :] = tree.offsets[k]
        else:
            rot[..., k, :, :] = rot[..., p, :, :] @ local[..., k, :, :]
            pos[..., k, :] = pos[..., p, :] + np.einsum("...ij,j->...i", rot[..., p, :, :], tree.offsets[k])
    return rot, pos


def check_weights(weights: np.ndarray, n_vertices: int, n_joints: int) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (n_vertices, n_joints):
        raise ValueError(f"weights have shape {w.shape}, expected ({n_vertices}, {n_joints})")
    if np.any(w < 0):
        raise ValueError("skinning weights must be non-negative")
    bad = np.flatnonzero(np.abs(w.sum(axis=1) - 1.0) > 1e-8)
    if bad.size:
        raise ValueError(f"skinning weights of vertex {bad[0]} sum to {w[bad[0]].sum():.10f}, not 1")
    return w


def lbs_pose(rest_vertices: np.ndarray, tree: KinematicTree, weights: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Linear blend skinning of the rest mesh for one pose (J*3,) or a
    sequence (T, J*3); returns (N, 3) or (T, N, 3)."""
    v = np.asarray(rest_vertices, dtype=np.float64)
    w = check_weights(weights, len(v), tree.n_joints)
    rot, pos = forward_kinematics(tree, angles)
    rest = tree.rest_positions()
    # x' = sum_j w_j (R_j (x - rest_j) + pos_j)
    local = v[None, :, :] - rest[:, None, :]  # (J, N, 3)
    moved = np.einsum("...jab,jnb->...jna", rot, local) + pos[..., :, None, :]
    return np.einsum("nj,...jna->...na", w, moved)
