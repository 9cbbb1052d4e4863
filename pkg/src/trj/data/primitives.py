"""Small procedural meshes used by the generator and the test-suite."""

from __future__ import annotations

import numpy as np

from ..mesh import TriMesh


def icosphere(subdivisions: int = 2, radius: float = 1.0) -> TriMesh:
    """Loop-style subdivided icosahedron projected to the sphere (20 * 4**s faces)."""
    t = (1.0 + 5.0**0.5) / 2.0
    v = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    f = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.array(p, dtype=float) / np.linalg.norm(p) for p in v]
    faces = [tuple(x) for x in f]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        nxt = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nxt += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = nxt
    return TriMesh(radius * np.array(verts), np.array(faces))


def grid(nx: int, ny: int, size: tuple[float, float] = (1.0, 1.0), jitter: float = 0.0, seed: int = 0) -> TriMesh:
    """Flat z=0 triangulated grid with (nx+1)*(ny+1) vertices, normals +z."""
    xs = np.linspace(0.0, size[0], nx + 1)
    ys = np.linspace(0.0, size[1], ny + 1)
    xx, yy = np.meshgrid(xs, ys, indexing="ij")
    v = np.stack([xx.ravel(), yy.ravel(), np.zeros(xx.size)], axis=1)
    if jitter:
        rng = np.random.default_rng(seed)
        inner = (xx.ravel() > 0) & (xx.ravel() < size[0]) & (yy.ravel() > 0) & (yy.ravel() < size[1])
        step = min(size[0] / nx, size[1] / ny)
        v[inner, :2] += rng.uniform(-jitter, jitter, size=(inner.sum(), 2)) * step
    idx = np.arange(v.shape[0]).reshape(nx + 1, ny + 1)
    a, b = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel()
    c, d = idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()
    faces = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    return TriMesh(v, faces)


def tube(
    length: float = 1.0,
    radius: float = 0.1,
    sides: int = 12,
    rings: int = 12,
    axis: int = 2,
) -> TriMesh:
    """Closed capped cylinder along ``axis`` starting at the origin.

    ``rings`` segments of ``sides`` quads plus a triangle fan on each cap,
    i.e. 2 * sides * (rings + 1) faces.
    """
    ang = 2.0 * np.pi * np.arange(sides) / sides
    zs = np.linspace(0.0, length, rings + 1)
    ring = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
    pts = []
    for z in zs:
        pts.append(np.column_stack([ring, np.full(sides, z)]))
    pts = np.concatenate(pts)
    bottom = len(pts)
    top = bottom + 1
    pts = np.vstack([pts, [0.0, 0.0, 0.0], [0.0, 0.0, length]])
    faces = []
    for r in range(rings):
        for s in range(sides):
            a = r * sides + s
            b = r * sides + (s + 1) % sides
            c = a + sides
            d = b + sides
            faces += [(a, b, d), (a, d, c)]
    for s in range(sides):
        faces.append((bottom, (s + 1) % sides, s))
        faces.append((top, rings * sides + s, rings * sides + (s + 1) % sides))
    perm = {2: [0, 1, 2], 0: [2, 0, 1], 1: [1, 2, 0]}[axis]
    return TriMesh(pts[:, perm], np.array(faces))
