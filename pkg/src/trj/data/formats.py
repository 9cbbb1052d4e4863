"""On-disk formats: triangle OBJ, JSON motion manifests, TRJ1 chunked binary
(checkpoints and feature caches), metrics records and the training log."""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..mesh import TriMesh
from .skeleton import KinematicTree

MAGIC = b"TRJ1"
VERSION = 1
MANIFEST_FORMAT = "trj-motion-1"


class FormatError(ValueError):
    pass


def _atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# OBJ


def save_obj(path, mesh: TriMesh | np.ndarray, faces: np.ndarray | None = None) -> None:
    """Write ``v``/``f`` records; 17 significant digits make the round trip exact."""
    if isinstance(mesh, TriMesh):
        vertices, faces = mesh.vertices, mesh.faces
    else:
        vertices = np.asarray(mesh)
    buf = io.StringIO()
    for x, y, z in vertices:
        buf.write(f"v {x:.17g} {y:.17g} {z:.17g}\n")
    for a, b, c in np.asarray(faces) + 1:
        buf.write(f"f {a} {b} {c}\n")
    _atomic_write(Path(path), buf.getvalue().encode("ascii"))


def _obj_index(token: str, n_vertices: int, path, lineno: int) -> int:
    s = token.split("/")[0]
    try:
        i = int(s)
    except ValueError:
        raise FormatError(f"{path}:{lineno}: bad face index {token!r}") from None
    if i < 0:
        i = n_vertices + i + 1
    return i - 1


def load_obj(path) -> TriMesh:
    """Read an ASCII OBJ with triangle faces only (no auto-triangulation)."""
    verts, faces = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise FormatError(f"{path}:{lineno}: vertex needs 3 coordinates")
                try:
                    verts.append([float(p) for p in parts[1:4]])
                except ValueError:
                    raise FormatError(f"{path}:{lineno}: bad vertex coordinate") from None
            elif parts[0] == "f":
                if len(parts) != 4:
                    raise FormatError(f"{path}:{lineno}: face with {len(parts) - 1} vertices; only triangles are accepted")
                faces.append([_obj_index(p, len(verts), path, lineno) for p in parts[1:]])
    if not faces:
        raise FormatError(f"{path}: no faces")
    return TriMesh(np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64))


# ---------------------------------------------------------------------------
# motion manifest


@dataclass(eq=False)
class MotionManifest:
    """Joint-angle track over a kinematic tree plus optional supervision.

    ``gt_meshes`` holds OBJ paths relative to the manifest file, either empty
    or one per frame. ``global_transforms`` are per-frame rigid 4x4 matrices
    mapping canonical (root-zeroed) output into world space.
    """

    tree: KinematicTree
    angles: np.ndarray
    frame_rate: float = 30.0
    beta: np.ndarray = field(default_factory=lambda: np.zeros(16))
    gt_meshes: list[str] = field(default_factory=list)
    global_transforms: np.ndarray | None = None
    source_height: float | None = None
    root_zeroed: bool = False
    name: str = "motion"

    def __post_init__(self):
        self.angles = np.asarray(self.angles, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if self.global_transforms is not None:
            self.global_transforms = np.asarray(self.global_transforms, dtype=np.float64)
        self.validate()

    @property
    def n_frames(self) -> int:
        return self.angles.shape[0]

    def validate(self) -> None:
        j = self.tree.n_joints
        if self.angles.ndim != 2 or self.angles.shape[1] != 3 * j:
            raise FormatError(f"angle array has shape {self.angles.shape}; expected (frames, {3 * j}) for {j} joints")
        if self.n_frames < 1:
            raise FormatError("motion has no frames")
        if not np.all(np.isfinite(self.angles)):
            raise FormatError("angles must be finite")
        if self.gt_meshes and len(self.gt_meshes) != self.n_frames:
            raise FormatError(f"{len(self.gt_meshes)} gt meshes for {self.n_frames} frames")
        if self.global_transforms is not None and self.global_transforms.shape != (self.n_frames, 4, 4):
            raise FormatError(f"global transforms have shape {self.global_transforms.shape}")
        if self.beta.ndim != 1 or not np.all(np.isfinite(self.beta)):
            raise FormatError("beta must be a finite vector")
        if self.frame_rate <= 0:
            raise FormatError("frame rate must be positive")


def _tree_dict(tree: KinematicTree) -> dict:
    return {"names": list(tree.names), "parents": tree.parents.tolist(), "offsets": tree.offsets.tolist()}


def _tree_from_dict(d: dict) -> KinematicTree:
    return KinematicTree(tuple(d["names"]), np.array(d["parents"], dtype=np.int64), np.array(d["offsets"], dtype=np.float64).reshape(-1, 3))


def save_motion(path, manifest: MotionManifest) -> None:
    manifest.validate()
    doc = {
        "format": MANIFEST_FORMAT,
        "name": manifest.name,
        "tree": _tree_dict(manifest.tree),
        "frame_rate": manifest.frame_rate,
        "frames": manifest.n_frames,
        "angles": manifest.angles.tolist(),
        "beta": manifest.beta.tolist(),
        "gt_meshes": list(manifest.gt_meshes),
        "global_transforms": None if manifest.global_transforms is None else manifest.global_transforms.tolist(),
        "source_height": manifest.source_height,
        "root_zeroed": manifest.root_zeroed,
    }
    _atomic_write(Path(path), json.dumps(doc, indent=1).encode("utf-8"))


def load_motion(path, check_files: bool = True) -> MotionManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise FormatError(f"{path}: not valid JSON ({err})") from None
    if doc.get("format") != MANIFEST_FORMAT:
        raise FormatError(f"{path}: unknown manifest format {doc.get('format')!r}")
    try:
        tree = _tree_from_dict(doc["tree"])
        angles = np.array(doc["angles"], dtype=np.float64)
        if angles.ndim == 1 and angles.size == 0:
            angles = angles.reshape(0, 3 * tree.n_joints)
        if angles.shape[0] != doc["frames"]:
            raise FormatError(f"{path}: header says {doc['frames']} frames, found {angles.shape[0]} angle rows")
        gt = doc.get("gt_meshes") or []
        if check_files:
            for rel in gt:
                if not (path.parent / rel).exists():
                    raise FormatError(f"{path}: gt mesh {path.parent / rel} does not exist")
        gtr = doc.get("global_transforms")
        m = MotionManifest(
            tree=tree,
            angles=angles,
            frame_rate=doc["frame_rate"],
            beta=np.array(doc["beta"], dtype=np.float64),
            gt_meshes=list(gt),
            global_transforms=None if gtr is None else np.array(gtr, dtype=np.float64),
            source_height=doc.get("source_height"),
            root_zeroed=bool(doc.get("root_zeroed", False)),
            name=doc.get("name", path.stem),
        )
    except KeyError as err:
        raise FormatError(f"{path}: missing key {err}") from None
    except ValueError as err:
        if isinstance(err, FormatError):
            raise
        raise FormatError(f"{path}: {err}") from None
    return m


def load_gt_frames(path, manifest: MotionManifest) -> np.ndarray:
    """Stack the manifest's gt OBJ frames into (T, N, 3)."""
    base = Path(path).parent
    if not manifest.gt_meshes:
        raise FormatError(f"{path}: manifest has no gt meshes")
    frames = []
    for k, rel in enumerate(manifest.gt_meshes):
        p = base / rel
        if not p.exists():
            raise FormatError(f"{path}: gt frame {k} missing ({p})")
        frames.append(load_obj(p).vertices)
    if len({f.shape for f in frames}) != 1:
        raise FormatError(f"{path}: gt frames have differing vertex counts")
    return np.stack(frames)


# ---------------------------------------------------------------------------
# TRJ1 chunked binary


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def encode_chunks(arrays: dict[str, np.ndarray], config: dict | None = None) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", VERSION))
    out.write(_pack_str(json.dumps(config or {}, sort_keys=True)))
    out.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        a = np.asarray(arr)
        if a.dtype.kind not in "fiub":
            raise FormatError(f"chunk {name!r} has unsupported dtype {a.dtype}")
        le = a.astype(a.dtype.newbyteorder("<"), copy=False)
        out.write(_pack_str(name))
        out.write(_pack_str(le.dtype.str))
        out.write(struct.pack("<I", a.ndim))
        out.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        payload = np.ascontiguousarray(le).tobytes()
        out.write(struct.pack("<Q", len(payload)))
        out.write(payload)
    body = out.getvalue()
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated")
        b = self.data[self.pos : self.pos + n]
        self.pos += n
        return b

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def decode_chunks(data: bytes, path="<bytes>") -> tuple[dict[str, np.ndarray], dict]:
    if len(data) < 4 + 32 or data[:4] != MAGIC:
        raise FormatError(f"{path}: not a TRJ1 file")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise FormatError(f"{path}: checksum mismatch (file truncated or corrupted)")
    r = _Reader(body, path)
    r.take(4)
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    config = json.loads(r.string())
    arrays = {}
    for _ in range(r.u32()):
        name = r.string()
        dtype = np.dtype(r.string())
        ndim = r.u32()
        shape = tuple(r.u64() for _ in range(ndim))
        payload = r.take(r.u64())
        arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
        arrays[name] = arr.astype(dtype.newbyteorder("="), copy=True)
    if r.pos != len(body):
        raise FormatError(f"{path}: trailing bytes after last chunk")
    return arrays, config


def write_chunks(path, arrays: dict[str, np.ndarray], config: dict | None = None) -> None:
    _atomic_write(Path(path), encode_chunks(arrays, config))


def read_chunks(path) -> dict[str, np.ndarray]:
    return decode_chunks(Path(path).read_bytes(), path)[0]


@dataclass(eq=False)
class Checkpoint:
    arrays: dict[str, np.ndarray]
    config: dict
    version: int = VERSION


def save_checkpoint(path, params: dict, config: dict | None = None) -> None:
    """Parameters may be Tensors or arrays; names must be unique keys."""
    arrays = {k: np.asarray(getattr(v, "data", v)) for k, v in params.items()}
    write_chunks(path, arrays, config)


def load_checkpoint(path, params: dict | None = None) -> Checkpoint:
    """Read a checkpoint; with ``params`` given, copy values into them in place
    and fail on missing names or shape changes."""
    arrays, config = decode_chunks(Path(path).read_bytes(), path)
    if params is not None:
        for name, p in params.items():
            if name not in arrays:
                raise FormatError(f"{path}: checkpoint has no tensor {name!r}")
            target = p if isinstance(p, np.ndarray) else p.data
            if target.shape != arrays[name].shape:
                raise FormatError(f"{path}: tensor {name!r} has shape {arrays[name].shape}, model expects {target.shape}")
            target[...] = arrays[name]
    return Checkpoint(arrays, config)


# ---------------------------------------------------------------------------
# metrics and log


METRIC_KEYS = ("l2_v_cm", "l2_j", "l2_n_deg", "jitter")


def save_metrics(path, records: dict[str, dict[str, float]], aggregate: dict[str, float] | None = None) -> None:
    """One record per sequence (sorted by name) with L2-V, L2-J, L2-N and jitter."""
    doc = {"records": [{"name": k, **{m: float(v[m]) for m in METRIC_KEYS}} for k, v in sorted(records.items())]}
    if aggregate is not None:
        doc["aggregate"] = {m: float(aggregate[m]) for m in METRIC_KEYS}
    _atomic_write(Path(path), (json.dumps(doc, indent=1) + "\n").encode("utf-8"))


def load_metrics(path) -> dict:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return {r["name"]: {m: r[m] for m in METRIC_KEYS} for r in doc["records"]}


def append_log(path, epoch: int, l_vertex: float, l_jacobian: float, total: float) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(f"{epoch} {l_vertex:.9e} {l_jacobian:.9e} {total:.9e}\n")


def read_log(path) -> list[tuple[int, float, float, float]]:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            e, a, b, c = line.split()
            rows.append((int(e), float(a), float(b), float(c)))
    return rows
