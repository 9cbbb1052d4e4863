"""Dataset directories: ``index.json`` plus one folder per sequence holding
``rest.obj``, ``motion.json`` and world-space gt frames under ``gt/``."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .formats import FormatError, _atomic_write, load_gt_frames, load_motion, load_obj, save_motion, save_obj
from .preprocess import CanonicalSequence, canonicalize
from .synth import SynthSequence

INDEX = "index.json"


@dataclass(frozen=True)
class IndexEntry:
    name: str
    rest: str
    motion: str
    category: str = ""
    split: str = "train"


def write_sequence(root: Path, seq: SynthSequence, category: str = "", split: str = "train") -> IndexEntry:
    d = Path(root) / seq.name
    save_obj(d / "rest.obj", seq.body.mesh)
    gt = []
    for k, frame in enumerate(seq.frames):
        rel = f"gt/frame_{k:04d}.obj"
        save_obj(d / rel, frame, seq.body.mesh.faces)
        gt.append(rel)
    m = seq.manifest
    m.gt_meshes = gt
    save_motion(d / "motion.json", m)
    return IndexEntry(seq.name, f"{seq.name}/rest.obj", f"{seq.name}/motion.json", category, split)


def write_index(root: Path, entries: list[IndexEntry], config: dict | None = None) -> None:
    doc = {"sequences": [e.__dict__ for e in entries], "config": config or {}}
    _atomic_write(Path(root) / INDEX, (json.dumps(doc, indent=1, sort_keys=True) + "\n").encode("utf-8"))


def read_index(root) -> tuple[list[IndexEntry], dict]:
    path = Path(root) / INDEX
    if not path.exists():
        raise FormatError(f"{path}: dataset index not found")
    doc = json.loads(path.read_text(encoding="utf-8"))
    try:
        entries = [IndexEntry(**e) for e in doc["sequences"]]
    except (KeyError, TypeError) as err:
        raise FormatError(f"{path}: bad index ({err})") from None
    return entries, doc.get("config", {})


def load_sequence(root, entry: IndexEntry, with_gt: bool = True) -> CanonicalSequence:
    root = Path(root)
    rest = load_obj(root / entry.rest)
    mpath = root / entry.motion
    manifest = load_motion(mpath)
    frames = load_gt_frames(mpath, manifest) if with_gt and manifest.gt_meshes else None
    if frames is not None and frames.shape[1] != rest.n_vertices:
        raise FormatError(f"{mpath}: gt frames have {frames.shape[1]} vertices, rest mesh {root / entry.rest} has {rest.n_vertices}")
    return canonicalize(entry.name, rest, manifest, frames)


def load_dataset(root, split: str | None = None, category: str | None = None) -> list[CanonicalSequence]:
    entries, _ = read_index(root)
    out = []
    for e in entries:
        if split is not None and e.split != split:
            continue
        if category is not None and e.category != category:
            continue
        out.append(load_sequence(root, e))
    if not out:
        raise FormatError(f"{root}: no sequences match split={split!r} category={category!r}")
    return out


def from_synth(seq: SynthSequence) -> CanonicalSequence:
    """In-memory equivalent of writing ``seq`` and loading it back."""
    return canonicalize(seq.name, seq.body.mesh, seq.manifest, seq.frames)

