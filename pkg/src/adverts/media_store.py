"""File-backed store for frame sequences, the resolution ladder, and projects.

Layout, one directory per sequence (part of the checkpoint contract):

    <root>/sequences/<seq_id>/manifest.json
    <root>/sequences/<seq_id>/frames/<label>/frame_%06d.png
    <root>/sequences/<seq_id>/{depth,masks,alpha,plate,out,...}/...
    <root>/projects/<project_id>.json

Documents are JSON with an explicit ``schema_version``. Writes go through a
temp-file + rename so interrupted jobs never leave half-written documents.
"""

from __future__ import annotations

import hashlib
import json
import os
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imgio
from .errors import MediaStoreError

SCHEMA_VERSION = 1

# Ladder heights; width follows the source aspect ratio rounded to even.
LADDER_RUNGS = (("480p", 480), ("720p", 720), ("1080p", 1080))

FRAME_FILE = "frame_%06d.png"


@dataclass(eq=False)
class Frame:
    """One decoded RGB frame."""

    index: int
    width: int
    height: int
    pixels: np.ndarray  # uint8, (height, width, 3)

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise MediaStoreError("frame dimensions must be positive")
        if self.pixels.shape != (self.height, self.width, 3):
            raise MediaStoreError(
                f"pixel buffer shape {self.pixels.shape} does not match "
                f"{self.height}x{self.width}x3"
            )


@dataclass
class LadderEntry:
    label: str
    width: int
    height: int
    skipped: str | None = None  # reason, when the rung is not materialised

    def to_dict(self):
        return {"label": self.label, "width": self.width, "height": self.height, "skipped": self.skipped}

    @classmethod
    def from_dict(cls, d):
        return cls(d["label"], d["width"], d["height"], d.get("skipped"))


@dataclass
class FrameSequence:
    id: str
    frame_count: int
    fps: float
    width: int
    height: int
    ladder: list[LadderEntry]
    source_hash: str

    def ladder_entry(self, label: str) -> LadderEntry:
        for e in self.ladder:
            if e.label == label:
                return e
        raise MediaStoreError(f"unknown ladder label {label!r}")


@dataclass
class Project:
    """Persisted editor state. Anchor/object/light entries are JSON-shaped
    dicts produced by their owning modules (depth_plane, renderer)."""

    id: str
    sequence_id: str
    plane_anchors: list = field(default_factory=list)
    placed_objects: list = field(default_factory=list)
    lights: list = field(default_factory=list)
    keyframe_annotations: list = field(default_factory=list)
    mask_tracks: list = field(default_factory=list)
    solve_results: dict | None = None
    intrinsics: dict | None = None
    static_camera: bool = False

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "id": self.id,
            "sequence_id": self.sequence_id,
            "plane_anchors": self.plane_anchors,
            "placed_objects": self.placed_objects,
            "lights": self.lights,
            "keyframe_annotations": self.keyframe_annotations,
            "mask_tracks": self.mask_tracks,
            "solve_results": self.solve_results,
            "intrinsics": self.intrinsics,
            "static_camera": self.static_camera,
        }

    @classmethod
    def from_dict(cls, d):
        version = d.get("schema_version")
        if version != SCHEMA_VERSION:
            raise MediaStoreError(f"project schema_version {version} unsupported (want {SCHEMA_VERSION})")
        return cls(
            id=d["id"],
            sequence_id=d["sequence_id"],
            plane_anchors=d.get("plane_anchors", []),
            placed_objects=d.get("placed_objects", []),
            lights=d.get("lights", []),
            keyframe_annotations=d.get("keyframe_annotations", []),
            mask_tracks=d.get("mask_tracks", []),
            solve_results=d.get("solve_results"),
            intrinsics=d.get("intrinsics"),
            static_camera=d.get("static_camera", False),
        )


def write_json_atomic(path: Path, doc: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def even_width_for(height: int, src_w: int, src_h: int) -> int:
    return min(src_w, int(round(src_w / src_h * height / 2.0)) * 2)


class FrameStore:
    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    # -- paths ------------------------------------------------------------

    def sequence_dir(self, sequence_id: str) -> Path:
        return self.root / "sequences" / sequence_id

    def artifact_dir(self, sequence_id: str, *parts) -> Path:
        return self.sequence_dir(sequence_id).joinpath(*parts)

    def frame_path(self, sequence_id: str, index: int, label: str) -> Path:
        return self.sequence_dir(sequence_id) / "frames" / label / (FRAME_FILE % index)

    def project_path(self, project_id: str) -> Path:
        return self.root / "projects" / f"{project_id}.json"

    # -- ingestion ----------------------------------------------------------

    def ingest_video(self, source, fps: float = 30.0, sequence_id: str | None = None) -> FrameSequence:
        """Ingest a directory of frame images or a list of RGB arrays.

        Builds the four-rung resolution ladder (original, 480p, 720p, 1080p);
        rungs taller than the source are recorded as skipped. The sequence id
        defaults to a digest of the content, so re-ingesting identical bytes
        lands on identical artifacts.
        """
        frames = self._load_source(source)
        if not frames:
            raise MediaStoreError("empty source: no frames to ingest")
        h, w = frames[0].shape[:2]
        for i, f in enumerate(frames):
            if f.shape[:2] != (h, w):
                raise MediaStoreError(
                    f"mixed dimensions: frame {i} is {f.shape[1]}x{f.shape[0]}, expected {w}x{h}"
                )

        digest = hashlib.sha256()
        digest.update(f"{w}x{h}x{len(frames)}".encode())
        for f in frames:
            digest.update(f.tobytes())
        source_hash = digest.hexdigest()
        seq_id = sequence_id or ("seq-" + source_hash[:12])

        ladder = [LadderEntry("original", w, h)]
        for label, rung_h in LADDER_RUNGS:
            if rung_h > h:
                ladder.append(LadderEntry(label, w, h, skipped="source smaller"))
            elif rung_h == h:
                ladder.append(LadderEntry(label, w, h, skipped="matches source"))
            else:
                ladder.append(LadderEntry(label, even_width_for(rung_h, w, h), rung_h))

        for i, f in enumerate(frames):
            imgio.write_rgb(self.frame_path(seq_id, i, "original"), f)
        for entry in ladder[1:]:
            if entry.skipped:
                continue
            for i, f in enumerate(frames):
                scaled = imgio.area_downscale(f, entry.width, entry.height)
                imgio.write_rgb(self.frame_path(seq_id, i, entry.label), scaled)

        seq = FrameSequence(
            id=seq_id,
            frame_count=len(frames),
            fps=float(fps),
            width=w,
            height=h,
            ladder=ladder,
            source_hash=source_hash,
        )
        self._write_manifest(seq)
        return seq

    def _load_source(self, source) -> list[np.ndarray]:
        if isinstance(source, (str, Path)):
            src = Path(source)
            if not src.is_dir():
                raise MediaStoreError(f"source directory {src} does not exist")
            paths = sorted(p for p in src.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
            return [imgio.read_rgb(p) for p in paths]
        return [np.asarray(f, dtype=np.uint8) for f in source]

    def _write_manifest(self, seq: FrameSequence, extra: dict | None = None) -> None:
        doc = {
            "schema_version": SCHEMA_VERSION,
            "id": seq.id,
            "frame_count": seq.frame_count,
            "fps": seq.fps,
            "width": seq.width,
            "height": seq.height,
            "ladder": [e.to_dict() for e in seq.ladder],
            "source_hash": seq.source_hash,
        }
        if extra:
            doc.update(extra)
        else:
            existing = self._manifest_doc(seq.id, missing_ok=True) or {}
            for key in ("depth",):
                if key in existing:
                    doc[key] = existing[key]
        write_json_atomic(self.sequence_dir(seq.id) / "manifest.json", doc)

    def _manifest_doc(self, sequence_id: str, missing_ok: bool = False) -> dict | None:
        path = self.sequence_dir(sequence_id) / "manifest.json"
        if not path.exists():
            if missing_ok:
                return None
            raise MediaStoreError(f"unknown sequence {sequence_id!r}")
        doc = json.loads(path.read_text())
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise MediaStoreError(f"manifest schema_version {doc.get('schema_version')} unsupported")
        return doc

    # -- access -------------------------------------------------------------

    def list_sequences(self) -> list[str]:
        base = self.root / "sequences"
        if not base.exists():
            return []
        return sorted(p.name for p in base.iterdir() if (p / "manifest.json").exists())

    def sequence(self, sequence_id: str) -> FrameSequence:
        doc = self._manifest_doc(sequence_id)
        return FrameSequence(
            id=doc["id"],
            frame_count=doc["frame_count"],
            fps=doc["fps"],
            width=doc["width"],
            height=doc["height"],
            ladder=[LadderEntry.from_dict(e) for e in doc["ladder"]],
            source_hash=doc["source_hash"],
        )

    def get_frame(self, sequence_id: str, index: int, label: str = "original") -> Frame:
        seq = self.sequence(sequence_id)
        if not 0 <= index < seq.frame_count:
            raise MediaStoreError(
                f"frame index {index} out of range [0, {seq.frame_count}) for {sequence_id}"
            )
        entry = seq.ladder_entry(label)
        # skipped rungs resolve to the source frames so every ladder label
        # stays resolvable for every index
        actual = "original" if entry.skipped else entry.label
        pixels = imgio.read_rgb(self.frame_path(sequence_id, index, actual))
        return Frame(index=index, width=pixels.shape[1], height=pixels.shape[0], pixels=pixels)

    # -- depth metadata -------------------------------------------------------

    def set_depth_scale(self, sequence_id: str, label: str, scale: float) -> None:
        doc = self._manifest_doc(sequence_id)
        doc.setdefault("depth", {})[label] = {"scale": scale}
        write_json_atomic(self.sequence_dir(sequence_id) / "manifest.json", doc)

    def depth_scale(self, sequence_id: str, label: str = "original") -> float | None:
        doc = self._manifest_doc(sequence_id)
        entry = doc.get("depth", {}).get(label)
        return None if entry is None else entry["scale"]

    # -- projects -------------------------------------------------------------

    def save_project(self, project: Project) -> str:
        if not project.id:
            project.id = "prj-" + uuid.uuid4().hex[:12]
        seq = self.sequence(project.sequence_id)  # raises on dangling reference
        self._validate_project(project, seq)
        write_json_atomic(self.project_path(project.id), project.to_dict())
        return project.id

    def load_project(self, project_id: str) -> Project:
        path = self.project_path(project_id)
        if not path.exists():
            raise MediaStoreError(f"unknown project {project_id!r}")
        return Project.from_dict(json.loads(path.read_text()))

    def list_projects(self) -> list[str]:
        base = self.root / "projects"
        if not base.exists():
            return []
        return sorted(p.stem for p in base.glob("*.json"))

    @staticmethod
    def _validate_project(project: Project, seq: FrameSequence) -> None:
        n = seq.frame_count
        for ann in project.keyframe_annotations:
            if not 0 <= ann["frame_index"] < n:
                raise MediaStoreError(f"keyframe annotation frame {ann['frame_index']} out of range")
        for anchor in project.plane_anchors:
            fi = anchor.get("frame_index")
            if fi is not None and not 0 <= fi < n:
                raise MediaStoreError(f"plane anchor frame {fi} out of range")
        for track in project.mask_tracks:
            a, b = track["frame_range"]
            if not (0 <= a <= b < n):
                raise MediaStoreError(f"mask track range [{a}, {b}] outside [0, {n})")
