"""Triangle meshes: a minimal text format, validation, and the built-in
primitive library (cube, sphere, duck-ish blob) used by tests and demos.

Mesh convention: +Y is "up" (mapped onto the anchor plane normal when an
object is placed), right-handed, counter-clockwise front faces.

Text format, one statement per line (``#`` comments allowed)::

    mesh <name>
    color <r> <g> <b>            # base colour, floats in [0, 1]
    v <x> <y> <z>                # vertex
    vn <nx> <ny> <nz>            # optional: normal for the previous vertex
    f <i> <j> <k>                # 0-based vertex indices, CCW
    fc <r> <g> <b>               # optional: colour for the previous face

Missing normals are computed as area-weighted face-normal averages.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import RenderError


@dataclass(eq=False)
class Mesh:
    name: str
    vertices: np.ndarray  # (N, 3) float
    triangles: np.ndarray  # (M, 3) int
    normals: np.ndarray | None = None  # (N, 3) unit vectors
    base_color: np.ndarray = field(default_factory=lambda: np.array([0.8, 0.8, 0.8]))
    face_colors: np.ndarray | None = None  # (M, 3) overrides base colour

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (
            self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)
        ):
            raise RenderError(f"mesh {self.name}: face index out of range")
        if self.normals is None:
            self.normals = vertex_normals(self.vertices, self.triangles)
        else:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(self.normals) != len(self.vertices):
                raise RenderError(f"mesh {self.name}: normal count != vertex count")
            lens = np.linalg.norm(self.normals, axis=1)
            if (np.abs(lens - 1.0) > 1e-6).any():
                raise RenderError(f"mesh {self.name}: normals must be unit length")
        self.base_color = np.asarray(self.base_color, dtype=np.float64).reshape(3)

    def colors_per_face(self) -> np.ndarray:
        if self.face_colors is not None:
            return np.asarray(self.face_colors, dtype=np.float64).reshape(-1, 3)
        return np.tile(self.base_color, (len(self.triangles), 1))


def vertex_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Area-weighted average of adjacent face normals."""
    n = np.zeros_like(vertices)
    a, b, c = (vertices[triangles[:, i]] for i in range(3))
    fn = np.cross(b - a, c - a)  # length = 2 * area
    for i in range(3):
        np.add.at(n, triangles[:, i], fn)
    lens = np.linalg.norm(n, axis=1, keepdims=True)
    lens[lens == 0] = 1.0
    return n / lens


# ---------------------------------------------------------------------------
# text format


def parse_mesh(text: str) -> Mesh:
    name = "unnamed"
    verts: list[list[float]] = []
    norms: dict[int, list[float]] = {}
    faces: list[list[int]] = []
    fcolors: dict[int, list[float]] = {}
    base = [0.8, 0.8, 0.8]
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        kind, args = parts[0], parts[1:]
        try:
            if kind == "mesh":
                name = args[0]
            elif kind == "v":
                verts.append([float(x) for x in args[:3]])
            elif kind == "vn":
                if not verts:
                    raise RenderError("vn before any v")
                norms[len(verts) - 1] = [float(x) for x in args[:3]]
            elif kind == "f":
                faces.append([int(x) for x in args[:3]])
            elif kind == "fc":
                if not faces:
                    raise RenderError("fc before any f")
                fcolors[len(faces) - 1] = [float(x) for x in args[:3]]
            elif kind == "color":
                base = [float(x) for x in args[:3]]
            else:
                raise RenderError(f"unknown statement {kind!r}")
        except (ValueError, IndexError) as e:
            raise RenderError(f"mesh parse error at line {lineno}: {raw!r}") from e
    if not verts or not faces:
        raise RenderError("mesh needs at least one vertex and one face")
    normals = None
    if norms:
        if len(norms) != len(verts):
            raise RenderError("either every vertex or none must carry a normal")
        normals = np.array([norms[i] for i in range(len(verts))])
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    face_colors = None
    if fcolors:
        fc = np.tile(np.asarray(base, dtype=np.float64), (len(faces), 1))
        for i, c in fcolors.items():
            fc[i] = c
        face_colors = fc
    return Mesh(
        name=name,
        vertices=np.array(verts),
        triangles=np.array(faces),
        normals=normals,
        base_color=np.array(base),
        face_colors=face_colors,
    )


def format_mesh(mesh: Mesh) -> str:
    lines = [f"mesh {mesh.name}"]
    lines.append("color " + " ".join(f"{c:.6g}" for c in mesh.base_color))
    for v, n in zip(mesh.vertices, mesh.normals):
        lines.append("v " + " ".join(f"{x:.9g}" for x in v))
        lines.append("vn " + " ".join(f"{x:.9g}" for x in n))
    fc = mesh.face_colors
    for i, f in enumerate(mesh.triangles):
        lines.append(f"f {f[0]} {f[1]} {f[2]}")
        if fc is not None:
            lines.append("fc " + " ".join(f"{x:.6g}" for x in fc[i]))
    return "\n".join(lines) + "\n"


def load_mesh(path) -> Mesh:
    return parse_mesh(Path(path).read_text())


def save_mesh(path, mesh: Mesh) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(format_mesh(mesh))


# ---------------------------------------------------------------------------
# primitives


def cube(size: float = 1.0, color=(0.8, 0.2, 0.2)) -> Mesh:
    """Axis-aligned cube of edge ``size`` sitting on y = 0."""
    s = size / 2.0
    v = np.array(
        [
            [-s, 0, -s], [s, 0, -s], [s, 0, s], [-s, 0, s],
            [-s, size, -s], [s, size, -s], [s, size, s], [-s, size, s],
        ],
        dtype=np.float64,
    )
    f = np.array(
        [
            [0, 2, 1], [0, 3, 2],  # bottom (y=0, facing -y)
            [4, 5, 6], [4, 6, 7],  # top
            [0, 1, 5], [0, 5, 4],  # back (-z)
            [2, 3, 7], [2, 7, 6],  # front (+z)
            [3, 0, 4], [3, 4, 7],  # left
            [1, 2, 6], [1, 6, 5],  # right
        ]
    )
    return Mesh(name="cube", vertices=v, triangles=f, base_color=np.asarray(color, dtype=np.float64))


def sphere(radius: float = 0.5, rings: int = 8, sectors: int = 12, color=(0.2, 0.5, 0.8)) -> Mesh:
    """UV sphere centred so it rests on y = 0."""
    verts, norms = [], []
    for i in range(rings + 1):
        theta = math.pi * i / rings
        for j in range(sectors):
            phi = 2 * math.pi * j / sectors
            n = np.array(
                [math.sin(theta) * math.cos(phi), -math.cos(theta), math.sin(theta) * math.sin(phi)]
            )
            verts.append(radius * n + [0, radius, 0])
            norms.append(n)
    faces = []
    for i in range(rings):
        for j in range(sectors):
            a = i * sectors + j
            b = i * sectors + (j + 1) % sectors
            c = (i + 1) * sectors + (j + 1) % sectors
            d = (i + 1) * sectors + j
            if i > 0:
                faces.append([a, b, c])
            if i < rings - 1:
                faces.append([a, c, d])
    return Mesh(
        name="sphere",
        vertices=np.array(verts),
        triangles=np.array(faces),
        normals=np.array(norms),
        base_color=np.asarray(color, dtype=np.float64),
    )


def duck(color=(0.95, 0.8, 0.1)) -> Mesh:
    """Duck-ish blob: body + head spheres and a beak wedge, merged."""
    parts = []
    body = sphere(radius=0.5, rings=8, sectors=12, color=color)
    head = sphere(radius=0.28, rings=6, sectors=10, color=color)
    head.vertices = head.vertices + np.array([0.35, 0.55, 0.0])
    beak = cube(size=0.18, color=(0.9, 0.45, 0.05))
    beak.vertices = beak.vertices * np.array([1.6, 0.5, 1.0]) + np.array([0.72, 0.95, 0.0])
    parts = [body, head, beak]
    verts, faces, fcolors, norms = [], [], [], []
    off = 0
    for p in parts:
        verts.append(p.vertices)
        norms.append(p.normals)
        faces.append(p.triangles + off)
        fcolors.append(p.colors_per_face())
        off += len(p.vertices)
    return Mesh(
        name="duck",
        vertices=np.vstack(verts),
        triangles=np.vstack(faces),
        normals=np.vstack(norms),
        base_color=np.asarray(color, dtype=np.float64),
        face_colors=np.vstack(fcolors),
    )


_BUILTINS = {"cube": cube, "sphere": sphere, "duck": duck}


def get_mesh(mesh_id: str, assets_dir=None) -> Mesh:
    """Resolve a mesh id: an ``assets/<id>.mesh`` file wins over built-ins."""
    if assets_dir is not None:
        path = Path(assets_dir) / f"{mesh_id}.mesh"
        if path.exists():
            return load_mesh(path)
    if mesh_id in _BUILTINS:
        return _BUILTINS[mesh_id]()
    raise RenderError(f"unknown mesh {mesh_id!r}")
