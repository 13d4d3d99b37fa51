"""File I/O for meshes, point clouds, and voxel masks.

Supported formats:

* Meshes: PLY (ASCII and binary little-endian) and OBJ for reading;
  PLY for writing.
* Point clouds: PLY read/write with properties
  ``x, y, z [, red, green, blue] [, nx, ny, nz]``. Colors are stored
  8-bit and normalized to [0, 1] on load.
* Voxel masks: a raw pair of files — a JSON header
  ``{dims, spacing_mm, origin_mm, packing, order, payload}`` plus a
  bit-packed payload file.

Parse failures raise :class:`~spinereg.errors.MeshParseError` carrying
the byte offset of the offending data.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from ..errors import MeshParseError, UnsupportedFormatError
from .types import PointCloud, TriMesh, VoxelMask

_PLY_DTYPES = {
    "char": np.int8, "int8": np.int8,
    "uchar": np.uint8, "uint8": np.uint8,
    "short": np.int16, "int16": np.int16,
    "ushort": np.uint16, "uint16": np.uint16,
    "int": np.int32, "int32": np.int32,
    "uint": np.uint32, "uint32": np.uint32,
    "float": np.float32, "float32": np.float32,
    "double": np.float64, "float64": np.float64,
}

_COLOR_SCALE = {np.uint8: 255.0, np.uint16: 65535.0}


class _Property:
    def __init__(self, name, dtype, count_dtype=None):
        self.name = name
        self.dtype = dtype
        self.count_dtype = count_dtype  # non-None marks a list property

    @property
    def is_list(self):
        return self.count_dtype is not None


class _Element:
    def __init__(self, name, count):
        self.name = name
        self.count = count
        self.properties: List[_Property] = []


def _parse_ply_header(data: bytes, path) -> Tuple[str, List[_Element], int]:
    if not data.startswith(b"ply"):
        raise MeshParseError(path, 0, "missing 'ply' magic")
    offset = 0
    fmt = None
    elements: List[_Element] = []
    while True:
        newline = data.find(b"\n", offset)
        if newline < 0:
            raise MeshParseError(path, offset, "header has no 'end_header' line")
        line = data[offset:newline].strip().decode("ascii", errors="replace")
        line_offset = offset
        offset = newline + 1
        tokens = line.split()
        if not tokens or tokens[0] in ("ply", "comment", "obj_info"):
            continue
        if tokens[0] == "format":
            if len(tokens) < 2 or tokens[1] not in ("ascii", "binary_little_endian"):
                raise MeshParseError(path, line_offset,
                                     f"unsupported PLY format {tokens[1:] or '??'}")
            fmt = tokens[1]
        elif tokens[0] == "element":
            if len(tokens) != 3:
                raise MeshParseError(path, line_offset, f"malformed element line: {line!r}")
            try:
                elements.append(_Element(tokens[1], int(tokens[2])))
            except ValueError:
                raise MeshParseError(path, line_offset, f"bad element count in {line!r}")
        elif tokens[0] == "property":
            if not elements:
                raise MeshParseError(path, line_offset, "property before any element")
            try:
                if tokens[1] == "list":
                    prop = _Property(tokens[4], _PLY_DTYPES[tokens[3]], _PLY_DTYPES[tokens[2]])
                else:
                    prop = _Property(tokens[2], _PLY_DTYPES[tokens[1]])
            except (KeyError, IndexError):
                raise MeshParseError(path, line_offset, f"unsupported property line: {line!r}")
            elements[-1].properties.append(prop)
        elif tokens[0] == "end_header":
            if fmt is None:
                raise MeshParseError(path, line_offset, "no format line before end_header")
            return fmt, elements, offset
        else:
            raise MeshParseError(path, line_offset, f"unknown header keyword {tokens[0]!r}")


def _ascii_lines_with_offsets(data: bytes, start: int):
    offset = start
    while offset < len(data):
        newline = data.find(b"\n", offset)
        if newline < 0:
            newline = len(data)
        yield offset, data[offset:newline]
        offset = newline + 1


def _read_ply(path) -> Tuple[dict, Optional[np.ndarray]]:
    """Returns ({vertex property name: array}, face index array or None)."""
    path = Path(path)
    data = path.read_bytes()
    fmt, elements, body = _parse_ply_header(data, path)
    vertex_data: dict = {}
    faces: Optional[np.ndarray] = None

    if fmt == "ascii":
        lines = _ascii_lines_with_offsets(data, body)
        for element in elements:
            scalar_names = [p.name for p in element.properties if not p.is_list]
            rows = []
            face_rows = []
            for _ in range(element.count):
                try:
                    line_offset, raw = next(lines)
                except StopIteration:
                    raise MeshParseError(path, len(data),
                                         f"file ends before all {element.name} records")
                tokens = raw.split()
                try:
                    if any(p.is_list for p in element.properties):
                        n = int(tokens[0])
                        idx = [int(t) for t in tokens[1:1 + n]]
                        if len(idx) != n:
                            raise ValueError("short list")
                        face_rows.append(idx)
                    else:
                        if len(tokens) < len(scalar_names):
                            raise ValueError("short record")
                        rows.append([float(t) for t in tokens[:len(scalar_names)]])
                except ValueError as exc:
                    raise MeshParseError(path, line_offset,
                                         f"malformed {element.name} record: {exc}")
            if element.name == "vertex":
                arr = np.asarray(rows, dtype=float).reshape(element.count, len(scalar_names))
                vertex_data = {name: arr[:, i] for i, name in enumerate(scalar_names)}
                # remember raw dtypes for color normalization
                vertex_data["__dtypes__"] = {p.name: p.dtype for p in element.properties}
            elif element.name == "face":
                faces = _triangulate(face_rows, path, body)
    else:  # binary_little_endian
        offset = body
        for element in elements:
            if not any(p.is_list for p in element.properties):
                dtype = np.dtype([(p.name, np.dtype(p.dtype).newbyteorder("<"))
                                  for p in element.properties])
                end = offset + dtype.itemsize * element.count
                if end > len(data):
                    raise MeshParseError(path, offset,
                                         f"file truncated inside {element.name} data")
                records = np.frombuffer(data, dtype=dtype, count=element.count, offset=offset)
                offset = end
                if element.name == "vertex":
                    vertex_data = {p.name: records[p.name].astype(float)
                                   for p in element.properties}
                    vertex_data["__dtypes__"] = {p.name: p.dtype for p in element.properties}
            else:
                if element.name != "face" or len(element.properties) != 1:
                    raise MeshParseError(path, offset,
                                         f"unsupported list layout in element {element.name}")
                prop = element.properties[0]
                count_dt = np.dtype(prop.count_dtype).newbyteorder("<")
                item_dt = np.dtype(prop.dtype).newbyteorder("<")
                face_rows = []
                for _ in range(element.count):
                    if offset + count_dt.itemsize > len(data):
                        raise MeshParseError(path, offset, "file truncated at face count")
                    n = int(np.frombuffer(data, count_dt, 1, offset)[0])
                    offset += count_dt.itemsize
                    end = offset + n * item_dt.itemsize
                    if end > len(data):
                        raise MeshParseError(path, offset, "file truncated inside face indices")
                    face_rows.append(np.frombuffer(data, item_dt, n, offset).astype(np.int64))
                    offset += n * item_dt.itemsize
                faces = _triangulate(face_rows, path, body)

    return vertex_data, faces


def _triangulate(face_rows, path, byte_offset) -> np.ndarray:
    tris = []
    for row in face_rows:
        if len(row) < 3:
            raise MeshParseError(path, byte_offset, f"face with {len(row)} vertices")
        for i in range(1, len(row) - 1):
            tris.append((row[0], row[i], row[i + 1]))
    return np.asarray(tris, dtype=np.int64).reshape(-1, 3)


def _require_xyz(vertex_data, path):
    for name in ("x", "y", "z"):
        if name not in vertex_data:
            raise MeshParseError(path, 0, f"vertex element lacks property {name!r}")
    return np.column_stack([vertex_data["x"], vertex_data["y"], vertex_data["z"]])


def _extract_colors(vertex_data) -> Optional[np.ndarray]:
    if not all(c in vertex_data for c in ("red", "green", "blue")):
        return None
    dtypes = vertex_data.get("__dtypes__", {})
    cols = np.column_stack([vertex_data["red"], vertex_data["green"], vertex_data["blue"]])
    scale = _COLOR_SCALE.get(dtypes.get("red"), None)
    if scale is not None:
        cols = cols / scale
    return np.clip(cols, 0.0, 1.0)


def _extract_normals(vertex_data) -> Optional[np.ndarray]:
    if not all(c in vertex_data for c in ("nx", "ny", "nz")):
        return None
    normals = np.column_stack([vertex_data["nx"], vertex_data["ny"], vertex_data["nz"]])
    lengths = np.linalg.norm(normals, axis=1, keepdims=True)
    return normals / np.where(lengths == 0.0, 1.0, lengths)


def _read_obj(path) -> Tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    data = path.read_bytes()
    vertices = []
    face_rows = []
    for line_offset, raw in _ascii_lines_with_offsets(data, 0):
        tokens = raw.split()
        if not tokens or tokens[0].startswith(b"#"):
            continue
        key = tokens[0]
        try:
            if key == b"v":
                vertices.append([float(t) for t in tokens[1:4]])
            elif key == b"f":
                row = []
                for tok in tokens[1:]:
                    idx = int(tok.split(b"/")[0])
                    row.append(idx - 1 if idx > 0 else len(vertices) + idx)
                face_rows.append(row)
        except (ValueError, IndexError) as exc:
            raise MeshParseError(path, line_offset, f"malformed OBJ record: {exc}")
    faces = _triangulate(face_rows, path, 0) if face_rows else np.zeros((0, 3), np.int64)
    return np.asarray(vertices, dtype=float).reshape(-1, 3), faces


def load_mesh(path) -> TriMesh:
    """Read a triangle mesh from PLY or OBJ; vertex units are mm."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        vertices, faces = _read_obj(path)
    elif suffix == ".ply" or path.read_bytes()[:3] == b"ply":
        vertex_data, faces = _read_ply(path)
        vertices = _require_xyz(vertex_data, path)
        if faces is None:
            faces = np.zeros((0, 3), dtype=np.int64)
    else:
        raise UnsupportedFormatError(f"{path}: not a PLY or OBJ file")
    if faces.size and (faces.min() < 0 or faces.max() >= len(vertices)):
        raise MeshParseError(path, 0,
                             f"face index out of range (max {faces.max()}, "
                             f"{len(vertices)} vertices)")
    return TriMesh(vertices, faces)


def load_cloud(path) -> PointCloud:
    """Read a point cloud from PLY; positions mm, 8-bit colors mapped to [0, 1]."""
    path = Path(path)
    if path.suffix.lower() != ".ply" and path.read_bytes()[:3] != b"ply":
        raise UnsupportedFormatError(f"{path}: point clouds must be PLY")
    vertex_data, _ = _read_ply(path)
    positions = _require_xyz(vertex_data, path)
    return PointCloud(positions, _extract_colors(vertex_data), _extract_normals(vertex_data))


def _fmt(value: float) -> str:
    return repr(float(value))


def save_mesh_ply(mesh: TriMesh, path, binary: bool = True) -> None:
    """Write a mesh as PLY; positions stored as float64."""
    path = Path(path)
    header = [
        "ply",
        "format binary_little_endian 1.0" if binary else "format ascii 1.0",
        f"element vertex {mesh.n_vertices}",
        "property double x", "property double y", "property double z",
        f"element face {mesh.n_triangles}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(np.ascontiguousarray(mesh.vertices, dtype="<f8").tobytes())
            if mesh.n_triangles:
                face_dt = np.dtype([("n", "u1"), ("idx", "<i4", (3,))])
                rec = np.empty(mesh.n_triangles, dtype=face_dt)
                rec["n"] = 3
                rec["idx"] = mesh.triangles
                fh.write(rec.tobytes())
        else:
            lines = [" ".join(_fmt(c) for c in v) for v in mesh.vertices]
            lines += [f"3 {t[0]} {t[1]} {t[2]}" for t in mesh.triangles]
            if lines:
                fh.write(("\n".join(lines) + "\n").encode("ascii"))


def save_cloud_ply(cloud: PointCloud, path, binary: bool = True) -> None:
    """Write a point cloud as PLY; colors quantized to 8 bits."""
    path = Path(path)
    header = ["ply",
              "format binary_little_endian 1.0" if binary else "format ascii 1.0",
              f"element vertex {len(cloud)}",
              "property double x", "property double y", "property double z"]
    if cloud.colors is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    if cloud.normals is not None:
        header += ["property double nx", "property double ny", "property double nz"]
    header.append("end_header")

    colors8 = None
    if cloud.colors is not None:
        colors8 = np.rint(cloud.colors * 255.0).astype(np.uint8)

    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
            if colors8 is not None:
                fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
            if cloud.normals is not None:
                fields += [("nx", "<f8"), ("ny", "<f8"), ("nz", "<f8")]
            rec = np.empty(len(cloud), dtype=np.dtype(fields))
            rec["x"], rec["y"], rec["z"] = cloud.positions.T
            if colors8 is not None:
                rec["red"], rec["green"], rec["blue"] = colors8.T
            if cloud.normals is not None:
                rec["nx"], rec["ny"], rec["nz"] = cloud.normals.T
            fh.write(rec.tobytes())
        else:
            lines = []
            for i in range(len(cloud)):
                parts = [_fmt(c) for c in cloud.positions[i]]
                if colors8 is not None:
                    parts += [str(int(c)) for c in colors8[i]]
                if cloud.normals is not None:
                    parts += [_fmt(c) for c in cloud.normals[i]]
                lines.append(" ".join(parts))
            if lines:
                fh.write(("\n".join(lines) + "\n").encode("ascii"))


_MASK_SCHEMA = "spinereg/voxelmask@1"


def save_mask(mask: VoxelMask, header_path) -> None:
    """Write a voxel mask as JSON header + bit-packed payload."""
    header_path = Path(header_path)
    payload_name = header_path.stem + ".bits"
    header = {
        "schema": _MASK_SCHEMA,
        "dims": list(mask.dims),
        "spacing_mm": mask.spacing.tolist(),
        "origin_mm": mask.origin.tolist(),
        "packing": "bit",
        "order": "C",
        "payload": payload_name,
    }
    header_path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    packed = np.packbits(mask.occupancy.astype(np.uint8).ravel(order="C"))
    (header_path.parent / payload_name).write_bytes(packed.tobytes())


def load_mask(header_path) -> VoxelMask:
    """Read a voxel mask written by :func:`save_mask`."""
    header_path = Path(header_path)
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as exc:
        raise MeshParseError(header_path, exc.pos, f"invalid mask header JSON: {exc.msg}")
    if header.get("schema") != _MASK_SCHEMA:
        raise UnsupportedFormatError(f"{header_path}: unknown mask schema {header.get('schema')!r}")
    dims = tuple(int(d) for d in header["dims"])
    payload_path = header_path.parent / header["payload"]
    raw = np.frombuffer(payload_path.read_bytes(), dtype=np.uint8)
    n_voxels = int(np.prod(dims))
    bits = np.unpackbits(raw, count=n_voxels)
    if bits.size < n_voxels:
        raise MeshParseError(payload_path, raw.size, "payload shorter than dims imply")
    occupancy = bits.astype(bool).reshape(dims, order=header.get("order", "C"))
    return VoxelMask(occupancy, header["spacing_mm"], header["origin_mm"])
