"""Point cloud container plus PLY reading and writing.

Supports ASCII and binary little-endian PLY with float32 vertex
coordinates and optional uchar red/green/blue columns. Parsing failures
raise ``ParseError`` carrying the byte offset of the offending content.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .errors import InputError, ParseError

__all__ = ["PointCloud", "read_ply", "write_ply", "subsample", "normalize"]

# scalar PLY property types we accept inside a vertex element
_PLY_TYPES = {
    "char": "i1",
    "int8": "i1",
    "uchar": "u1",
    "uint8": "u1",
    "short": "i2",
    "int16": "i2",
    "ushort": "u2",
    "uint16": "u2",
    "int": "i4",
    "int32": "i4",
    "uint": "u4",
    "uint32": "u4",
    "float": "f4",
    "float32": "f4",
    "double": "f8",
    "float64": "f8",
}


@dataclass
class PointCloud:
    """Points in 3-d, with optional per-point colors and an origin tag."""

    points: np.ndarray
    colors: np.ndarray | None = None
    source_id: str = ""

    def __post_init__(self):
        pts = np.asarray(self.points)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise InputError(f"points must have shape (N, 3), got {pts.shape}")
        if pts.dtype != np.float32:
            pts = pts.astype(np.float32)
        self.points = pts
        if self.colors is not None:
            col = np.asarray(self.colors)
            if col.shape != pts.shape:
                raise InputError(
                    f"colors shape {col.shape} does not match points {pts.shape}"
                )
            self.colors = col.astype(np.uint8)

    @property
    def n(self):
        return self.points.shape[0]


def _header_lines(raw):
    """Split the header, returning (lines, header_byte_length)."""
    end = raw.find(b"end_header")
    if end < 0:
        raise ParseError("missing end_header", offset=min(len(raw), 1024))
    nl = raw.find(b"\n", end)
    if nl < 0:
        raise ParseError("header not terminated by newline", offset=len(raw))
    header_len = nl + 1
    try:
        text = raw[:header_len].decode("ascii")
    except UnicodeDecodeError as exc:
        raise ParseError("header is not ASCII", offset=exc.start) from exc
    return text.splitlines(), header_len


def read_ply(path):
    """Read a PLY file into a PointCloud.

    The vertex element must come first and contain scalar properties
    including float x, y, z. Extra vertex properties are skipped; extra
    elements after the vertex data are ignored.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(b"ply"):
        raise ParseError("not a PLY file (bad magic)", offset=0)
    lines, header_len = _header_lines(raw)

    fmt = None
    count = None
    props = []  # (name, numpy format) in declaration order
    in_vertex = False
    vertex_done = False
    offset = 0
    for line in lines:
        stripped = line.strip()
        if stripped == "ply" or stripped.startswith("comment") or stripped.startswith("obj_info") or not stripped:
            offset += len(line) + 1
            continue
        parts = stripped.split()
        if parts[0] == "format":
            if len(parts) < 2 or parts[1] not in ("ascii", "binary_little_endian"):
                raise ParseError(f"unsupported format '{stripped}'", offset=offset)
            fmt = parts[1]
        elif parts[0] == "element":
            if parts[1] == "vertex":
                if vertex_done:
                    raise ParseError("duplicate vertex element", offset=offset)
                try:
                    count = int(parts[2])
                except (IndexError, ValueError):
                    raise ParseError("bad vertex count", offset=offset) from None
                in_vertex = True
            else:
                if count is None:
                    raise ParseError(
                        f"element '{parts[1]}' precedes vertex element", offset=offset
                    )
                in_vertex = False
                vertex_done = True
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list":
                raise ParseError("list property in vertex element", offset=offset)
            if parts[1] not in _PLY_TYPES:
                raise ParseError(f"unknown property type '{parts[1]}'", offset=offset)
            props.append((parts[2], _PLY_TYPES[parts[1]]))
        elif parts[0] in ("property", "end_header"):
            pass
        else:
            raise ParseError(f"unrecognized header line '{stripped}'", offset=offset)
        offset += len(line) + 1

    if fmt is None:
        raise ParseError("missing format line", offset=0)
    if count is None:
        raise ParseError("missing vertex element", offset=0)
    names = [p[0] for p in props]
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise ParseError(f"vertex element lacks property '{axis}'", offset=0)
    has_color = all(c in names for c in ("red", "green", "blue"))

    body = raw[header_len:]
    if fmt == "ascii":
        points, colors = _parse_ascii(body, count, names, header_len)
    else:
        points, colors = _parse_binary(body, count, props, header_len)
    if not np.isfinite(points).all():
        raise ParseError("non-finite coordinate in vertex data", offset=header_len)
    cloud_colors = colors if has_color else None
    return PointCloud(points=points, colors=cloud_colors, source_id=str(path))


def _parse_ascii(body, count, names, header_len):
    text = body.decode("ascii", errors="replace")
    lines = text.splitlines()
    if len(lines) < count:
        raise ParseError(
            f"expected {count} vertex rows, found {len(lines)}",
            offset=header_len + len(body),
        )
    ix, iy, iz = names.index("x"), names.index("y"), names.index("z")
    want_color = all(c in names for c in ("red", "green", "blue"))
    if want_color:
        ir, ig, ib = names.index("red"), names.index("green"), names.index("blue")
    points = np.empty((count, 3), dtype=np.float32)
    colors = np.empty((count, 3), dtype=np.uint8) if want_color else None
    offset = header_len
    for row in range(count):
        line = lines[row]
        parts = line.split()
        try:
            if len(parts) < len(names):
                raise ValueError("short row")
            points[row, 0] = float(parts[ix])
            points[row, 1] = float(parts[iy])
            points[row, 2] = float(parts[iz])
            if want_color:
                colors[row, 0] = int(parts[ir])
                colors[row, 1] = int(parts[ig])
                colors[row, 2] = int(parts[ib])
        except ValueError as exc:
            raise ParseError(f"bad vertex row {row}: '{line}'", offset=offset) from exc
        offset += len(line) + 1
    return points, colors


def _parse_binary(body, count, props, header_len):
    dt = np.dtype([(name, "<" + fmt) for name, fmt in props])
    need = dt.itemsize * count
    if len(body) < need:
        raise ParseError(
            f"vertex payload truncated: need {need} bytes, have {len(body)}",
            offset=header_len + len(body),
        )
    rec = np.frombuffer(body, dtype=dt, count=count)
    points = np.stack(
        [rec["x"], rec["y"], rec["z"]], axis=1
    ).astype(np.float32)
    names = [p[0] for p in props]
    colors = None
    if all(c in names for c in ("red", "green", "blue")):
        colors = np.stack(
            [rec["red"], rec["green"], rec["blue"]], axis=1
        ).astype(np.uint8)
    return points, colors


def write_ply(path, cloud, binary=True):
    """Write a PointCloud as PLY.

    Binary files use little-endian float32 coordinates; ASCII uses nine
    significant digits so float32 values survive a round trip. Colors, if
    present, are written as uchar red/green/blue.
    """
    pts = cloud.points.astype(np.float32, copy=False)
    has_color = cloud.colors is not None
    header = ["ply"]
    header.append(
        "format binary_little_endian 1.0" if binary else "format ascii 1.0"
    )
    header.append(f"element vertex {pts.shape[0]}")
    header += ["property float x", "property float y", "property float z"]
    if has_color:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")

    with open(path, "wb") as fh:
        fh.write(head)
        if binary:
            if has_color:
                dt = np.dtype(
                    [("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                     ("red", "u1"), ("green", "u1"), ("blue", "u1")]
                )
                rec = np.empty(pts.shape[0], dtype=dt)
                rec["x"], rec["y"], rec["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
                rec["red"], rec["green"], rec["blue"] = (
                    cloud.colors[:, 0], cloud.colors[:, 1], cloud.colors[:, 2]
                )
                fh.write(rec.tobytes())
            else:
                fh.write(pts.astype("<f4").tobytes())
        else:
            out = io.StringIO()
            if has_color:
                for p, c in zip(pts, cloud.colors):
                    out.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {c[0]} {c[1]} {c[2]}\n")
            else:
                for p in pts:
                    out.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")
            fh.write(out.getvalue().encode("ascii"))


def subsample(cloud, n_points, seed):
    """Uniform random subset of ``n_points`` points, without replacement.

    Selected points keep their original relative order. Deterministic for
    a given seed.
    """
    n_points = int(n_points)
    if n_points < 1:
        raise InputError(f"n_points must be positive, got {n_points}")
    if cloud.n < n_points:
        raise InputError(
            f"cloud has {cloud.n} points, cannot subsample {n_points}"
        )
    if cloud.n == n_points:
        return PointCloud(
            points=cloud.points.copy(),
            colors=None if cloud.colors is None else cloud.colors.copy(),
            source_id=cloud.source_id,
        )
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(cloud.n, size=n_points, replace=False))
    return PointCloud(
        points=cloud.points[idx],
        colors=None if cloud.colors is None else cloud.colors[idx],
        source_id=cloud.source_id,
    )


def normalize(points):
    """Center the centroid at the origin and scale the max radius to one."""
    pts = np.asarray(points, dtype=np.float32)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
        raise InputError(f"expected a nonempty (N, 3) array, got {pts.shape}")
    centered = pts - pts.mean(axis=0, dtype=np.float64).astype(np.float32)
    radius = float(np.sqrt((centered.astype(np.float64) ** 2).sum(axis=1)).max())
    if radius == 0.0:
        raise InputError("cannot normalize a degenerate cloud (zero extent)")
    return (centered / radius).astype(np.float32)
