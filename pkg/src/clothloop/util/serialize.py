"""File formats: OBJ meshes with sidecars, CSV clouds and heatmaps, keypoint JSON, parameter files."""

from __future__ import annotations

import csv
import json
from collections.abc import Mapping, Sequence
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np

from clothloop.errors import InputError

if TYPE_CHECKING:
    from clothloop.heatmap import Heatmap, OrientedKeypointSet
    from clothloop.mesh import DeformableMesh, FloatArray, PointCloud

PARAMS_MAGIC = b"CLPARAMS"
_FLOAT = "{:.9f}"


def _require(path: Path) -> None:
    if not path.is_file():
        msg = f"missing file: {path}"
        raise InputError(msg)


def sidecar_path(obj_path: Path) -> Path:
    """JSON sidecar next to an OBJ file."""
    return obj_path.with_suffix(".json")


def write_mesh(obj_path: Path, mesh: DeformableMesh, write_sidecar: bool = True) -> None:  # noqa: FBT001, FBT002
    """Write ``v``/``f`` lines and, optionally, the midline/side-flag/rest sidecar."""
    obj_path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"v {_FLOAT.format(x)} {_FLOAT.format(y)} {_FLOAT.format(z)}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    obj_path.write_text("\n".join(lines) + "\n")
    if write_sidecar:
        sidecar = {
            "midline": [int(i) for i in mesh.midline],
            "side_flags": [int(s) for s in mesh.side_flags],
            "rest_vertices": [[round(float(c), 9) for c in v] for v in mesh.topology.rest_vertices],
        }
        sidecar_path(obj_path).write_text(json.dumps(sidecar))


def read_obj(obj_path: Path) -> tuple[FloatArray, np.ndarray]:
    """Vertices and 0-based faces of an OBJ subset file (``v`` and ``f`` lines)."""
    _require(obj_path)
    vertices, faces = [], []
    for number, line in enumerate(obj_path.read_text().splitlines(), start=1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                vertices.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
        except ValueError as err:
            msg = f"{obj_path}:{number}: {err}"
            raise InputError(msg) from err
    return np.asarray(vertices, dtype=float), np.asarray(faces, dtype=np.int64)


def read_mesh(obj_path: Path, like: DeformableMesh | None = None) -> DeformableMesh:
    """Read a mesh; reuses the topology of ``like`` when given, else the sidecar."""
    from clothloop.mesh import DeformableMesh  # noqa: PLC0415

    vertices, faces = read_obj(obj_path)
    if like is not None:
        return like.with_vertices(vertices)
    side = sidecar_path(obj_path)
    _require(side)
    meta = json.loads(side.read_text())
    return DeformableMesh.build(
        vertices,
        faces,
        meta["midline"],
        meta.get("side_flags"),
        meta.get("rest_vertices"),
    )


def write_cloud(csv_path: Path, cloud: PointCloud) -> None:
    """Write ``x,y,z[,visible]`` rows."""
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with csv_path.open("w", newline="") as f:
        writer = csv.writer(f)
        if cloud.visible is None:
            writer.writerow(["x", "y", "z"])
            writer.writerows([_FLOAT.format(c) for c in p] for p in cloud.points)
        else:
            writer.writerow(["x", "y", "z", "visible"])
            writer.writerows(
                [*(_FLOAT.format(c) for c in p), int(v)] for p, v in zip(cloud.points, cloud.visible, strict=True)
            )


def read_cloud(csv_path: Path) -> PointCloud:
    """Read a cloud written by :func:`write_cloud`."""
    from clothloop.mesh import PointCloud  # noqa: PLC0415

    _require(csv_path)
    with csv_path.open(newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        msg = f"point cloud file {csv_path} has no rows"
        raise InputError(msg)
    points = np.array([[float(r["x"]), float(r["y"]), float(r["z"])] for r in rows])
    visible = None
    if "visible" in rows[0]:
        visible = np.array([r["visible"] not in {"0", "false", "False"} for r in rows])
    return PointCloud(points, visible)


def write_heatmap(csv_path: Path, heatmap: Heatmap) -> None:
    """Write ``point_id,k,prob`` rows."""
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with csv_path.open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["point_id", "k", "prob"])
        for i, row in enumerate(heatmap.probs):
            writer.writerows([i, k, f"{p:.12g}"] for k, p in enumerate(row))


def read_heatmap(csv_path: Path) -> Heatmap:
    """Read a heatmap written by :func:`write_heatmap`."""
    from clothloop.heatmap import Heatmap  # noqa: PLC0415

    _require(csv_path)
    with csv_path.open(newline="") as f:
        rows = [(int(r["point_id"]), int(r["k"]), float(r["prob"])) for r in csv.DictReader(f)]
    if not rows:
        msg = f"heatmap file {csv_path} has no rows"
        raise InputError(msg)
    probs = np.zeros((max(r[0] for r in rows) + 1, max(r[1] for r in rows) + 1))
    for i, k, p in rows:
        probs[i, k] = p
    return Heatmap(probs)


def write_keypoints(json_path: Path, keypoints: OrientedKeypointSet) -> None:
    """Write keypoints as position plus the 9 row-major frame entries."""
    json_path.parent.mkdir(parents=True, exist_ok=True)
    payload = [
        {"position": [float(c) for c in p], "frame": [float(c) for c in f.ravel()]}
        for p, f in zip(keypoints.positions, keypoints.frames, strict=True)
    ]
    json_path.write_text(json.dumps(payload, indent=2))


def read_keypoints(json_path: Path) -> OrientedKeypointSet:
    """Read keypoints written by :func:`write_keypoints`."""
    from clothloop.heatmap import OrientedKeypointSet  # noqa: PLC0415

    _require(json_path)
    payload = json.loads(json_path.read_text())
    return OrientedKeypointSet(
        [k["position"] for k in payload],
        [np.reshape(k["frame"], (3, 3)) for k in payload],
    )


def write_arrays(path: Path, meta: Mapping[str, Any], arrays: Mapping[str, FloatArray]) -> None:
    """Flat little-endian float64 arrays after a length-prefixed JSON header."""
    path.parent.mkdir(parents=True, exist_ok=True)
    header = dict(meta)
    header["arrays"] = [{"name": name, "shape": list(a.shape)} for name, a in arrays.items()]
    encoded = json.dumps(header, sort_keys=True).encode()
    with path.open("wb") as f:
        f.write(PARAMS_MAGIC)
        f.write(np.array([len(encoded)], dtype="<u8").tobytes())
        f.write(encoded)
        for a in arrays.values():
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_arrays(path: Path) -> tuple[dict[str, Any], dict[str, FloatArray]]:
    """Inverse of :func:`write_arrays`."""
    _require(path)
    data = path.read_bytes()
    if not data.startswith(PARAMS_MAGIC):
        msg = f"{path} is not a clothloop parameter file"
        raise InputError(msg)
    offset = len(PARAMS_MAGIC)
    length = int(np.frombuffer(data, dtype="<u8", count=1, offset=offset)[0])
    offset += 8
    header = json.loads(data[offset : offset + length])
    offset += length
    arrays = {}
    for spec in header["arrays"]:
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        arrays[spec["name"]] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(spec["shape"]).copy()
        offset += 8 * count
    if offset != len(data):
        msg = f"{path} has {len(data) - offset} trailing bytes"
        raise InputError(msg)
    return header, arrays


def write_rows(csv_path: Path, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    """Write a CSV table."""
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with csv_path.open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


def read_rows(csv_path: Path) -> list[dict[str, str]]:
    """Read a CSV table as dicts."""
    _require(csv_path)
    with csv_path.open(newline="") as f:
        return list(csv.DictReader(f))
