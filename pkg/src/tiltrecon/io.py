"""File formats: Netpbm/PFM rasters, flat float64 blobs with JSON sidecars, OBJ/PLY meshes."""

import json
from pathlib import Path

import numpy as np
import torch


def write_ppm(path, rgb):
    """Binary P6, 8-bit. ``rgb`` is H x W x 3 in [0, 1]."""
    img = np.asarray(rgb, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("PPM needs an H x W x 3 image")
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w, _ = data.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + data.tobytes())


def write_pgm(path, gray):
    """Binary P5, 8-bit. ``gray`` is H x W in [0, 1]."""
    img = np.asarray(gray, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("PGM needs an H x W image")
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = data.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + data.tobytes())


def _read_netpbm(path, magic, channels):
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    pos += 1
    if tokens[0] != magic:
        raise ValueError(f"{path}: expected {magic!r}, found {tokens[0]!r}")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    data = np.frombuffer(raw[pos:pos + w * h * channels], dtype=np.uint8)
    shape = (h, w, channels) if channels > 1 else (h, w)
    return data.reshape(shape).astype(np.float64) / maxval


def read_ppm(path):
    return _read_netpbm(path, b"P6", 3)


def read_pgm(path):
    return _read_netpbm(path, b"P5", 1)


def write_pfm(path, arr):
    """PFM with little-endian scale -1.0; rows stored bottom-to-top per the format."""
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 2:
        header = b"Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        header = b"PF"
    else:
        raise ValueError("PFM needs H x W or H x W x 3")
    h, w = a.shape[:2]
    body = np.ascontiguousarray(a[::-1]).astype("<f4").tobytes()
    Path(path).write_bytes(header + b"\n%d %d\n-1.0\n" % (w, h) + body)


def read_pfm(path):
    raw = Path(path).read_bytes()
    lines = raw.split(b"\n", 3)
    kind, dims, scale, body = lines
    w, h = (int(v) for v in dims.split())
    endian = "<" if float(scale) < 0 else ">"
    channels = 3 if kind == b"PF" else 1
    data = np.frombuffer(body[: w * h * channels * 4], dtype=endian + "f4").astype(np.float64)
    shape = (h, w, channels) if channels == 3 else (h, w)
    return data.reshape(shape)[::-1].copy()


def save_blob(path, tensors, meta=None):
    """Write tensors as one flat little-endian float64 blob plus ``<path>.json`` describing the layout."""
    path = Path(path)
    layers = []
    chunks = []
    offset = 0
    for name, t in tensors.items():
        a = t.detach().double().numpy() if isinstance(t, torch.Tensor) else np.asarray(t, dtype=np.float64)
        layers.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.astype("<f8").ravel().tobytes())
        offset += a.size
    path.write_bytes(b"".join(chunks))
    sidecar = {"dtype": "float64-le", "count": offset, "layers": layers, "meta": meta or {}}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))


def load_blob(path):
    """Inverse of :func:`save_blob`; returns (dict of float64 tensors, meta)."""
    path = Path(path)
    sidecar = json.loads(Path(str(path) + ".json").read_text())
    flat = np.frombuffer(path.read_bytes(), dtype="<f8")
    if flat.size != sidecar["count"]:
        raise ValueError(f"{path}: blob holds {flat.size} values, sidecar says {sidecar['count']}")
    out = {}
    for layer in sidecar["layers"]:
        n = int(np.prod(layer["shape"])) if layer["shape"] else 1
        a = flat[layer["offset"]:layer["offset"] + n].reshape(layer["shape"])
        out[layer["name"]] = torch.from_numpy(a.copy())
    return out, sidecar["meta"]


def write_obj(path, mesh):
    """OBJ with ``v x y z r g b`` vertex-color lines (widely read, not in the original format)."""
    lines = []
    colors = mesh.vertex_colors if mesh.vertex_colors is not None else None
    for i, v in enumerate(mesh.vertices):
        if colors is not None:
            c = colors[i]
            lines.append("v %r %r %r %r %r %r" % (float(v[0]), float(v[1]), float(v[2]), float(c[0]), float(c[1]), float(c[2])))
        else:
            lines.append("v %r %r %r" % (float(v[0]), float(v[1]), float(v[2])))
    for f in mesh.faces:
        lines.append("f %d %d %d" % (f[0] + 1, f[1] + 1, f[2] + 1))
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path):
    from .mesh import Mesh

    verts, cols, faces = [], [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
            if len(parts) >= 7:
                cols.append([float(x) for x in parts[4:7]])
        elif parts[0] == "f":
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    colors = np.asarray(cols) if cols and len(cols) == len(verts) else None
    return Mesh(np.asarray(verts, dtype=np.float64).reshape(-1, 3), np.asarray(faces, dtype=np.int64).reshape(-1, 3), colors)


def write_ply(path, mesh):
    """Binary little-endian PLY with float vertices and uchar colors."""
    n_v, n_f = len(mesh.vertices), len(mesh.faces)
    header = [
        "ply", "format binary_little_endian 1.0", f"element vertex {n_v}",
        "property float x", "property float y", "property float z",
        "property uchar red", "property uchar green", "property uchar blue",
        f"element face {n_f}", "property list uchar int vertex_indices", "end_header",
    ]
    vdt = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("r", "u1"), ("g", "u1"), ("b", "u1")])
    v = np.empty(n_v, dtype=vdt)
    v["x"], v["y"], v["z"] = mesh.vertices.T
    colors = mesh.vertex_colors if mesh.vertex_colors is not None else np.full((n_v, 3), 0.5)
    c = np.round(np.clip(colors, 0, 1) * 255).astype(np.uint8)
    v["r"], v["g"], v["b"] = c.T
    fdt = np.dtype([("n", "u1"), ("i", "<i4", (3,))])
    f = np.empty(n_f, dtype=fdt)
    f["n"] = 3
    f["i"] = mesh.faces
    Path(path).write_bytes(("\n".join(header) + "\n").encode() + v.tobytes() + f.tobytes())
