"""Triangle meshes and marching-cubes extraction from density grids.

The 256-case triangle table is generated rather than transcribed. On every
cube face the crossing points are joined into segments; a face with two
diagonal inside corners always keeps those corners apart. Because the rule
only looks at the face's own four corners, the two cubes sharing a face
agree on it and the extracted surface has no cracks. Segments are chained
into loops around the cube and each loop is triangulated.
"""

from dataclasses import dataclass
import itertools
import warnings

import numpy as np

from .errors import ShapeError

CORNERS = np.array([[(c >> 0) & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)], dtype=np.int64)
EDGES = [(c, c | (1 << a), a) for a in range(3) for c in range(8) if not (c >> a) & 1]


def _face_cycles():
    faces = []
    for axis, side in itertools.product(range(3), (0, 1)):
        u, v = [a for a in range(3) if a != axis]
        ring = []
        for du, dv in ((0, 0), (1, 0), (1, 1), (0, 1)):
            bits = (side << axis) | (du << u) | (dv << v)
            ring.append(bits)
        normal = np.zeros(3)
        normal[axis] = 1.0 if side else -1.0
        faces.append((ring, normal))
    return faces


FACES = _face_cycles()
_EDGE_INDEX = {frozenset((a, b)): e for e, (a, b, _) in enumerate(EDGES)}


def _edge_mid(e):
    a, b, _ = EDGES[e]
    return 0.5 * (CORNERS[a] + CORNERS[b])


def _case_loops(case):
    inside = [(case >> c) & 1 for c in range(8)]
    succ = {}
    for ring, normal in FACES:
        crossings = []
        for k in range(4):
            a, b = ring[k], ring[(k + 1) % 4]
            if inside[a] != inside[b]:
                crossings.append(_EDGE_INDEX[frozenset((a, b))])
        if not crossings:
            continue
        if len(crossings) == 2:
            segs = [(crossings[0], crossings[1], [c for c in ring if inside[c]])]
        else:
            segs = []
            for k in range(4):
                c = ring[k]
                if inside[c]:
                    e_prev = _EDGE_INDEX[frozenset((ring[k - 1], c))]
                    e_next = _EDGE_INDEX[frozenset((c, ring[(k + 1) % 4]))]
                    segs.append((e_prev, e_next, [c]))
        for p, q, corner_ids in segs:
            mp, mq = _edge_mid(p), _edge_mid(q)
            outward = 0.5 * (mp + mq) - CORNERS[corner_ids].mean(axis=0)
            tangent = np.cross(outward, normal)
            if np.dot(mq - mp, tangent) < 0:
                p, q = q, p
            if p in succ:
                raise AssertionError(f"case {case}: edge {p} starts two segments")
            succ[p] = q
    loops = []
    remaining = dict(succ)
    while remaining:
        start = min(remaining)
        loop = [start]
        nxt = remaining.pop(start)
        while nxt != start:
            loop.append(nxt)
            nxt = remaining.pop(nxt)
        loops.append(loop)
    return loops


_EDGE_FACES = [
    {f for f, (ring, _) in enumerate(FACES) if a in ring and b in ring} for a, b, _ in EDGES
]


def _triangulate(loop):
    """Triangulate a loop without chords lying in a cube face.

    Such a chord could also be drawn by the neighbouring cube, leaving an
    edge shared by four triangles.
    """
    n = len(loop)

    def allowed(i, j):
        if (j - i) % n in (1, n - 1):
            return True
        return not (_EDGE_FACES[loop[i]] & _EDGE_FACES[loop[j]])

    memo = {}

    def solve(i, j):
        if j - i < 2:
            return []
        if (i, j) not in memo:
            memo[(i, j)] = None
            for k in range(i + 1, j):
                if allowed(i, k) and allowed(k, j):
                    left, right = solve(i, k), solve(k, j)
                    if left is not None and right is not None:
                        memo[(i, j)] = left + [(loop[i], loop[k], loop[j])] + right
                        break
        return memo[(i, j)]

    tris = solve(0, n - 1)
    if tris is None:
        raise AssertionError(f"no face-chord-free triangulation for loop {loop}")
    return tris


def _build_table():
    tris = []
    for case in range(256):
        out = []
        for loop in _case_loops(case):
            out.extend(_triangulate(loop))
        tris.append(out)
    width = max(len(t) for t in tris)
    table = -np.ones((256, width, 3), dtype=np.int64)
    for case, t in enumerate(tris):
        if t:
            table[case, : len(t)] = t
    return table


TRI_TABLE = _build_table()


@dataclass(eq=False)
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray
    vertex_colors: np.ndarray = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ShapeError("face index out of range")
        if self.vertex_colors is not None:
            self.vertex_colors = np.asarray(self.vertex_colors, dtype=np.float64).reshape(-1, 3)
            if len(self.vertex_colors) != len(self.vertices):
                raise ShapeError("one color per vertex required")

    @property
    def is_empty(self):
        return len(self.faces) == 0

    def triangles(self):
        return self.vertices[self.faces]

    def face_areas(self):
        t = self.triangles()
        return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)

    def area(self):
        return float(self.face_areas().sum())

    def signed_volume(self):
        t = self.triangles()
        return float(np.einsum("ij,ij->i", t[:, 0], np.cross(t[:, 1], t[:, 2])).sum() / 6.0)

    def edges(self):
        f = self.faces
        return np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])

    def is_watertight(self):
        """Every directed edge is matched by exactly one opposite edge (closed, consistently oriented)."""
        if self.is_empty:
            return False
        directed = self.edges()
        fwd, fcount = np.unique(directed, axis=0, return_counts=True)
        if np.any(fcount != 1):
            return False
        rev = np.unique(directed[:, ::-1], axis=0)
        return len(fwd) == len(rev) and np.array_equal(fwd, rev)

    def euler_characteristic(self):
        undirected = np.unique(np.sort(self.edges(), axis=1), axis=0)
        used = np.unique(self.faces)
        return len(used) - len(undirected) + len(self.faces)


def weld(mesh, tol=1e-7):
    """Merge vertices closer than ``tol`` (by quantization), drop degenerate and unused elements."""
    if mesh.is_empty:
        return mesh
    keys = np.round(mesh.vertices / tol).astype(np.int64)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    faces = inverse[mesh.faces]
    verts = mesh.vertices[first]
    colors = mesh.vertex_colors[first] if mesh.vertex_colors is not None else None
    ok = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    faces = faces[ok]
    tri = verts[faces]
    area2 = np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    faces = faces[area2 > 0]
    used, remap = np.unique(faces, return_inverse=True)
    return Mesh(verts[used], remap.reshape(-1, 3), colors[used] if colors is not None else None)


def marching_cubes(grid, iso, bound=1.0, weld_tol=1e-7):
    """Extract the ``iso`` level set of a density grid sampled on [-bound, bound]^3.

    ``grid[i, j, k]`` is the value at (x_i, y_j, z_k). Points with value
    above ``iso`` are inside; faces are oriented with normals pointing out
    of the inside region. Vertex order follows global edge ids, so output
    is deterministic.
    """
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 3 or min(g.shape) < 2:
        raise ShapeError(f"need a 3D grid with at least 2 samples per axis, got {g.shape}")
    if not np.all(np.isfinite(g)):
        raise ValueError("grid contains non-finite values")
    inside = g > iso
    if inside.all() or not inside.any():
        warnings.warn("iso level does not cross the grid; returning an empty mesh", RuntimeWarning)
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    nx, ny, nz = g.shape
    case = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.int64)
    for c, (dx, dy, dz) in enumerate(CORNERS):
        case |= inside[dx:nx - 1 + dx, dy:ny - 1 + dy, dz:nz - 1 + dz].astype(np.int64) << c
    cube_ids = np.nonzero((case != 0) & (case != 255))
    cases = case[cube_ids]
    cube_lin = np.ravel_multi_index(cube_ids, case.shape)
    cube_xyz = np.stack(cube_ids, axis=1)

    tris = TRI_TABLE[cases]  # (m, width, 3)
    valid = tris[:, :, 0] >= 0
    cube_rep = np.repeat(np.arange(len(cases)), valid.sum(axis=1))
    local = tris[valid]  # already in (cube, slot) order
    order = np.lexsort((np.arange(len(cube_rep)), cube_lin[cube_rep]))
    local, cube_rep = local[order], cube_rep[order]

    edge_a = np.array([e[0] for e in EDGES])
    edge_axis = np.array([e[2] for e in EDGES])
    start = cube_xyz[cube_rep][:, None, :] + CORNERS[edge_a[local]]
    axis = edge_axis[local]
    gid = axis * (nx * ny * nz) + np.ravel_multi_index((start[..., 0], start[..., 1], start[..., 2]), g.shape)
    uniq, inverse = np.unique(gid.ravel(), return_inverse=True)
    faces = inverse.reshape(-1, 3)

    u_axis = uniq // (nx * ny * nz)
    p0 = np.stack(np.unravel_index(uniq % (nx * ny * nz), g.shape), axis=1)
    p1 = p0 + np.eye(3, dtype=np.int64)[u_axis]
    v0 = g[p0[:, 0], p0[:, 1], p0[:, 2]]
    v1 = g[p1[:, 0], p1[:, 1], p1[:, 2]]
    t = (iso - v0) / (v1 - v0)
    idx = p0 + t[:, None] * (p1 - p0)
    spacing = np.array([2.0 * bound / (n - 1) for n in g.shape])
    verts = -bound + idx * spacing
    return weld(Mesh(verts, faces), weld_tol)


def colorize(mesh, field):
    """Per-vertex rgb from a field callable (points -> (sigma, rgb))."""
    import torch

    if mesh.is_empty:
        return Mesh(mesh.vertices, mesh.faces, np.zeros((len(mesh.vertices), 3)))
    if np.any(np.abs(mesh.vertices) > 1.0 + 1e-9):
        raise ValueError("mesh vertices outside the field bounds")
    dtype = getattr(field, "dtype", torch.float64)
    with torch.no_grad():
        _, rgb = field(torch.as_tensor(np.clip(mesh.vertices, -1.0, 1.0), dtype=dtype))
    return Mesh(mesh.vertices, mesh.faces, np.clip(rgb.double().numpy(), 0.0, 1.0))


def box_mesh(lo, hi):
    """Closed axis-aligned box with outward-facing triangles."""
    lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    verts = np.array([[hi[0] if c & 1 else lo[0], hi[1] if c & 2 else lo[1], hi[2] if c & 4 else lo[2]] for c in range(8)])
    quads = [(0, 2, 3, 1), (4, 5, 7, 6), (0, 1, 5, 4), (2, 6, 7, 3), (0, 4, 6, 2), (1, 3, 7, 5)]
    faces = []
    for a, b, c, d in quads:
        faces += [(a, b, c), (a, c, d)]
    return Mesh(verts, np.array(faces))
