"""Triangle meshes: loading, fixture generators, differential operators, geodesics.

The mesh is the domain every surface embedding lives on.  This module keeps
the geometry side self-contained: file I/O for OBJ and ASCII PLY, the
cotangent Laplacian and lumped mass matrix that feed the spectral basis,
and exact all-pairs graph geodesics with the fixed-maximum normalization
used by every distance-weighted loss and metric.
"""

import hashlib

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from .errors import MeshParseError, SembError, TopologyError

GEODESIC_VERTEX_CAP = 5000
GEODESIC_MAX = 2.27


class Mesh:
    """Immutable triangle surface mesh.

    Parameters
    ----------
    vertices : array_like
        K x 3 vertex coordinates in model units, K >= 4.
    faces : array_like
        F x 3 integer vertex indices, F >= 4, three distinct indices each.
    category_id : int
        Label of the object category this mesh is the template of.

    Raises
    ------
    TopologyError
        If the mesh is disconnected or has a non-manifold edge (an edge
        shared by more than two faces).  Broken meshes are rejected rather
        than repaired: repair would reorder vertices and silently corrupt
        vertex-indexed annotations.
    SembError
        On malformed shapes, out-of-range indices, or degenerate index
        triples.
    """

    def __init__(self, vertices, faces, category_id=0):
        v = np.asarray(vertices, dtype=np.float64)
        f = np.asarray(faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise SembError(f"vertices must be K x 3, got shape {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise SembError(f"faces must be F x 3, got shape {f.shape}")
        if v.shape[0] < 4:
            raise SembError(f"need at least 4 vertices, got {v.shape[0]}")
        if f.shape[0] < 4:
            raise SembError(f"need at least 4 faces, got {f.shape[0]}")
        if not np.isfinite(v).all():
            raise SembError("vertices contain non-finite values")
        if f.min() < 0 or f.max() >= v.shape[0]:
            raise SembError("face index out of range")
        same = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        if same.any():
            bad = int(np.flatnonzero(same)[0])
            raise SembError(f"face {bad} has repeated vertex indices")

        self.vertices = v
        self.faces = f
        self.category_id = int(category_id)
        self.vertices.flags.writeable = False
        self.faces.flags.writeable = False
        self._edges = None
        self._check_topology()

    @property
    def num_vertices(self):
        return self.vertices.shape[0]

    @property
    def num_faces(self):
        return self.faces.shape[0]

    @property
    def edges(self):
        """Unique undirected edges as an E x 2 array with i < j."""
        if self._edges is None:
            he = np.vstack([self.faces[:, [0, 1]],
                            self.faces[:, [1, 2]],
                            self.faces[:, [2, 0]]])
            he = np.sort(he, axis=1)
            self._edges = np.unique(he, axis=0)
            self._edges.flags.writeable = False
        return self._edges

    def _check_topology(self):
        he = np.vstack([self.faces[:, [0, 1]],
                        self.faces[:, [1, 2]],
                        self.faces[:, [2, 0]]])
        he = np.sort(he, axis=1)
        edges, counts = np.unique(he, axis=0, return_counts=True)
        if (counts > 2).any():
            i, j = edges[np.argmax(counts > 2)]
            raise TopologyError(f"non-manifold edge ({i}, {j}) shared by >2 faces")
        adj = sparse.coo_matrix(
            (np.ones(len(edges)), (edges[:, 0], edges[:, 1])),
            shape=(self.num_vertices, self.num_vertices),
        )
        n_comp, _ = csgraph.connected_components(adj, directed=False)
        if n_comp != 1:
            raise TopologyError(f"mesh is disconnected ({n_comp} components)")

    def content_hash(self):
        """SHA-256 of the geometry, stable across file formats."""
        h = hashlib.sha256()
        h.update(b"SEMB-MESH-1")
        h.update(np.int64([self.num_vertices, self.num_faces]).tobytes())
        h.update(self.vertices.tobytes())
        h.update(self.faces.tobytes())
        return h.hexdigest()


class GeodesicMatrix:
    """Dense all-pairs geodesic distances on one mesh.

    ``values`` is a symmetric K x K float64 array with zero diagonal.
    ``d_max_applied`` records whether the fixed-maximum normalization has
    been applied; distance-weighted losses and metrics require it.
    """

    def __init__(self, values, d_max_applied):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise SembError(f"geodesic matrix must be square, got {values.shape}")
        self.values = values
        self.values.flags.writeable = False
        self.d_max_applied = bool(d_max_applied)

    @property
    def num_vertices(self):
        return self.values.shape[0]


def make_tetrahedron(edge_length=1.0, category_id=0):
    """Regular tetrahedron with the given edge length, centered at the origin.

    The smallest valid closed triangle mesh (K=4, F=4); all six edges have
    equal length, so its geodesic matrix is constant off the diagonal.
    """
    v = np.array([[1.0, 1.0, 1.0],
                  [1.0, -1.0, -1.0],
                  [-1.0, 1.0, -1.0],
                  [-1.0, -1.0, 1.0]])
    v *= edge_length / np.sqrt(8.0)
    f = np.array([[0, 1, 2], [0, 2, 3], [0, 3, 1], [1, 3, 2]])
    return Mesh(v, f, category_id=category_id)


def make_icosphere(subdivisions, category_id=0):
    """Unit-radius icosphere.

    ``subdivisions=0`` gives the icosahedron (K=12, F=20); each subdivision
    splits every face in four and projects the new edge midpoints onto the
    unit sphere, so K -> K + E and F -> 4 F.

    Parameters
    ----------
    subdivisions : int
        Number of subdivision rounds, 0 <= subdivisions <= 5.
    """
    if not 0 <= subdivisions <= 5:
        raise SembError(f"subdivisions must be in [0, 5], got {subdivisions}")
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts[0])
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]

    verts = [tuple(p) for p in verts]
    for _ in range(subdivisions):
        midpoint = {}

        def mid(i, j):
            key = (i, j) if i < j else (j, i)
            if key not in midpoint:
                p = np.array(verts[i]) + np.array(verts[j])
                p /= np.linalg.norm(p)
                verts.append(tuple(p))
                midpoint[key] = len(verts) - 1
            return midpoint[key]

        new_faces = []
        for (a, b, c) in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces

    return Mesh(np.array(verts), np.array(faces), category_id=category_id)


def _face_corner_cotangents(v0, v1, v2):
    # cot at each corner: dot of the two emanating edges over twice the area
    e0 = v1 - v0
    e1 = v2 - v1
    e2 = v0 - v2
    n = np.cross(e0, -e2)
    double_area = np.linalg.norm(n, axis=1)
    cot0 = np.einsum("ij,ij->i", e0, -e2) / double_area
    cot1 = np.einsum("ij,ij->i", e1, -e0) / double_area
    cot2 = np.einsum("ij,ij->i", e2, -e1) / double_area
    return cot0, cot1, cot2, double_area / 2.0


def laplacian_and_mass(mesh):
    """Cotangent Laplacian and lumped vertex-area mass matrix.

    Returns
    -------
    L : scipy.sparse.csr_matrix
        K x K symmetric positive-semidefinite cotangent Laplacian with the
        sign convention L = D - W, so L annihilates constant vectors.
    mass : scipy.sparse.csr_matrix
        K x K diagonal matrix of barycentric vertex areas (one third of
        each incident face area), strictly positive.

    Raises
    ------
    SembError
        If any triangle is geometrically degenerate (zero area); the
        message names the face index.
    """
    v = mesh.vertices
    f = mesh.faces
    p0, p1, p2 = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    edge_sq = np.max(
        np.stack([
            np.sum((p1 - p0) ** 2, axis=1),
            np.sum((p2 - p1) ** 2, axis=1),
            np.sum((p0 - p2) ** 2, axis=1),
        ]),
        axis=0,
    )
    n = np.cross(p1 - p0, p2 - p0)
    area = 0.5 * np.linalg.norm(n, axis=1)
    degenerate = area <= 1e-12 * edge_sq
    if degenerate.any():
        bad = int(np.flatnonzero(degenerate)[0])
        raise SembError(f"degenerate triangle (zero area) at face {bad}")

    cot0, cot1, cot2, _ = _face_corner_cotangents(p0, p1, p2)
    K = mesh.num_vertices
    # each corner cotangent weights the edge opposite to it
    rows = np.concatenate([f[:, 1], f[:, 2], f[:, 0]])
    cols = np.concatenate([f[:, 2], f[:, 0], f[:, 1]])
    vals = 0.5 * np.concatenate([cot0, cot1, cot2])
    W = sparse.coo_matrix((vals, (rows, cols)), shape=(K, K))
    W = (W + W.T).tocsr()
    L = sparse.diags(np.asarray(W.sum(axis=1)).ravel()) - W

    mass_diag = np.zeros(K)
    np.add.at(mass_diag, f[:, 0], area / 3.0)
    np.add.at(mass_diag, f[:, 1], area / 3.0)
    np.add.at(mass_diag, f[:, 2], area / 3.0)
    return L.tocsr(), sparse.diags(mass_diag).tocsr()


def geodesic_matrix(mesh, vertex_cap=GEODESIC_VERTEX_CAP):
    """All-pairs geodesic distances over the edge graph.

    Exact Dijkstra from every source with Euclidean edge lengths; returns
    an unnormalized :class:`GeodesicMatrix`.  The dense K x K result is
    capped at ``vertex_cap`` vertices (default 5000, ~200 MB of float64).
    """
    K = mesh.num_vertices
    if K > vertex_cap:
        raise SembError(f"mesh has {K} vertices, above the geodesic cap {vertex_cap}")
    e = mesh.edges
    lengths = np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1)
    graph = sparse.coo_matrix((lengths, (e[:, 0], e[:, 1])), shape=(K, K)).tocsr()
    dist = csgraph.dijkstra(graph, directed=False)
    if np.isinf(dist).any():
        raise TopologyError("mesh is disconnected: infinite geodesic distance")
    # equal-length shortest paths can accumulate rounding differently per
    # direction; take the elementwise minimum to restore exact symmetry
    dist = np.minimum(dist, dist.T)
    return GeodesicMatrix(dist, d_max_applied=False)


def normalize_geodesics(geo, d_max=GEODESIC_MAX):
    """Scale a geodesic matrix so its maximum entry equals ``d_max``.

    Puts meshes of different physical size on a common distance scale.
    Normalizing twice is forbidden: the scale factor would silently change.
    """
    if geo.d_max_applied:
        raise SembError("geodesic matrix is already normalized")
    if d_max <= 0:
        raise SembError(f"d_max must be positive, got {d_max}")
    mx = geo.values.max()
    if mx <= 0:
        raise SembError("geodesic matrix has no positive entry to normalize by")
    return GeodesicMatrix(geo.values * (d_max / mx), d_max_applied=True)


def load_mesh(path, format=None, category_id=0):
    """Load a triangle mesh from an OBJ or ASCII PLY file.

    The format is inferred from the extension unless given explicitly as
    ``"obj"`` or ``"ply"``.  Vertex order is preserved exactly as in the
    file.  Faces must be triangles; quads are rejected, not split.
    """
    path = str(path)
    if format is None:
        lower = path.lower()
        if lower.endswith(".obj"):
            format = "obj"
        elif lower.endswith(".ply"):
            format = "ply"
        else:
            raise SembError(f"cannot infer mesh format from path {path!r}")
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    if format == "obj":
        verts, faces = _parse_obj(text)
    elif format == "ply":
        verts, faces = _parse_ply(text)
    else:
        raise SembError(f"unknown mesh format {format!r}")
    return Mesh(verts, faces, category_id=category_id)


def _parse_obj(text):
    verts = []
    faces = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        tag = tokens[0]
        if tag == "v":
            if len(tokens) != 4:
                raise MeshParseError(f"line {lineno}: vertex needs 3 coordinates")
            try:
                verts.append([float(t) for t in tokens[1:]])
            except ValueError:
                raise MeshParseError(f"line {lineno}: bad vertex coordinate") from None
        elif tag == "f":
            refs = tokens[1:]
            if len(refs) != 3:
                raise MeshParseError(
                    f"line {lineno}: face has {len(refs)} vertices, only triangles supported"
                )
            idx = []
            for ref in refs:
                head = ref.split("/")[0]
                try:
                    i = int(head)
                except ValueError:
                    raise MeshParseError(f"line {lineno}: bad face index {ref!r}") from None
                if i <= 0:
                    raise MeshParseError(f"line {lineno}: face indices must be positive")
                idx.append(i - 1)
            faces.append(idx)
        # vn/vt/o/g/s/usemtl/mtllib lines carry no geometry we keep
    if not verts:
        raise MeshParseError("no vertices found")
    return np.array(verts), np.array(faces)


def _parse_ply(text):
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise MeshParseError("missing 'ply' magic line")
    n_verts = n_faces = None
    i = 1
    current_element = None
    while i < len(lines):
        tokens = lines[i].strip().split()
        i += 1
        if not tokens:
            continue
        if tokens[0] == "format":
            if tokens[1] != "ascii":
                raise MeshParseError("only ASCII PLY is supported")
        elif tokens[0] == "element":
            current_element = tokens[1]
            if tokens[1] == "vertex":
                n_verts = int(tokens[2])
            elif tokens[1] == "face":
                n_faces = int(tokens[2])
        elif tokens[0] == "end_header":
            break
        elif tokens[0] in ("comment", "property"):
            continue
        else:
            raise MeshParseError(f"unexpected header line: {lines[i - 1].strip()!r}")
    else:
        raise MeshParseError("missing end_header")
    if n_verts is None or n_faces is None:
        raise MeshParseError("header must declare vertex and face elements")

    body = [ln for ln in lines[i:] if ln.strip()]
    if len(body) < n_verts + n_faces:
        raise MeshParseError("file truncated: fewer data lines than declared")
    verts = []
    for k in range(n_verts):
        tokens = body[k].split()
        if len(tokens) < 3:
            raise MeshParseError(f"vertex line {k}: need at least 3 coordinates")
        try:
            verts.append([float(t) for t in tokens[:3]])
        except ValueError:
            raise MeshParseError(f"vertex line {k}: bad coordinate") from None
    faces = []
    for k in range(n_faces):
        tokens = body[n_verts + k].split()
        try:
            count = int(tokens[0])
        except (ValueError, IndexError):
            raise MeshParseError(f"face line {k}: bad vertex count") from None
        if count != 3:
            raise MeshParseError(f"face line {k}: {count}-gon, only triangles supported")
        if len(tokens) < 4:
            raise MeshParseError(f"face line {k}: missing indices")
        faces.append([int(t) for t in tokens[1:4]])
    return np.array(verts), np.array(faces)


def write_obj(mesh, path):
    """Write an OBJ file (v/f lines only, 1-based indices).

    Coordinates are written with ``repr`` so reading the file back
    reproduces every vertex bit-exactly.
    """
    lines = []
    for x, y, z in mesh.vertices:
        lines.append(f"v {x!r} {y!r} {z!r}")
    for a, b, c in mesh.faces:
        lines.append(f"f {a + 1} {b + 1} {c + 1}")
    data = ("\n".join(lines) + "\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(data)


def write_ply(mesh, path, colors=None, comments=()):
    """Write an ASCII PLY file, optionally with per-vertex uchar colors."""
    if colors is not None:
        colors = np.asarray(colors)
        if colors.shape != (mesh.num_vertices, 3):
            raise SembError(f"colors must be K x 3, got {colors.shape}")
    lines = ["ply", "format ascii 1.0"]
    for c in comments:
        lines.append(f"comment {c}")
    lines.append(f"element vertex {mesh.num_vertices}")
    lines += ["property float64 x", "property float64 y", "property float64 z"]
    if colors is not None:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines.append(f"element face {mesh.num_faces}")
    lines.append("property list uchar int vertex_indices")
    lines.append("end_header")
    for k in range(mesh.num_vertices):
        x, y, z = mesh.vertices[k]
        row = f"{x!r} {y!r} {z!r}"
        if colors is not None:
            r, g, b = colors[k]
            row += f" {int(r)} {int(g)} {int(b)}"
        lines.append(row)
    for a, b, c in mesh.faces:
        lines.append(f"3 {a} {b} {c}")
    data = ("\n".join(lines) + "\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(data)
