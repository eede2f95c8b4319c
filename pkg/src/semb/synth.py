"""Synthetic views with exact pixel-to-vertex ground truth.

A scene is an orthographic software rasterization of one mesh: a z-buffer
pass with barycentric interpolation yields the foreground mask and, for
every covered pixel, the visible face and the face vertex with the largest
barycentric weight.  No shading is produced; pixel appearance is a
learnable embedding grid, so geometry is all a scene needs to carry.
Scenes supply sparse supervised annotations and dense evaluation ground
truth, and permuted mesh copies supply exact alignment ground truth.
"""

import numpy as np

from .errors import SembError
from .losses import Annotation
from .mesh import Mesh


class Scene:
    """One rendered orthographic view with per-pixel ground truth.

    ``mask`` flags foreground pixels; ``gt_vertex`` holds the nearest mesh
    vertex (by barycentric weight) for masked pixels and -1 elsewhere;
    ``gt_face``/``gt_bary`` retain the full rasterization record.
    """

    def __init__(self, category_id, rotation, resolution, mask, gt_vertex,
                 gt_face=None, gt_bary=None, scene_id=None):
        rotation = np.asarray(rotation, dtype=np.float64)
        if rotation.shape != (3, 3):
            raise SembError(f"rotation must be 3 x 3, got {rotation.shape}")
        if np.abs(rotation @ rotation.T - np.eye(3)).max() > 1e-10:
            raise SembError("rotation matrix is not orthonormal")
        mask = np.asarray(mask, dtype=bool)
        gt_vertex = np.asarray(gt_vertex, dtype=np.int64)
        if mask.shape != tuple(resolution) or gt_vertex.shape != mask.shape:
            raise SembError("mask/gt_vertex shapes do not match the resolution")
        if (gt_vertex[~mask] != -1).any() or (gt_vertex[mask] < 0).any():
            raise SembError("gt_vertex must be valid exactly on masked pixels")
        self.category_id = int(category_id)
        self.rotation = rotation
        self.resolution = (int(resolution[0]), int(resolution[1]))
        self.mask = mask
        self.gt_vertex = gt_vertex
        self.gt_face = gt_face
        self.gt_bary = gt_bary
        self.scene_id = scene_id
        for arr in (self.rotation, self.mask, self.gt_vertex):
            arr.flags.writeable = False


def render_scene(mesh, rotation, resolution, seed=0, scene_id=None):
    """Rasterize an orthographic view of the mesh.

    The rotated mesh is scaled so its screen bounding box fills 90% of the
    short image side, then rasterized with a z-buffer at pixel centers.
    ``gt_vertex`` at each covered pixel is the vertex of the visible face
    with the largest barycentric weight.  Deterministic given (mesh,
    rotation, resolution); ``seed`` is kept only as scene metadata.

    Raises
    ------
    SembError
        If the resolution is below 8 x 8 or the projection covers no pixel.
    """
    H, W = int(resolution[0]), int(resolution[1])
    if H < 8 or W < 8:
        raise SembError(f"resolution must be at least 8 x 8, got {H} x {W}")
    rotation = np.asarray(rotation, dtype=np.float64)

    v = mesh.vertices @ rotation.T
    x, y, z = v[:, 0], v[:, 1], v[:, 2]
    cx = 0.5 * (x.min() + x.max())
    cy = 0.5 * (y.min() + y.max())
    extent = max(x.max() - x.min(), y.max() - y.min())
    if extent <= 0:
        raise SembError("degenerate projection: zero screen extent")
    scale = 0.9 * min(H, W) / extent
    col = (x - cx) * scale + W / 2.0
    row = H / 2.0 - (y - cy) * scale

    zbuf = np.full((H, W), -np.inf)
    face_id = np.full((H, W), -1, dtype=np.int64)
    bary = np.zeros((H, W, 3))

    pix_c = np.arange(W) + 0.5
    pix_r = np.arange(H) + 0.5
    for fi, (a, b, c) in enumerate(mesh.faces):
        tc = col[[a, b, c]]
        tr = row[[a, b, c]]
        denom = (tc[1] - tc[0]) * (tr[2] - tr[0]) - (tc[2] - tc[0]) * (tr[1] - tr[0])
        if abs(denom) < 1e-12:
            continue  # edge-on in this view
        c0 = max(int(np.floor(tc.min() - 0.5)), 0)
        c1 = min(int(np.ceil(tc.max() + 0.5)), W - 1)
        r0 = max(int(np.floor(tr.min() - 0.5)), 0)
        r1 = min(int(np.ceil(tr.max() + 0.5)), H - 1)
        if c0 > c1 or r0 > r1:
            continue
        pc = pix_c[c0:c1 + 1][None, :]
        pr = pix_r[r0:r1 + 1][:, None]
        w1 = ((pc - tc[0]) * (tr[2] - tr[0]) - (tc[2] - tc[0]) * (pr - tr[0])) / denom
        w2 = ((tc[1] - tc[0]) * (pr - tr[0]) - (pc - tc[0]) * (tr[1] - tr[0])) / denom
        w0 = 1.0 - w1 - w2
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        zval = w0 * z[a] + w1 * z[b] + w2 * z[c]
        patch = zbuf[r0:r1 + 1, c0:c1 + 1]
        better = inside & (zval > patch)
        patch[better] = zval[better]
        face_id[r0:r1 + 1, c0:c1 + 1][better] = fi
        wstack = np.stack([w0, w1, w2], axis=-1)
        bary[r0:r1 + 1, c0:c1 + 1][better] = wstack[better]

    mask = face_id >= 0
    if not mask.any():
        raise SembError("mesh projects to no pixel (fully backfacing or degenerate)")
    gt_vertex = np.full((H, W), -1, dtype=np.int64)
    rows, cols = np.nonzero(mask)
    local = np.argmax(bary[rows, cols], axis=1)
    gt_vertex[rows, cols] = mesh.faces[face_id[rows, cols], local]

    return Scene(mesh.category_id, rotation, (H, W), mask, gt_vertex,
                 gt_face=face_id, gt_bary=bary, scene_id=scene_id)


def sample_annotations(scene, n, seed):
    """Draw n distinct masked pixels with their ground-truth vertices."""
    candidates = np.argwhere(scene.mask)
    if n > len(candidates):
        raise SembError(f"requested {n} annotations but mask has {len(candidates)} pixels")
    if n < 0:
        raise SembError("annotation count must be nonnegative")
    rng = np.random.default_rng(seed)
    sel = rng.choice(len(candidates), size=n, replace=False) if n else []
    out = []
    for idx in np.sort(sel):
        r, c = candidates[idx]
        out.append(Annotation(scene_id=scene.scene_id,
                              category_id=scene.category_id,
                              pixel=(int(r), int(c)),
                              vertex_index=int(scene.gt_vertex[r, c])))
    return out


def random_rotation(seed):
    """Uniformly random rotation matrix (QR of a seeded Gaussian, det +1)."""
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((3, 3))
    Q, R = np.linalg.qr(A)
    Q = Q * np.sign(np.diag(R))
    if np.linalg.det(Q) < 0:
        Q[:, 2] *= -1
    return Q


def permuted_copy(mesh, seed, category_id=None):
    """Same geometry with relabeled vertices, plus the relabeling itself.

    Returns ``(copy, perm)`` where vertex ``i`` of the original is vertex
    ``perm[i]`` of the copy.  ``seed=None`` yields the identity relabeling.
    The permutation is exact alignment ground truth for the pair.
    """
    K = mesh.num_vertices
    if seed is None:
        perm = np.arange(K)
    else:
        perm = np.random.default_rng(seed).permutation(K)
    new_vertices = np.empty_like(mesh.vertices)
    new_vertices[perm] = mesh.vertices
    new_faces = perm[mesh.faces]
    cid = mesh.category_id if category_id is None else category_id
    return Mesh(new_vertices, new_faces, category_id=cid), perm
