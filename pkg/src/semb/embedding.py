"""Surface and pixel embeddings plus the probabilistic correspondence kernel.

Every object — template mesh vertex or image pixel — carries a D-dimensional
embedding vector.  Correspondences between two embedded sets are expressed
as a row-stochastic matrix: each query row is a softmax over similarity
scores against all targets.  Three similarity modes are supported:

* ``neg_inner`` (default): score = -<target, query>.  This is the literal
  kernel the losses are defined with; note that under it more-similar
  embeddings get *lower* probability.
* ``inner``: score = <target, query>.
* ``neg_sqdist``: score = -||target - query||^2, the metric variant under
  which self-similarity is maximal.

Mesh embeddings are compressed: the learnable parameter is a Q x D
coefficient matrix against a smooth spectral basis, expanded on demand to
the K x D per-vertex matrix.  Pixel embeddings are a learnable H x W x D
grid restricted to a foreground mask.
"""

import numpy as np

from .errors import SembError

MODES = ("neg_inner", "inner", "neg_sqdist")


class CategoryEmbedding:
    """Compressed per-category embedding: coefficients against a spectral basis.

    The expanded K x D per-vertex matrix is cached and refreshed whenever
    the coefficient matrix is assigned.
    """

    def __init__(self, ehat, basis, category_id):
        self.basis = basis
        self.category_id = int(category_id)
        self._expanded = None
        self.ehat = ehat

    @property
    def ehat(self):
        return self._ehat

    @ehat.setter
    def ehat(self, value):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim != 2 or value.shape[0] != self.basis.num_modes:
            raise SembError(
                f"coefficients must be Q x D with Q={self.basis.num_modes}, got {value.shape}"
            )
        self._ehat = value.copy()
        self._expanded = self.basis.U @ self._ehat

    @property
    def expanded(self):
        """Cached K x D per-vertex embedding matrix."""
        return self._expanded

    @property
    def dim(self):
        return self._ehat.shape[1]

    @property
    def num_vertices(self):
        return self.basis.num_vertices


def expand(embedding):
    """Recompute and return the expanded per-vertex matrix, refreshing the cache."""
    embedding.ehat = embedding.ehat
    return embedding.expanded


class PixelField:
    """Learnable H x W x D embedding grid over a foreground mask.

    Only masked pixels ever participate in a loss or metric; the values at
    unmasked pixels are dead weight kept purely so the grid stays a dense
    array.
    """

    def __init__(self, grid, mask, scene_id, category_id):
        grid = np.asarray(grid, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        if grid.ndim != 3:
            raise SembError(f"grid must be H x W x D, got shape {grid.shape}")
        if mask.shape != grid.shape[:2]:
            raise SembError(f"mask shape {mask.shape} does not match grid {grid.shape[:2]}")
        if not mask.any():
            raise SembError("mask selects no pixels")
        self.grid = grid
        self.mask = mask
        self.mask.flags.writeable = False
        self.scene_id = scene_id
        self.category_id = int(category_id)
        self._masked = np.argwhere(mask)
        self._masked.flags.writeable = False

    @property
    def dim(self):
        return self.grid.shape[2]

    @property
    def resolution(self):
        return self.grid.shape[:2]

    @property
    def masked_pixels(self):
        """All masked pixel coordinates in raster order, as an N x 2 int array."""
        return self._masked

    def embeddings_at(self, pixels):
        """Rows of the grid at the given (row, col) pixel coordinates."""
        pixels = np.asarray(pixels)
        return self.grid[pixels[:, 0], pixels[:, 1]]


class CorrespondenceMatrix:
    """Row-stochastic soft assignment from queries (rows) to targets (columns)."""

    def __init__(self, probs, direction, mode):
        probs = np.asarray(probs, dtype=np.float64)
        row_sums = probs.sum(axis=1)
        if not np.allclose(row_sums, 1.0, atol=1e-9):
            raise SembError("correspondence rows must sum to 1")
        self.probs = probs
        self.direction = tuple(direction)
        self.mode = mode


def scores(targets, queries, mode):
    """Similarity score matrix, queries as rows and targets as columns."""
    if mode not in MODES:
        raise SembError(f"unknown similarity mode {mode!r}")
    if mode == "neg_inner":
        return -(queries @ targets.T)
    if mode == "inner":
        return queries @ targets.T
    q2 = np.einsum("ij,ij->i", queries, queries)
    t2 = np.einsum("ij,ij->i", targets, targets)
    return 2.0 * (queries @ targets.T) - q2[:, None] - t2[None, :]


def softmax_rows(S):
    """Row-wise softmax, stabilized by subtracting each row's maximum."""
    S = S - S.max(axis=1, keepdims=True)
    P = np.exp(S)
    P /= P.sum(axis=1, keepdims=True)
    return P


def correspondence(targets, queries, mode="neg_inner", direction=("query", "target")):
    """Probabilistic correspondence sending each query to the target set.

    Row l of the result is the softmax over targets of the similarity score
    between target k and query l, so rows sum to one.
    """
    targets = np.asarray(targets, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    if targets.ndim != 2 or queries.ndim != 2 or targets.shape[1] != queries.shape[1]:
        raise SembError(
            f"embedding dims do not match: targets {targets.shape}, queries {queries.shape}"
        )
    if not (np.isfinite(targets).all() and np.isfinite(queries).all()):
        raise SembError("non-finite embeddings")
    P = softmax_rows(scores(targets, queries, mode))
    return CorrespondenceMatrix(P, direction, mode)


def sample_pixels(field, n, seed):
    """Draw n distinct masked pixels uniformly without replacement.

    Deterministic under ``seed``; the result is returned in raster order
    as an n x 2 (row, col) array.
    """
    candidates = field.masked_pixels
    if n > len(candidates):
        raise SembError(f"requested {n} pixels but mask has only {len(candidates)}")
    if n < 0:
        raise SembError("sample size must be nonnegative")
    rng = np.random.default_rng(seed)
    sel = rng.choice(len(candidates), size=n, replace=False)
    return candidates[np.sort(sel)]


def image_distance(pixels, height, width):
    """Pairwise Euclidean distance between pixel centers.

    Coordinates are normalized by max(height, width) so the result is
    resolution-free and bounded by sqrt(2).
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim != 2 or pixels.shape[1] != 2 or len(pixels) == 0:
        raise SembError(f"need a nonempty N x 2 pixel array, got shape {pixels.shape}")
    coords = pixels / float(max(height, width))
    diff = coords[:, None, :] - coords[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def field_from_vertex_lookup(mask, gt_vertex, expanded, scene_id, category_id):
    """Pixel field whose masked entries copy the embedding of their known vertex.

    Useful as an oracle initialization: with ``grid[p] = expanded[vertex(p)]``
    corresponding surface points in two views share embeddings exactly.
    """
    mask = np.asarray(mask, dtype=bool)
    grid = np.zeros(mask.shape + (expanded.shape[1],))
    grid[mask] = expanded[gt_vertex[mask]]
    return PixelField(grid, mask, scene_id=scene_id, category_id=category_id)
