"""Distance-weighted correspondence losses with exact analytic gradients.

Every loss below is an expectation of a nonnegative distance under a soft
correspondence distribution, so values are always nonnegative and finite:

* supervised loss — for an annotated pixel with known vertex, the expected
  geodesic distance between the predicted vertex distribution and the
  annotated vertex;
* anchor loss — the same construction between two meshes, supervising the
  correspondence distribution of an anchor vertex against its known
  partner vertex;
* mesh cycle loss — send every vertex of mesh A through mesh B and back,
  and penalize the expected geodesic distance between start and return
  vertex (callers add the symmetric B-through-A term);
* image round-trip loss — send a subsampled set of foreground pixels to
  the mesh and back and penalize the expected image-space distance between
  start and return pixel.  Only this direction of the chain exists: every
  foreground pixel has a surface point, but most surface points are not
  visible in any one view, so the reverse chain is meaningless and is
  deliberately not implemented.

Gradients are hand-derived (softmax composition chain rule) and returned
for every parameter block a loss touches: compressed mesh coefficients
under the key ``ehat:<category>`` and pixel grids under ``field:<scene>``.
Distance matrices are constants; no gradient flows through them.
"""

from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .embedding import image_distance, sample_pixels, scores, softmax_rows
from .errors import SembError


@dataclass(frozen=True)
class Annotation:
    """One supervised pixel: scene, category, pixel location, and its vertex."""

    scene_id: str
    category_id: int
    pixel: tuple
    vertex_index: int


@dataclass(frozen=True)
class Anchor:
    """One supervised vertex pair between two meshes (source -> target)."""

    source_category: int
    source_vertex: int
    target_category: int
    target_vertex: int


@dataclass
class LossWeights:
    """Relative weights of the loss terms in the combined objective."""

    lambda_m2m: float = 1.0
    lambda_i2m: float = 1.0
    i2m_variant: str = "gt-class"
    i2m_k_factor: bool = True

    def __post_init__(self):
        if self.lambda_m2m < 0 or self.lambda_i2m < 0:
            raise SembError("loss weights must be nonnegative")
        if self.i2m_variant not in ("gt-class", "all"):
            raise SembError(f"unknown i2m variant {self.i2m_variant!r}")


class LossValue:
    """A scalar loss plus its gradients per parameter block."""

    def __init__(self, value, gradients, terms=None):
        value = float(value)
        if not np.isfinite(value):
            raise SembError(f"loss value is not finite: {value}")
        for key, g in gradients.items():
            if not np.isfinite(g).all():
                raise SembError(f"gradient for block {key!r} is not finite")
        self.value = value
        self.gradients = gradients
        self.terms = terms


def _softmax_backward(P, dP):
    inner = np.einsum("ij,ij->i", dP, P)
    return P * (dP - inner[:, None])


def _score_backward(mode, targets, queries, dS):
    if mode == "neg_inner":
        return -(dS.T @ queries), -(dS @ targets)
    if mode == "inner":
        return dS.T @ queries, dS @ targets
    if mode == "neg_sqdist":
        col = dS.sum(axis=0)
        row = dS.sum(axis=1)
        d_targets = -2.0 * (targets * col[:, None] - dS.T @ queries)
        d_queries = 2.0 * (dS @ targets - queries * row[:, None])
        return d_targets, d_queries
    raise SembError(f"unknown similarity mode {mode!r}")


def _require_normalized(geo):
    if not geo.d_max_applied:
        raise SembError("geodesic matrix must be normalized before use in a loss")


def _merge_gradients(dst, src, scale=1.0):
    for key in sorted(src):
        g = src[key] * scale
        if key in dst:
            dst[key] = dst[key] + g
        else:
            dst[key] = g


def loss_sup(annotations, embeddings, fields, geodesics, mode="neg_inner"):
    """Supervised loss over annotated pixels.

    Mean over annotations of the expected geodesic distance between the
    annotated vertex and the vertex distribution predicted from the pixel
    embedding.  Gradients flow to the category coefficients and to the
    annotated rows of each pixel grid.
    """
    n_total = len(annotations)
    if n_total == 0:
        return LossValue(0.0, {})

    by_scene = {}
    for ann in annotations:
        by_scene.setdefault(ann.scene_id, []).append(ann)

    value = 0.0
    d_expanded = {}
    gradients = {}
    for sid in sorted(by_scene):
        group = by_scene[sid]
        if sid not in fields:
            raise SembError(f"annotation references unknown scene {sid!r}")
        field = fields[sid]
        m = field.category_id
        emb = embeddings[m]
        geo = geodesics[m]
        _require_normalized(geo)
        pixels = np.array([ann.pixel for ann in group])
        verts = np.array([ann.vertex_index for ann in group])
        for ann in group:
            if ann.category_id != m:
                raise SembError(
                    f"annotation category {ann.category_id} does not match scene {sid!r}"
                )
        if not field.mask[pixels[:, 0], pixels[:, 1]].all():
            raise SembError(f"annotation references an unmasked pixel in scene {sid!r}")
        if verts.min() < 0 or verts.max() >= emb.num_vertices:
            raise SembError(f"annotation vertex index out of range in scene {sid!r}")

        targets = emb.expanded
        queries = field.embeddings_at(pixels)
        P = softmax_rows(scores(targets, queries, mode))
        g_cols = geo.values[:, verts]
        value += np.einsum("ik,ki->", P, g_cols)

        dP = g_cols.T / n_total
        dS = _softmax_backward(P, dP)
        d_t, d_q = _score_backward(mode, targets, queries, dS)
        d_expanded[m] = d_expanded.get(m, 0.0) + d_t
        key = f"field:{sid}"
        grad_grid = gradients.get(key)
        if grad_grid is None:
            grad_grid = np.zeros_like(field.grid)
            gradients[key] = grad_grid
        np.add.at(grad_grid, (pixels[:, 0], pixels[:, 1]), d_q)

    for m in sorted(d_expanded):
        gradients[f"ehat:{m}"] = embeddings[m].basis.U.T @ d_expanded[m]
    return LossValue(value / n_total, gradients)


def loss_anchor(anchors, embeddings, geodesics, mode="neg_inner"):
    """Supervised loss over anchor vertex pairs between meshes.

    For each anchor, the source vertex embedding is used as a query against
    the target mesh and the resulting vertex distribution is penalized by
    geodesic distance from the known partner vertex.  Gradients flow to the
    coefficients of both categories.
    """
    n_total = len(anchors)
    if n_total == 0:
        return LossValue(0.0, {})

    by_pair = {}
    for anc in anchors:
        by_pair.setdefault((anc.source_category, anc.target_category), []).append(anc)

    value = 0.0
    d_expanded = {}
    for (src_cat, tgt_cat) in sorted(by_pair):
        group = by_pair[(src_cat, tgt_cat)]
        emb_src = embeddings[src_cat]
        emb_tgt = embeddings[tgt_cat]
        geo = geodesics[tgt_cat]
        _require_normalized(geo)
        src_idx = np.array([a.source_vertex for a in group])
        tgt_idx = np.array([a.target_vertex for a in group])
        if src_idx.min() < 0 or src_idx.max() >= emb_src.num_vertices:
            raise SembError("anchor source vertex out of range")
        if tgt_idx.min() < 0 or tgt_idx.max() >= emb_tgt.num_vertices:
            raise SembError("anchor target vertex out of range")

        targets = emb_tgt.expanded
        queries = emb_src.expanded[src_idx]
        P = softmax_rows(scores(targets, queries, mode))
        g_cols = geo.values[:, tgt_idx]
        value += np.einsum("ik,ki->", P, g_cols)

        dP = g_cols.T / n_total
        dS = _softmax_backward(P, dP)
        d_t, d_q = _score_backward(mode, targets, queries, dS)
        d_expanded[tgt_cat] = d_expanded.get(tgt_cat, 0.0) + d_t
        d_src = np.zeros((emb_src.num_vertices, emb_src.dim))
        np.add.at(d_src, src_idx, d_q)
        d_expanded[src_cat] = d_expanded.get(src_cat, 0.0) + d_src

    gradients = {}
    for m in sorted(d_expanded):
        gradients[f"ehat:{m}"] = embeddings[m].basis.U.T @ d_expanded[m]
    return LossValue(value / n_total, gradients)


def cycle_mesh(p_m_given_n, p_n_given_m):
    """Round-trip distribution of the chain mesh m -> mesh n -> mesh m.

    Marginalizes the intermediate vertex on mesh n.  Entry [k, t] is the
    probability of returning to vertex k of mesh m having started at
    vertex t, so each column sums to one.
    """
    A = p_m_given_n.probs  # (K_n, K_m): start-on-n rows, land-on-m columns
    B = p_n_given_m.probs  # (K_m, K_n)
    if A.shape[0] != B.shape[1] or A.shape[1] != B.shape[0]:
        raise SembError(
            f"correspondence factors do not compose: {A.shape} and {B.shape}"
        )
    return (B @ A).T


def loss_m2m(emb_m, emb_n, geo_m, mode="neg_inner"):
    """Cycle-consistency loss for the chain mesh m -> mesh n -> mesh m.

    Expected geodesic distance on mesh m between start and return vertex,
    averaged over start vertices.  The symmetric chain through the other
    mesh is a separate call with the arguments swapped.
    """
    _require_normalized(geo_m)
    if emb_m.dim != emb_n.dim:
        raise SembError("embedding dimensions do not match")
    E_m = emb_m.expanded
    E_n = emb_n.expanded
    K_m = emb_m.num_vertices

    A = softmax_rows(scores(E_m, E_n, mode))  # p(vertex of m | vertex of n)
    B = softmax_rows(scores(E_n, E_m, mode))  # p(vertex of n | vertex of m)
    C = (B @ A).T
    W = geo_m.values / K_m
    value = np.einsum("kt,kt->", W, C)

    dA = (W @ B).T
    dB = (A @ W).T
    d_t_m, d_q_n = _score_backward(mode, E_m, E_n, _softmax_backward(A, dA))
    d_t_n, d_q_m = _score_backward(mode, E_n, E_m, _softmax_backward(B, dB))

    d_expanded = {}
    d_expanded[emb_m.category_id] = d_t_m
    d_expanded[emb_n.category_id] = d_expanded.get(emb_n.category_id, 0.0) + d_q_n
    d_expanded[emb_n.category_id] = d_expanded.get(emb_n.category_id, 0.0) + d_t_n
    d_expanded[emb_m.category_id] = d_expanded.get(emb_m.category_id, 0.0) + d_q_m

    emb_by_id = {emb_m.category_id: emb_m, emb_n.category_id: emb_n}
    gradients = {}
    for m in sorted(d_expanded):
        gradients[f"ehat:{m}"] = emb_by_id[m].basis.U.T @ d_expanded[m]
    return LossValue(value, gradients)


def cycle_image(p_pix_given_vert, p_vert_given_pix, K_m, k_factor=True):
    """Round-trip distribution of the chain pixels -> mesh -> pixels.

    Entry [x, y] is the (scaled) probability of returning to pixel y having
    started at pixel x.  With ``k_factor`` (the default) the marginalization
    carries a 1/K factor, so rows sum to 1/K rather than 1; disabling it
    gives the plain row-stochastic composition.
    """
    B = p_pix_given_vert.probs  # (K, n)
    A = p_vert_given_pix.probs  # (n, K)
    if A.shape[1] != B.shape[0] or A.shape[0] != B.shape[1]:
        raise SembError(
            f"correspondence factors do not compose: {A.shape} and {B.shape}"
        )
    if B.shape[0] != K_m:
        raise SembError(f"vertex count mismatch: factors use {B.shape[0]}, K={K_m}")
    scale = (1.0 / K_m) if k_factor else 1.0
    return scale * (A @ B)


def loss_i2m(emb, field, pixels, d_img, mode="neg_inner", k_factor=True):
    """Image round-trip loss on a subsampled pixel set.

    Expected image-space distance between each sampled pixel and its return
    pixel after the chain through the mesh, averaged over sampled pixels.
    Gradients flow to the category coefficients and the sampled grid rows.
    """
    pixels = np.asarray(pixels)
    n = len(pixels)
    if n == 0:
        raise SembError("need at least one sampled pixel")
    if not field.mask[pixels[:, 0], pixels[:, 1]].all():
        raise SembError("sampled pixel outside the mask")
    d_img = np.asarray(d_img, dtype=np.float64)
    if d_img.shape != (n, n):
        raise SembError(f"image distance matrix must be {n} x {n}, got {d_img.shape}")

    E = emb.expanded
    K = emb.num_vertices
    X = field.embeddings_at(pixels)

    A = softmax_rows(scores(E, X, mode))  # p(vertex | pixel), (n, K)
    B = softmax_rows(scores(X, E, mode))  # p(pixel | vertex), (K, n)
    scale = (1.0 / K) if k_factor else 1.0
    C = scale * (A @ B)
    value = np.einsum("xy,xy->", d_img, C) / n

    W = d_img * (scale / n)
    dA = W @ B.T
    dB = A.T @ W
    d_e1, d_x1 = _score_backward(mode, E, X, _softmax_backward(A, dA))
    d_x2, d_e2 = _score_backward(mode, X, E, _softmax_backward(B, dB))

    grad_grid = np.zeros_like(field.grid)
    np.add.at(grad_grid, (pixels[:, 0], pixels[:, 1]), d_x1 + d_x2)
    gradients = {
        f"ehat:{emb.category_id}": emb.basis.U.T @ (d_e1 + d_e2),
        f"field:{field.scene_id}": grad_grid,
    }
    return LossValue(value, gradients)


def loss_i2m_all(embeddings, field, pixels, d_img, mode="neg_inner", k_factor=True):
    """Image round-trip loss against every category's mesh, averaged.

    Cross-category variant: the same pixel set is cycled through every
    registered template, not just the scene's ground-truth category, and
    gradients accumulate into every category's coefficients.
    """
    cats = sorted(embeddings)
    if not cats:
        raise SembError("no categories registered")
    value = 0.0
    gradients = {}
    for m in cats:
        part = loss_i2m(embeddings[m], field, pixels, d_img, mode=mode, k_factor=k_factor)
        value += part.value
        _merge_gradients(gradients, part.gradients, scale=1.0 / len(cats))
    return LossValue(value / len(cats), gradients)


def make_omega_samples(problem, seed):
    """Sample a pixel subset for every scene of a problem, seeded per scene."""
    samples = {}
    for idx, sid in enumerate(sorted(problem.fields)):
        field = problem.fields[sid]
        n = min(problem.omega_bar, len(field.masked_pixels))
        samples[sid] = sample_pixels(field, n, seed=(_seed_tuple(seed) + (idx,)))
    return samples


def _seed_tuple(seed):
    if isinstance(seed, (tuple, list)):
        return tuple(int(s) for s in seed)
    return (int(seed),)


def loss_total(problem, weights, omega_samples=None):
    """Combined objective: supervised terms plus weighted cycle terms.

    The supervised pixel and anchor terms enter with unit weight; the mesh
    cycle term is averaged over all ordered category pairs and the image
    round-trip term over all scenes, each scaled by its weight.  The
    returned :class:`LossValue` carries a ``terms`` dict with the
    unweighted per-term averages.
    """
    embeddings = problem.embeddings
    terms = {}
    value = 0.0
    gradients = {}

    sup = loss_sup(problem.annotations, embeddings, problem.fields,
                   problem.geodesics, mode=problem.mode)
    terms["sup"] = sup.value
    value += sup.value
    _merge_gradients(gradients, sup.gradients)

    anchor = loss_anchor(problem.anchors, embeddings, problem.geodesics,
                         mode=problem.mode)
    terms["anchor"] = anchor.value
    value += anchor.value
    _merge_gradients(gradients, anchor.gradients)

    terms["m2m"] = 0.0
    if weights.lambda_m2m > 0:
        cats = sorted(embeddings)
        M = len(cats)
        if M < 2:
            raise SembError("mesh cycle loss enabled but fewer than 2 categories")
        pair_factor = 1.0 / (M * (M - 1))
        m2m_avg = 0.0
        for m in cats:
            for n in cats:
                if m == n:
                    continue
                part = loss_m2m(embeddings[m], embeddings[n],
                                problem.geodesics[m], mode=problem.mode)
                m2m_avg += pair_factor * part.value
                _merge_gradients(gradients, part.gradients,
                                 scale=weights.lambda_m2m * pair_factor)
        terms["m2m"] = m2m_avg
        value += weights.lambda_m2m * m2m_avg

    terms["i2m"] = 0.0
    if weights.lambda_i2m > 0 and problem.fields:
        if omega_samples is None:
            omega_samples = make_omega_samples(problem, seed=0)
        scene_factor = 1.0 / len(problem.fields)
        i2m_avg = 0.0
        for sid in sorted(problem.fields):
            field = problem.fields[sid]
            pixels = omega_samples[sid]
            d_img = image_distance(pixels, *field.resolution)
            if weights.i2m_variant == "all":
                part = loss_i2m_all(embeddings, field, pixels, d_img,
                                    mode=problem.mode, k_factor=weights.i2m_k_factor)
            else:
                part = loss_i2m(embeddings[field.category_id], field, pixels, d_img,
                                mode=problem.mode, k_factor=weights.i2m_k_factor)
            i2m_avg += scene_factor * part.value
            _merge_gradients(gradients, part.gradients,
                             scale=weights.lambda_i2m * scene_factor)
        terms["i2m"] = i2m_avg
        value += weights.lambda_i2m * i2m_avg

    return LossValue(value, gradients, terms=terms)
