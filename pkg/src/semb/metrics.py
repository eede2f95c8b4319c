"""Evaluation metrics: geodesic point similarity and error, threshold-swept
precision/recall, and embedding-space keypoint transfer.

All geodesic metrics operate on distance matrices normalized to the common
fixed maximum, so scores are comparable across meshes of different size.
"""

import numpy as np

from .embedding import correspondence, scores
from .errors import SembError

GPS_KAPPA = 0.255
AP_THRESHOLDS = tuple(i / 100 for i in range(50, 100, 5))


class VertexMap:
    """Discrete vertex assignment from a source mesh onto a target mesh."""

    def __init__(self, source_category, target_category, assignment, target_vertices):
        assignment = np.asarray(assignment, dtype=np.int64)
        if assignment.ndim != 1:
            raise SembError("assignment must be a flat index array")
        if assignment.min() < 0 or assignment.max() >= target_vertices:
            raise SembError("assignment index out of range for the target mesh")
        self.source_category = int(source_category)
        self.target_category = int(target_category)
        self.assignment = assignment
        self.assignment.flags.writeable = False


class KeypointSet:
    """Named landmarks, either on-mesh (vertex index) or in-image
    (row, col, visible)."""

    def __init__(self, landmarks):
        self.landmarks = dict(landmarks)

    def names(self):
        return sorted(self.landmarks)

    def __getitem__(self, name):
        return self.landmarks[name]

    def __len__(self):
        return len(self.landmarks)


def alignment_map(emb_source, emb_target, mode="neg_inner"):
    """Hard correspondence: for every source vertex, the most probable
    target vertex under the soft correspondence, ties to the lowest index."""
    if emb_source.dim != emb_target.dim:
        raise SembError("embedding dimensions do not match")
    P = correspondence(emb_target.expanded, emb_source.expanded, mode=mode,
                       direction=(f"mesh:{emb_source.category_id}",
                                  f"mesh:{emb_target.category_id}"))
    assignment = np.argmax(P.probs, axis=1)
    return VertexMap(emb_source.category_id, emb_target.category_id,
                     assignment, emb_target.num_vertices)


def gps_point(g, kappa=GPS_KAPPA):
    """Pointwise geodesic similarity exp(-g^2 / (2 kappa^2))."""
    if g < 0:
        raise SembError("geodesic distance must be nonnegative")
    return float(np.exp(-(g * g) / (2.0 * kappa * kappa)))


def _paired_distances(predicted, truth, geo):
    predicted = np.asarray(predicted, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if predicted.shape != truth.shape or predicted.ndim != 1 or len(predicted) == 0:
        raise SembError("predicted and truth must be equal-length nonempty index lists")
    if not geo.d_max_applied:
        raise SembError("geodesic matrix must be normalized for metric evaluation")
    return geo.values[predicted, truth]


def gps_set(predicted, truth, geo, kappa=GPS_KAPPA):
    """Mean pointwise geodesic similarity over paired vertices (unclamped)."""
    g = _paired_distances(predicted, truth, geo)
    return float(np.mean(np.exp(-(g * g) / (2.0 * kappa * kappa))))


def gerr(predicted, truth, geo):
    """Mean normalized geodesic distance between paired vertices."""
    return float(np.mean(_paired_distances(predicted, truth, geo)))


def ap_ar(per_instance_gps, thresholds=AP_THRESHOLDS,
          unmatched_predictions=0, missed_truths=0):
    """Threshold-swept average precision and recall over matched instances.

    An instance counts as correct at threshold t when its similarity score
    is >= t.  Precision divides by matched plus unmatched predictions,
    recall by matched plus missed ground truths; with exact one-to-one
    matching the two coincide.  Returns (AP, AR, per-threshold table).
    """
    values = np.asarray(per_instance_gps, dtype=np.float64)
    if values.ndim != 1 or len(values) == 0:
        raise SembError("need a nonempty list of per-instance scores")
    if (values < 0).any() or (values > 1).any():
        raise SembError("similarity scores must lie in [0, 1]")
    table = []
    precisions = []
    recalls = []
    for t in thresholds:
        correct = int(np.count_nonzero(values >= t))
        p = correct / (len(values) + unmatched_predictions)
        r = correct / (len(values) + missed_truths)
        table.append({"threshold": t, "correct": correct,
                      "precision": p, "recall": r})
        precisions.append(p)
        recalls.append(r)
    return float(np.mean(precisions)), float(np.mean(recalls)), table


def transfer_keypoints(source_field, source_keypoints, target_field,
                       mode="neg_inner"):
    """Transfer in-image landmarks by nearest embedding in the target mask.

    For every visible source landmark, picks the target-mask pixel whose
    embedding scores best against the source pixel embedding under the
    given similarity mode, ties to the lowest raster index.  Returns
    ``{name: (row, col)}`` for the visible landmarks.
    """
    if source_field.dim != target_field.dim:
        raise SembError("embedding dimensions do not match")
    target_pixels = target_field.masked_pixels
    if len(target_pixels) == 0:
        raise SembError("target mask is empty")
    target_emb = target_field.embeddings_at(target_pixels)

    predictions = {}
    for name in source_keypoints.names():
        entry = source_keypoints[name]
        r, c, visible = int(entry[0]), int(entry[1]), bool(entry[2])
        if not visible:
            continue
        if not source_field.mask[r, c]:
            raise SembError(f"keypoint {name!r} lies outside the source mask")
        query = source_field.grid[r, c][None, :]
        s = scores(target_emb, query, mode)[0]
        best = int(np.argmax(s))  # scores are "higher is more probable" in every mode
        predictions[name] = (int(target_pixels[best, 0]), int(target_pixels[best, 1]))
    return predictions


def pck_transfer(predicted, truth, box_h, box_w, alpha=0.1):
    """Fraction of visible landmarks within alpha * max(box_h, box_w) pixels.

    The threshold is boundary-inclusive.  ``predicted`` maps names to
    (row, col); ``truth`` maps names to (row, col, visible).
    """
    if box_h <= 0 or box_w <= 0:
        raise SembError("box dimensions must be positive")
    limit = alpha * max(box_h, box_w)
    total = 0
    correct = 0
    for name in truth.names():
        r, c, visible = truth[name]
        if not visible:
            continue
        total += 1
        if name not in predicted:
            continue
        pr, pc = predicted[name]
        err = np.hypot(pr - r, pc - c)
        if err <= limit:
            correct += 1
    if total == 0:
        raise SembError("no visible landmarks to evaluate")
    return correct / total
