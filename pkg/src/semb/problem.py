"""Bundles everything one training/evaluation run operates on.

A problem owns the meshes with their normalized geodesics and spectral
bases, one compressed embedding per category, one pixel field per rendered
scene, and the supervision (pixel annotations and anchor vertex pairs).
All losses read from this container; the trainer owns its parameters.
"""

import numpy as np

from .errors import SembError


class Problem:
    """Immutable structure, mutable parameters (coefficients and pixel grids)."""

    def __init__(self, meshes, geodesics, bases, embeddings, scenes=None,
                 fields=None, annotations=(), anchors=(), mode="neg_inner",
                 omega_bar=128):
        self.meshes = dict(meshes)
        self.geodesics = dict(geodesics)
        self.bases = dict(bases)
        self.embeddings = dict(embeddings)
        self.scenes = dict(scenes or {})
        self.fields = dict(fields or {})
        self.annotations = list(annotations)
        self.anchors = list(anchors)
        self.mode = mode
        self.omega_bar = int(omega_bar)
        self._validate()

    def _validate(self):
        cats = sorted(self.embeddings)
        if not cats:
            raise SembError("problem has no categories")
        dims = {self.embeddings[m].dim for m in cats}
        if len(dims) != 1:
            raise SembError(f"embedding dimension must be shared, got {sorted(dims)}")
        for m in cats:
            if m not in self.meshes or m not in self.geodesics or m not in self.bases:
                raise SembError(f"category {m} is missing a mesh, geodesics, or basis")
            if not self.geodesics[m].d_max_applied:
                raise SembError(f"geodesics for category {m} are not normalized")
        for sid, field in self.fields.items():
            if field.category_id not in self.embeddings:
                raise SembError(f"scene {sid!r} references unknown category")
            if field.dim != self.embeddings[field.category_id].dim:
                raise SembError(f"scene {sid!r} pixel dimension mismatch")
        for ann in self.annotations:
            if ann.scene_id not in self.fields:
                raise SembError(f"annotation references unknown scene {ann.scene_id!r}")
        for anc in self.anchors:
            if anc.source_category not in self.embeddings \
                    or anc.target_category not in self.embeddings:
                raise SembError("anchor references unknown category")
        if self.omega_bar < 1:
            raise SembError("omega_bar must be >= 1")

    @property
    def dim(self):
        return next(iter(self.embeddings.values())).dim

    def parameters(self):
        """Snapshot of every learnable block, keyed like loss gradients."""
        params = {}
        for m in sorted(self.embeddings):
            params[f"ehat:{m}"] = self.embeddings[m].ehat.copy()
        for sid in sorted(self.fields):
            params[f"field:{sid}"] = self.fields[sid].grid.copy()
        return params

    def set_parameters(self, params):
        """Write parameter blocks back, refreshing expanded-embedding caches."""
        for key, value in params.items():
            kind, _, ident = key.partition(":")
            if kind == "ehat":
                self.embeddings[int(ident)].ehat = value
            elif kind == "field":
                field = self.fields[ident]
                if value.shape != field.grid.shape:
                    raise SembError(f"grid shape mismatch for {key!r}")
                field.grid = np.asarray(value, dtype=np.float64).copy()
            else:
                raise SembError(f"unknown parameter block {key!r}")

    def initialize(self, seed, sigma=0.1):
        """Seeded random initialization of all learnable blocks (i.i.d. normal)."""
        for m in sorted(self.embeddings):
            emb = self.embeddings[m]
            rng = np.random.default_rng((int(seed), 0, int(m)))
            emb.ehat = sigma * rng.standard_normal((emb.basis.num_modes, emb.dim))
        for idx, sid in enumerate(sorted(self.fields)):
            field = self.fields[sid]
            rng = np.random.default_rng((int(seed), 1, idx))
            field.grid = sigma * rng.standard_normal(field.grid.shape)
