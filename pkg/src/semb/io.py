"""Persistent file formats, configuration schema, and content-hash caches.

One format per fidelity need:

* binary matrix container for exact numeric arrays — magic ``SEMB``,
  version u16, dtype tag u8 (0 = float64, 1 = int32), rank u32, one u32
  per dimension, row-major little-endian payload;
* scene container — magic ``SSCN``, version u16, u32-length-prefixed JSON
  header, then the mask as u8 and the vertex grid as little-endian int32;
* canonical JSON for configs and reports — sorted keys, floats with 17
  significant digits so values round-trip through float64 exactly;
* CSV for vertex maps (one ``source,target`` line per source vertex).

All writes go through a temp-file-then-rename so cache entries are never
observed half-written.
"""

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path

import numpy as np

from .errors import ConfigError, SembError

MATRIX_MAGIC = b"SEMB"
SCENE_MAGIC = b"SSCN"
FORMAT_VERSION = 1
_DTYPE_TAGS = {0: np.dtype("<f8"), 1: np.dtype("<i4")}
_TAG_FOR_KIND = {"f": 0, "i": 1}


def _atomic_write(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def matrix_bytes(array):
    """Serialize an array to the binary matrix container."""
    array = np.asarray(array)
    if array.dtype.kind == "f":
        array = array.astype("<f8", copy=False)
    elif array.dtype.kind == "i":
        array = array.astype("<i4", copy=False)
    else:
        raise SembError(f"unsupported dtype {array.dtype}")
    tag = _TAG_FOR_KIND[array.dtype.kind]
    header = struct.pack("<4sHBI", MATRIX_MAGIC, FORMAT_VERSION, tag, array.ndim)
    dims = struct.pack(f"<{array.ndim}I", *array.shape)
    return header + dims + np.ascontiguousarray(array).tobytes()


def write_matrix(path, array):
    """Write an array to disk in the binary matrix container (atomic)."""
    _atomic_write(path, matrix_bytes(array))


def read_matrix(path):
    """Read an array from the binary matrix container, validating the header."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 11:
        raise SembError(f"matrix file {path} is truncated")
    magic, version, tag, rank = struct.unpack_from("<4sHBI", data, 0)
    if magic != MATRIX_MAGIC:
        raise SembError(f"bad magic in matrix file {path}")
    if version != FORMAT_VERSION:
        raise SembError(f"unsupported matrix file version {version}")
    if tag not in _DTYPE_TAGS:
        raise SembError(f"unknown dtype tag {tag}")
    offset = 11
    if len(data) < offset + 4 * rank:
        raise SembError(f"matrix file {path} is truncated")
    dims = struct.unpack_from(f"<{rank}I", data, offset)
    offset += 4 * rank
    dtype = _DTYPE_TAGS[tag]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    payload = data[offset:]
    if len(payload) != expected:
        raise SembError(
            f"matrix file {path}: payload has {len(payload)} bytes, expected {expected}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


def _format_float(x):
    if not np.isfinite(x):
        raise SembError(f"cannot serialize non-finite float {x!r}")
    return format(float(x), ".17g")


def dumps_canonical(obj):
    """Canonical JSON: sorted keys, 17-significant-digit floats, no whitespace
    variation.  Byte-identical for equal inputs."""
    out = []
    _write_json(obj, out)
    return "".join(out)


def _write_json(obj, out):
    if obj is None:
        out.append("null")
    elif obj is True:
        out.append("true")
    elif obj is False:
        out.append("false")
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        out.append(_format_float(obj))
    elif isinstance(obj, str):
        out.append(json.dumps(obj))
    elif isinstance(obj, dict):
        out.append("{")
        for i, key in enumerate(sorted(obj)):
            if not isinstance(key, str):
                raise SembError(f"JSON object keys must be strings, got {key!r}")
            if i:
                out.append(",")
            out.append(json.dumps(key))
            out.append(":")
            _write_json(obj[key], out)
        out.append("}")
    elif isinstance(obj, (list, tuple, np.ndarray)):
        out.append("[")
        for i, item in enumerate(obj):
            if i:
                out.append(",")
            _write_json(item, out)
        out.append("]")
    else:
        raise SembError(f"cannot serialize {type(obj).__name__} to JSON")


def write_json(path, obj):
    _atomic_write(path, (dumps_canonical(obj) + "\n").encode("utf-8"))


def read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def write_scene(path, scene):
    """Serialize a scene: JSON header, mask bytes, int32 vertex grid."""
    header = dumps_canonical({
        "category_id": scene.category_id,
        "rotation": [[float(x) for x in row] for row in scene.rotation],
        "resolution": [scene.resolution[0], scene.resolution[1]],
        "scene_id": scene.scene_id,
    }).encode("utf-8")
    blob = struct.pack("<4sHI", SCENE_MAGIC, FORMAT_VERSION, len(header))
    blob += header
    blob += scene.mask.astype(np.uint8).tobytes()
    blob += scene.gt_vertex.astype("<i4").tobytes()
    _atomic_write(path, blob)


def read_scene(path):
    from .synth import Scene

    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 10:
        raise SembError(f"scene file {path} is truncated")
    magic, version, header_len = struct.unpack_from("<4sHI", data, 0)
    if magic != SCENE_MAGIC:
        raise SembError(f"bad magic in scene file {path}")
    if version != FORMAT_VERSION:
        raise SembError(f"unsupported scene file version {version}")
    offset = 10
    header = json.loads(data[offset:offset + header_len].decode("utf-8"))
    offset += header_len
    H, W = header["resolution"]
    mask = np.frombuffer(data[offset:offset + H * W], dtype=np.uint8)
    mask = mask.reshape(H, W).astype(bool)
    offset += H * W
    gt = np.frombuffer(data[offset:offset + 4 * H * W], dtype="<i4")
    if gt.size != H * W:
        raise SembError(f"scene file {path} is truncated")
    gt = gt.reshape(H, W).astype(np.int64)
    return Scene(header["category_id"], np.array(header["rotation"]), (H, W),
                 mask, gt, scene_id=header["scene_id"])


def write_vertex_map_csv(path, assignment):
    lines = [f"{i},{int(t)}" for i, t in enumerate(assignment)]
    _atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


def read_vertex_map_csv(path):
    assignment = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise SembError(f"{path}: line {lineno + 1} is not 'source,target'")
            src, tgt = int(parts[0]), int(parts[1])
            if src != len(assignment):
                raise SembError(f"{path}: source indices must be 0..K-1 in order")
            assignment.append(tgt)
    if not assignment:
        raise SembError(f"{path}: empty vertex map")
    return np.array(assignment, dtype=np.int64)


def cache_dir():
    """Cache root: $SEMB_CACHE_DIR if set, else ~/.cache/semb."""
    env = os.environ.get("SEMB_CACHE_DIR")
    if env:
        return Path(env)
    return Path.home() / ".cache" / "semb"


def cached_basis(mesh, Q):
    """Spectral basis for a mesh, computed once per (content hash, Q)."""
    from .mesh import laplacian_and_mass
    from .spectral import SpectralBasis, spectral_basis

    key = f"{mesh.content_hash()}_q{Q}"
    u_path = cache_dir() / f"{key}_basis.semb"
    w_path = cache_dir() / f"{key}_eigenvalues.semb"
    if u_path.exists() and w_path.exists():
        U = read_matrix(u_path)
        w = read_matrix(w_path)
        if U.shape == (mesh.num_vertices, Q):
            return SpectralBasis(U, w, mesh_id=mesh.content_hash())
    L, mass = laplacian_and_mass(mesh)
    basis = spectral_basis(L, mass, Q, mesh_id=mesh.content_hash())
    write_matrix(u_path, basis.U)
    write_matrix(w_path, basis.eigenvalues)
    return basis


def cached_geodesics(mesh, normalized=True):
    """Geodesic matrix for a mesh, computed once per content hash."""
    from .mesh import GeodesicMatrix, geodesic_matrix, normalize_geodesics

    key = mesh.content_hash()
    path = cache_dir() / f"{key}_geodesics.semb"
    if path.exists():
        values = read_matrix(path)
        if values.shape == (mesh.num_vertices, mesh.num_vertices):
            geo = GeodesicMatrix(values, d_max_applied=False)
        else:
            geo = geodesic_matrix(mesh)
            write_matrix(path, geo.values)
    else:
        geo = geodesic_matrix(mesh)
        write_matrix(path, geo.values)
    return normalize_geodesics(geo) if normalized else geo


@dataclass
class SceneSpec:
    scene_id: str
    category_id: int
    rotation: list
    resolution: tuple
    annotations: int = 0


@dataclass
class ProblemConfig:
    """Validated configuration document for an alignment run."""

    meshes: list  # (path, category_id) pairs
    q: int
    d: int
    mode: str = "neg_inner"
    weights: "LossWeights" = None
    scenes: list = dataclass_field(default_factory=list)
    anchors: list = dataclass_field(default_factory=list)
    omega_bar: int = 128
    train: dict = dataclass_field(default_factory=dict)
    seed: int = 0
    ground_truth_maps: list = dataclass_field(default_factory=list)


def _require_keys(obj, allowed, required, where):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = sorted(set(obj) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    missing = sorted(set(required) - set(obj))
    if missing:
        raise ConfigError(f"{where}: missing required keys {missing}")


def _check_int(value, where, minimum=None):
    if not isinstance(value, int) or isinstance(value, bool):
        raise ConfigError(f"{where}: expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{where}: must be >= {minimum}, got {value}")
    return value


def _check_number(value, where):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    return float(value)


def parse_problem_config(doc):
    """Validate a raw config document (unknown keys rejected everywhere)."""
    from .losses import Anchor, LossWeights

    _require_keys(doc, allowed=(
        "meshes", "q", "d", "mode", "weights", "scenes", "anchors",
        "omega_bar", "train", "seed", "ground_truth_maps",
    ), required=("meshes", "q", "d"), where="config")

    meshes = []
    if not isinstance(doc["meshes"], list) or not doc["meshes"]:
        raise ConfigError("config.meshes: expected a nonempty list")
    for i, entry in enumerate(doc["meshes"]):
        _require_keys(entry, allowed=("path", "category_id"),
                      required=("path", "category_id"), where=f"config.meshes[{i}]")
        meshes.append((str(entry["path"]),
                       _check_int(entry["category_id"], f"config.meshes[{i}].category_id")))
    if len({cid for _, cid in meshes}) != len(meshes):
        raise ConfigError("config.meshes: category ids must be distinct")

    q = _check_int(doc["q"], "config.q", minimum=1)
    d = _check_int(doc["d"], "config.d", minimum=1)
    mode = doc.get("mode", "neg_inner")
    if mode not in ("neg_inner", "inner", "neg_sqdist"):
        raise ConfigError(f"config.mode: unknown mode {mode!r}")

    wdoc = doc.get("weights", {})
    _require_keys(wdoc, allowed=("lambda_m2m", "lambda_i2m", "i2m_variant", "i2m_k_factor"),
                  required=(), where="config.weights")
    weights = LossWeights(
        lambda_m2m=_check_number(wdoc.get("lambda_m2m", 1.0), "config.weights.lambda_m2m"),
        lambda_i2m=_check_number(wdoc.get("lambda_i2m", 1.0), "config.weights.lambda_i2m"),
        i2m_variant=wdoc.get("i2m_variant", "gt-class"),
        i2m_k_factor=bool(wdoc.get("i2m_k_factor", True)),
    )

    scenes = []
    for i, entry in enumerate(doc.get("scenes", [])):
        where = f"config.scenes[{i}]"
        _require_keys(entry, allowed=("scene_id", "category_id", "rotation",
                                      "resolution", "annotations"),
                      required=("scene_id", "category_id", "rotation", "resolution"),
                      where=where)
        rotation = entry["rotation"]
        if (not isinstance(rotation, list) or len(rotation) != 3
                or any(not isinstance(r, list) or len(r) != 3 for r in rotation)):
            raise ConfigError(f"{where}.rotation: expected a 3x3 matrix")
        resolution = entry["resolution"]
        if not isinstance(resolution, list) or len(resolution) != 2:
            raise ConfigError(f"{where}.resolution: expected [H, W]")
        scenes.append(SceneSpec(
            scene_id=str(entry["scene_id"]),
            category_id=_check_int(entry["category_id"], f"{where}.category_id"),
            rotation=rotation,
            resolution=(_check_int(resolution[0], f"{where}.resolution[0]", 8),
                        _check_int(resolution[1], f"{where}.resolution[1]", 8)),
            annotations=_check_int(entry.get("annotations", 0), f"{where}.annotations", 0),
        ))
    if len({s.scene_id for s in scenes}) != len(scenes):
        raise ConfigError("config.scenes: scene ids must be distinct")

    anchors = []
    for i, entry in enumerate(doc.get("anchors", [])):
        where = f"config.anchors[{i}]"
        _require_keys(entry, allowed=("source_category", "source_vertex",
                                      "target_category", "target_vertex"),
                      required=("source_category", "source_vertex",
                                "target_category", "target_vertex"), where=where)
        anchors.append(Anchor(
            source_category=_check_int(entry["source_category"], where),
            source_vertex=_check_int(entry["source_vertex"], where, 0),
            target_category=_check_int(entry["target_category"], where),
            target_vertex=_check_int(entry["target_vertex"], where, 0),
        ))

    tdoc = doc.get("train", {})
    _require_keys(tdoc, allowed=("steps", "learning_rate", "lr_drops", "optimizer",
                                 "beta1", "beta2", "epsilon"),
                  required=(), where="config.train")

    gt_maps = []
    for i, entry in enumerate(doc.get("ground_truth_maps", [])):
        where = f"config.ground_truth_maps[{i}]"
        _require_keys(entry, allowed=("source", "target", "path"),
                      required=("source", "target", "path"), where=where)
        gt_maps.append((_check_int(entry["source"], where),
                        _check_int(entry["target"], where), str(entry["path"])))

    return ProblemConfig(
        meshes=meshes, q=q, d=d, mode=mode, weights=weights, scenes=scenes,
        anchors=anchors,
        omega_bar=_check_int(doc.get("omega_bar", 128), "config.omega_bar", 1),
        train=dict(tdoc),
        seed=_check_int(doc.get("seed", 0), "config.seed"),
        ground_truth_maps=gt_maps,
    )


def build_problem(config, base_dir="."):
    """Materialize a :class:`~semb.problem.Problem` from a parsed config.

    Loads meshes, computes (or reads cached) bases and normalized
    geodesics, renders the configured scenes, and samples their annotation
    sets with config-derived seeds.  Parameters start at zero; the trainer
    initializes them.
    """
    from .embedding import CategoryEmbedding, PixelField
    from .mesh import load_mesh
    from .problem import Problem
    from .synth import render_scene, sample_annotations

    base = Path(base_dir)
    meshes = {}
    for path, cid in config.meshes:
        p = Path(path)
        if not p.is_absolute():
            p = base / p
        meshes[cid] = load_mesh(p, category_id=cid)

    geodesics = {}
    bases = {}
    embeddings = {}
    for cid in sorted(meshes):
        mesh = meshes[cid]
        if config.q >= mesh.num_vertices:
            raise ConfigError(
                f"config.q: needs q < K, got q={config.q}, K={mesh.num_vertices}"
            )
        bases[cid] = cached_basis(mesh, config.q)
        geodesics[cid] = cached_geodesics(mesh, normalized=True)
        embeddings[cid] = CategoryEmbedding(
            np.zeros((config.q, config.d)), bases[cid], category_id=cid)

    scenes = {}
    fields = {}
    annotations = []
    for idx, spec in enumerate(config.scenes):
        if spec.category_id not in meshes:
            raise ConfigError(f"scene {spec.scene_id!r} references unknown category")
        scene = render_scene(meshes[spec.category_id], np.array(spec.rotation),
                             spec.resolution, scene_id=spec.scene_id)
        scenes[spec.scene_id] = scene
        fields[spec.scene_id] = PixelField(
            np.zeros(scene.resolution + (config.d,)), scene.mask,
            scene_id=spec.scene_id, category_id=spec.category_id)
        if spec.annotations:
            annotations.extend(
                sample_annotations(scene, spec.annotations, seed=(config.seed, 3, idx)))

    return Problem(meshes=meshes, geodesics=geodesics, bases=bases,
                   embeddings=embeddings, scenes=scenes, fields=fields,
                   annotations=annotations, anchors=config.anchors,
                   mode=config.mode, omega_bar=config.omega_bar)


def embedding_colors(expanded_list, seed=0):
    """Map embeddings to RGB through one shared 3-component projection.

    The projection is fit on the concatenation of all expanded embeddings
    (principal directions of the centered stack, deterministic sign
    convention), so corresponding vertices across meshes land on similar
    colors.  Returns one K x 3 uint8 array per input.
    """
    if not expanded_list:
        raise SembError("no embeddings to project")
    dim = expanded_list[0].shape[1]
    if dim < 3:
        raise SembError(f"color projection needs embedding dimension >= 3, got {dim}")
    stacked = np.vstack(expanded_list)
    centered = stacked - stacked.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    axes = vt[:3]
    # deterministic sign: largest-magnitude loading of each axis is positive
    for i in range(3):
        j = int(np.argmax(np.abs(axes[i])))
        if axes[i, j] < 0:
            axes[i] *= -1.0
    projected = centered @ axes.T
    lo = projected.min(axis=0)
    span = projected.max(axis=0) - lo
    span[span == 0] = 1.0
    rgb = np.clip(np.round((projected - lo) / span * 255.0), 0, 255).astype(np.uint8)
    out = []
    offset = 0
    for emb in expanded_list:
        out.append(rgb[offset:offset + len(emb)])
        offset += len(emb)
    return out
