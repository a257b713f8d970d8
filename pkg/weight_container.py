"""
S2MW binary container for weights, templates and dataset samples.

Layout (all integers little-endian):
    b"S2MW" | u32 version | u32 manifest length | manifest (UTF-8 JSON) | payload

The manifest holds {"kind", "metadata", "tensors": [{name, shape, dtype,
offset, nbytes}]}; offsets are byte offsets into the payload, tensors laid out
in manifest order. Model weights are stored as f32 (trained in f64, quantized
on save); templates and samples may carry f64 and i32 tensors.
"""

from __future__ import annotations

import json
import logging
import os
import struct
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from camera_geometry import CameraRig, CameraView
from hand_model import (
    HandTemplate,
    KinematicTree,
    build_default_template,
    decomposition_from_assignment,
)
from hand_synthesis import SyntheticSample
from mgfp_fusion import MGFPModel, init_mgfp
from skeleton2mesh import PEConfig, Skeleton2MeshModel, init_s2m_model

logger = logging.getLogger("mlphand.app")
error_logger = logging.getLogger("mlphand.errors")

MAGIC = b"S2MW"
FORMAT_VERSION = 1
DATASET_MANIFEST = "manifest.json"
DATASET_FORMAT = "mlphand-dataset"

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "i32": np.dtype("<i4")}


class WeightLoadError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def write_container(
    path: str,
    kind: str,
    tensors: Sequence[Tuple[str, np.ndarray, str]],
    metadata: Optional[Dict[str, object]] = None,
) -> str:
    """Serialize (name, array, dtype code) triples; written to a temp file and renamed."""
    entries = []
    chunks: List[bytes] = []
    offset = 0
    for name, array, code in tensors:
        if code not in _DTYPES:
            raise ValueError(f"unsupported tensor dtype '{code}' for {name}")
        data = np.ascontiguousarray(np.asarray(array).astype(_DTYPES[code])).tobytes()
        entries.append(
            {"name": name, "shape": list(np.shape(array)), "dtype": code, "offset": offset, "nbytes": len(data)}
        )
        chunks.append(data)
        offset += len(data)

    manifest = json.dumps(
        {"kind": kind, "metadata": metadata or {}, "tensors": entries}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    temp_path = f"{path}.tmp"
    with open(temp_path, "wb") as handle:
        handle.write(MAGIC)
        handle.write(struct.pack("<II", FORMAT_VERSION, len(manifest)))
        handle.write(manifest)
        for chunk in chunks:
            handle.write(chunk)
    os.replace(temp_path, path)
    return path


def read_container(path: str) -> Tuple[str, Dict[str, object], Dict[str, np.ndarray]]:
    """(kind, metadata, name → array); every structural defect raises WeightLoadError."""
    try:
        with open(path, "rb") as handle:
            blob = handle.read()
    except OSError as exc:
        raise WeightLoadError("path", f"cannot read {path}: {exc}") from exc

    if blob[:4] != MAGIC:
        raise WeightLoadError("magic", f"expected {MAGIC!r}, found {blob[:4]!r}")
    if len(blob) < 12:
        raise WeightLoadError("version", "header truncated")
    version, manifest_length = struct.unpack("<II", blob[4:12])
    if version != FORMAT_VERSION:
        raise WeightLoadError("version", f"unsupported format version {version}")
    manifest_end = 12 + manifest_length
    if manifest_end > len(blob):
        raise WeightLoadError("manifest", "manifest extends past end of file")
    try:
        manifest = json.loads(blob[12:manifest_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightLoadError("manifest", f"unreadable manifest: {exc}") from exc

    payload = memoryview(blob)[manifest_end:]
    tensors: Dict[str, np.ndarray] = {}
    previous_end = 0
    for entry in manifest.get("tensors", []):
        name = entry.get("name", "?")
        code = entry.get("dtype")
        if code not in _DTYPES:
            raise WeightLoadError(name, f"unsupported dtype {code!r}")
        shape = tuple(int(n) for n in entry["shape"])
        offset = int(entry["offset"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * _DTYPES[code].itemsize
        if offset < previous_end:
            raise WeightLoadError(name, "tensor overlaps the previous tensor")
        if offset + nbytes > len(payload):
            raise WeightLoadError(name, f"tensor ends at byte {offset + nbytes}, payload has {len(payload)}")
        array = np.frombuffer(payload[offset:offset + nbytes], dtype=_DTYPES[code]).reshape(shape)
        tensors[name] = array.astype(np.float64) if code != "i32" else array.astype(np.int64)
        previous_end = offset + nbytes
    return manifest.get("kind", ""), manifest.get("metadata", {}), tensors


def _spec_tensor(model: Skeleton2MeshModel) -> Tuple[str, np.ndarray, str]:
    return ("spec.row_vertices", model.spec.row_vertices, "i32")


def save_weights(model, path: str) -> str:
    """Stage-1 or stage-2 model → S2MW file (parameters quantized to f32)."""
    locked = model.locked if isinstance(model, MGFPModel) else model
    tensors = [(name, array, "f32") for name, array in locked.parameters().items()]
    if isinstance(model, MGFPModel):
        tensors += [(name, array, "f32") for name, array in model.parameters().items()]
    tensors.append(_spec_tensor(locked))
    write_container(path, model.metadata()["kind"], tensors, model.metadata())
    logger.info(f"Saved {model.metadata()['kind']} weights to {path}")
    return path


def _require(metadata: Dict[str, object], key: str, expected) -> None:
    if expected is not None and metadata.get(key) != expected:
        raise WeightLoadError(key, f"file has {key}={metadata.get(key)!r}, requested {expected!r}")


def _assign(named: Dict[str, np.ndarray], tensors: Dict[str, np.ndarray]) -> None:
    for name, target in named.items():
        if name not in tensors:
            raise WeightLoadError(name, "tensor missing from file")
        if tensors[name].shape != target.shape:
            raise WeightLoadError(name, f"shape {tensors[name].shape} != expected {target.shape}")
        target[...] = tensors[name]


def load_weights(
    path: str,
    *,
    kind: Optional[str] = None,
    depth: Optional[int] = None,
    n_views: Optional[int] = None,
    channels: Optional[int] = None,
):
    """
    Rebuild the model described by the manifest and fill its tensors.

    Requested architecture fields that disagree with the manifest raise
    WeightLoadError naming the field.
    """
    file_kind, metadata, tensors = read_container(path)
    if file_kind not in {"s2m", "mgfp"}:
        raise WeightLoadError("kind", f"{path} holds '{file_kind}', not model weights")
    _require({"kind": file_kind}, "kind", kind)
    _require(metadata, "depth", depth)
    if file_kind == "mgfp":
        _require(metadata, "n_views", n_views)
        _require(metadata, "channels", channels)

    try:
        tree = KinematicTree(
            parents=tuple(metadata["parents"]),
            bone_order=tuple(tuple(pair) for pair in metadata["bone_order"]),
        )
        counts = [int(c) for c in metadata["per_bone_counts"]]
        rows = tensors["spec.row_vertices"]
        offsets = np.concatenate([[0], np.cumsum(counts)])
        spec = decomposition_from_assignment(
            [rows[offsets[k]:offsets[k + 1]] for k in range(len(counts))], int(metadata["vertex_count"])
        )
        pe_meta = metadata["pe"]
        pe = PEConfig(
            L_bone=int(pe_meta["L_bone"]),
            L_order=int(pe_meta["L_order"]),
            pre_scale=float(metadata["pre_scale"]),
            enabled=bool(pe_meta["enabled"]),
        )
        locked = init_s2m_model(
            spec,
            tree,
            depth=int(metadata["depth"]),
            hidden=int(metadata["hidden"]),
            pe=pe,
            use_gsd=bool(metadata["use_gsd"]),
        )
    except KeyError as exc:
        raise WeightLoadError(str(exc.args[0]), "missing from manifest") from exc
    except ValueError as exc:
        if isinstance(exc, WeightLoadError):
            raise
        raise WeightLoadError("manifest", str(exc)) from exc

    _assign(locked.parameters(), tensors)
    if file_kind == "s2m":
        return locked
    model = init_mgfp(locked, int(metadata["n_views"]), int(metadata["channels"]))
    _assign(model.parameters(), tensors)
    return model


def save_template(template: HandTemplate, path: str) -> str:
    return write_container(
        path,
        "template",
        [
            ("rest_skeleton", template.rest_skeleton, "f64"),
            ("vertices", template.vertices, "f64"),
            ("faces", template.faces, "i32"),
            ("skin_weights", template.skin_weights, "f64"),
        ],
        {"name": template.name, "vertex_count": template.vertex_count},
    )


def load_template(path: str) -> HandTemplate:
    kind, metadata, tensors = read_container(path)
    if kind != "template":
        raise WeightLoadError("kind", f"{path} holds '{kind}', not a template")
    try:
        return HandTemplate(
            rest_skeleton=tensors["rest_skeleton"],
            vertices=tensors["vertices"],
            faces=tensors["faces"],
            skin_weights=tensors["skin_weights"],
            name=str(metadata.get("name", os.path.basename(path))),
        )
    except KeyError as exc:
        raise WeightLoadError(str(exc.args[0]), "missing from template file") from exc


def resolve_template(source: str = "builtin", path: str = "") -> HandTemplate:
    if path:
        return load_template(path)
    if source in {"", "builtin"}:
        return build_default_template()
    return load_template(source)


def save_sample(sample: SyntheticSample, path: str) -> str:
    tensors = [("skeleton", sample.skeleton, "f64"), ("mesh", sample.mesh, "f64")]
    metadata: Dict[str, object] = {"index": sample.index, "seed": sample.seed, "heatmap_size": sample.heatmap_size}
    if sample.rendered:
        tensors += [
            ("K", np.stack([view.K for view in sample.rig.views]), "f64"),
            ("T", np.stack([view.T for view in sample.rig.views]), "f64"),
            ("projections", sample.projections, "f64"),
            ("heatmaps", sample.heatmaps, "f32"),
            ("feature_anchors", sample.feature_anchors, "f64"),
            ("feature_amplitudes", sample.feature_amplitudes, "f64"),
        ]
        metadata["image_sizes"] = [list(view.image_size) for view in sample.rig.views]
    return write_container(path, "sample", tensors, metadata)


def load_sample(path: str) -> SyntheticSample:
    kind, metadata, tensors = read_container(path)
    if kind != "sample":
        raise WeightLoadError("kind", f"{path} holds '{kind}', not a dataset sample")
    sample = SyntheticSample(
        index=int(metadata["index"]),
        seed=int(metadata["seed"]),
        skeleton=tensors["skeleton"],
        mesh=tensors["mesh"],
        heatmap_size=int(metadata["heatmap_size"]),
    )
    if "heatmaps" in tensors:
        sizes = metadata["image_sizes"]
        sample.rig = CameraRig(
            [CameraView(K=K, T=T, image_size=tuple(size)) for K, T, size in zip(tensors["K"], tensors["T"], sizes)]
        )
        sample.projections = tensors["projections"]
        sample.heatmaps = tensors["heatmaps"]
        sample.feature_anchors = tensors["feature_anchors"]
        sample.feature_amplitudes = tensors["feature_amplitudes"]
    return sample


def sample_filename(index: int) -> str:
    return f"sample_{index:06d}.s2mw"


def write_dataset(
    directory: str,
    samples: Sequence[SyntheticSample],
    *,
    seed: int,
    config_hash: str,
    config: Optional[Dict[str, object]] = None,
) -> str:
    """One container per sample, then manifest.json written last via rename."""
    os.makedirs(directory, exist_ok=True)
    entries = []
    for sample in samples:
        name = sample_filename(sample.index)
        save_sample(sample, os.path.join(directory, name))
        entries.append({"index": sample.index, "file": name})
    manifest = {
        "format": DATASET_FORMAT,
        "version": FORMAT_VERSION,
        "seed": seed,
        "count": len(entries),
        "rendered": bool(samples and samples[0].rendered),
        "config_hash": config_hash,
        "config": config or {},
        "samples": entries,
    }
    path = os.path.join(directory, DATASET_MANIFEST)
    temp_path = f"{path}.tmp"
    with open(temp_path, "w", encoding="utf-8") as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True)
        handle.write("\n")
    os.replace(temp_path, path)
    logger.info(f"Wrote dataset of {len(entries)} samples to {directory}")
    return path


def read_dataset_manifest(directory: str) -> Dict[str, object]:
    path = os.path.join(directory, DATASET_MANIFEST)
    try:
        with open(path, "r", encoding="utf-8") as handle:
            manifest = json.load(handle)
    except (OSError, json.JSONDecodeError) as exc:
        raise WeightLoadError("manifest", f"cannot read dataset manifest {path}: {exc}") from exc
    if manifest.get("format") != DATASET_FORMAT:
        raise WeightLoadError("format", f"{path} is not a dataset manifest")
    return manifest


def load_dataset(directory: str, limit: Optional[int] = None) -> List[SyntheticSample]:
    manifest = read_dataset_manifest(directory)
    entries = manifest["samples"][:limit] if limit else manifest["samples"]
    return [load_sample(os.path.join(directory, entry["file"])) for entry in entries]
