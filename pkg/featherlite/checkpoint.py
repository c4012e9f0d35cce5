"""Checkpoint files: a JSON manifest plus a raw little-endian float32 weight blob.

A checkpoint named ``best_model1`` is the pair ``best_model1.manifest.json`` and
``best_model1.weights.bin``. The blob holds every parameter array in manifest
node order with no header, so saving a loaded checkpoint reproduces both files
byte for byte. Optimizer state, when present, goes to ``<name>.optimizer.bin``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from featherlite import __version__
from featherlite.layers import LAYER_TYPES
from featherlite.netgraph import ModelGraph, Node, count_params
from featherlite.tensor import ConfigurationError, ShapeError, check_finite
from featherlite.utils import ensure_dir, write_json

logger = logging.getLogger(__name__)

FORMAT_TAG = "featherlite-checkpoint"
FORMAT_VERSION = 1
BLOB_DTYPE = np.dtype("<f4")
MANIFEST_SUFFIX = ".manifest.json"
WEIGHTS_SUFFIX = ".weights.bin"
OPTIMIZER_SUFFIX = ".optimizer.bin"


class CheckpointError(Exception):
    """Base class for checkpoint read/write failures."""


class ManifestError(CheckpointError):
    """The manifest is missing, unparsable, or structurally invalid."""


class CheckpointShapeError(CheckpointError):
    """Declared shapes disagree with the rebuilt graph or the blob size."""


class TruncatedWeightsError(CheckpointError):
    """The weight blob ends before every declared value has been read."""


@dataclass
class Checkpoint:
    """A loaded checkpoint: the graph, selection metadata, optional optimizer state."""

    graph: ModelGraph
    metadata: dict[str, Any] = field(default_factory=dict)
    optimizer_state: dict[str, Any] | None = None


def checkpoint_paths(path: Path | str) -> tuple[Path, Path]:
    """Return ``(manifest, weights)`` paths for a checkpoint stem or manifest path."""
    path = Path(path)
    name = path.name
    for suffix in (MANIFEST_SUFFIX, WEIGHTS_SUFFIX):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
            break
    stem = path.with_name(name)
    return stem.with_name(name + MANIFEST_SUFFIX), stem.with_name(name + WEIGHTS_SUFFIX)


def checkpoint_exists(path: Path | str) -> bool:
    manifest, weights = checkpoint_paths(path)
    return manifest.exists() and weights.exists()


def _graph_manifest(graph: ModelGraph) -> dict[str, Any]:
    nodes = []
    for node in graph.nodes:
        nodes.append(
            {
                "name": node.name,
                "kind": node.layer.kind,
                "inputs": list(node.inputs),
                "config": node.layer.config(),
                "frozen": bool(node.layer.frozen),
                "params": [
                    {"name": key, "shape": list(value.shape)}
                    for key, value in node.layer.parameters().items()
                ],
            }
        )
    return {
        "name": graph.name,
        "inputs": [{"name": key, "shape": list(shape)} for key, shape in graph.inputs.items()],
        "outputs": [{"name": key, "node": ref} for key, ref in graph.outputs.items()],
        "nodes": nodes,
    }


def _flatten_optimizer_state(state: dict[str, Any]) -> tuple[dict[str, Any], list[np.ndarray]]:
    arrays: list[np.ndarray] = []
    entries: list[dict[str, Any]] = []
    for slot, per_node in state.get("slots", {}).items():
        for node_name, per_param in per_node.items():
            for param, value in per_param.items():
                entries.append(
                    {"slot": slot, "node": node_name, "param": param, "shape": list(value.shape)}
                )
                arrays.append(value)
    section = {
        "kind": state["kind"],
        "hyper": state.get("hyper", {}),
        "step": int(state.get("step", 0)),
        "arrays": entries,
    }
    return section, arrays


def _write_blob(path: Path, arrays: list[np.ndarray]) -> int:
    ensure_dir(path.parent)
    written = 0
    with open(path, "wb") as f:
        for value in arrays:
            data = np.ascontiguousarray(value, dtype=BLOB_DTYPE).tobytes()
            f.write(data)
            written += len(data)
    return written


def save_checkpoint(
    graph: ModelGraph,
    path: Path | str,
    *,
    metadata: dict[str, Any] | None = None,
    optimizer_state: dict[str, Any] | None = None,
) -> Path:
    """Write ``graph`` as a manifest/blob pair.

    Args:
        graph: Model to save. Parameters are stored as float32.
        path: Checkpoint stem, or the manifest path.
        metadata: Selection details (monitor key, value, epoch) recorded verbatim.
        optimizer_state: ``Optimizer.state_dict()`` output to store alongside.

    Returns:
        Path of the written manifest.

    Raises:
        NonFiniteError: A parameter holds NaN or Inf; nothing is written.
    """
    manifest_path, weights_path = checkpoint_paths(path)
    weights = [check_finite(value, f"{node}/{key}") for node, key, value in graph.iter_parameters()]
    blob_bytes = _write_blob(weights_path, weights)
    manifest: dict[str, Any] = {
        "format": FORMAT_TAG,
        "format_version": FORMAT_VERSION,
        "featherlite_version": __version__,
        "dtype": BLOB_DTYPE.str,
        "weights_file": weights_path.name,
        "weights_bytes": blob_bytes,
        "param_count": count_params(graph).count,
        "graph": _graph_manifest(graph),
        "metadata": metadata or {},
    }
    if optimizer_state is not None:
        section, arrays = _flatten_optimizer_state(optimizer_state)
        optimizer_path = weights_path.with_name(weights_path.name[: -len(WEIGHTS_SUFFIX)] + OPTIMIZER_SUFFIX)
        section["file"] = optimizer_path.name
        section["bytes"] = _write_blob(optimizer_path, arrays)
        manifest["optimizer"] = section
    write_json(manifest_path, manifest)
    logger.debug("Saved checkpoint %s (%s parameters)", manifest_path, manifest["param_count"])
    return manifest_path


def _read_manifest(manifest_path: Path) -> dict[str, Any]:
    try:
        with open(manifest_path, encoding="utf-8") as f:
            manifest = json.load(f)
    except FileNotFoundError as exc:
        raise ManifestError(f"manifest not found: {manifest_path}") from exc
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ManifestError(f"manifest {manifest_path} is not valid JSON: {exc}") from exc
    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT_TAG:
        raise ManifestError(f"{manifest_path} is not a {FORMAT_TAG} manifest")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ManifestError(
            f"{manifest_path}: unsupported format version {manifest.get('format_version')}"
        )
    if manifest.get("dtype") != BLOB_DTYPE.str:
        raise ManifestError(f"{manifest_path}: unsupported weight dtype {manifest.get('dtype')!r}")
    for key in ("graph", "weights_file"):
        if key not in manifest:
            raise ManifestError(f"{manifest_path}: missing '{key}'")
    return manifest


def _rebuild_graph(spec: dict[str, Any], manifest_path: Path) -> tuple[ModelGraph, list[tuple[int, ...]]]:
    try:
        inputs = {entry["name"]: tuple(entry["shape"]) for entry in spec["inputs"]}
        outputs = {entry["name"]: entry["node"] for entry in spec["outputs"]}
        nodes = []
        declared: list[tuple[int, ...]] = []
        for entry in spec["nodes"]:
            kind = entry["kind"]
            if kind not in LAYER_TYPES:
                raise ManifestError(f"{manifest_path}: unknown layer kind '{kind}'")
            layer = LAYER_TYPES[kind].from_config(entry["name"], entry.get("config", {}))
            layer.frozen = bool(entry.get("frozen", False))
            built = layer.parameters()
            params = entry.get("params", [])
            if [p["name"] for p in params] != list(built):
                raise CheckpointShapeError(
                    f"{manifest_path}: node '{entry['name']}' declares parameters "
                    f"{[p['name'] for p in params]}, layer has {list(built)}"
                )
            for p in params:
                shape = tuple(int(d) for d in p["shape"])
                if shape != built[p["name"]].shape:
                    raise CheckpointShapeError(
                        f"{manifest_path}: {entry['name']}.{p['name']} declared {shape}, "
                        f"config implies {built[p['name']].shape}"
                    )
                declared.append(shape)
            nodes.append(Node(entry["name"], layer, tuple(entry["inputs"])))
        graph = ModelGraph(spec["name"], inputs, nodes, outputs)
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"{manifest_path}: malformed graph section ({exc!r})") from exc
    except (ShapeError, ConfigurationError) as exc:
        raise CheckpointShapeError(f"{manifest_path}: {exc}") from exc
    return graph, declared


def _read_blob(path: Path, shapes: list[tuple[int, ...]]) -> list[np.ndarray]:
    try:
        raw = path.read_bytes()
    except FileNotFoundError as exc:
        raise TruncatedWeightsError(f"weight blob missing: {path}") from exc
    expected = sum(int(np.prod(shape)) for shape in shapes) * BLOB_DTYPE.itemsize
    if len(raw) < expected:
        raise TruncatedWeightsError(f"{path}: {len(raw)} bytes, expected {expected}")
    if len(raw) > expected:
        raise CheckpointShapeError(f"{path}: {len(raw)} bytes, manifest declares {expected}")
    arrays = []
    offset = 0
    for shape in shapes:
        count = int(np.prod(shape))
        values = np.frombuffer(raw, dtype=BLOB_DTYPE, count=count, offset=offset)
        arrays.append(values.astype(np.float32).reshape(shape))
        offset += count * BLOB_DTYPE.itemsize
    return arrays


def _read_optimizer(manifest_path: Path, section: dict[str, Any]) -> dict[str, Any]:
    try:
        entries = section["arrays"]
        shapes = [tuple(int(d) for d in e["shape"]) for e in entries]
        arrays = _read_blob(manifest_path.with_name(section["file"]), shapes)
        slots: dict[str, dict[str, dict[str, np.ndarray]]] = {}
        for entry, value in zip(entries, arrays, strict=True):
            slots.setdefault(entry["slot"], {}).setdefault(entry["node"], {})[entry["param"]] = value
        return {
            "kind": section["kind"],
            "hyper": section.get("hyper", {}),
            "step": int(section.get("step", 0)),
            "slots": slots,
        }
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"{manifest_path}: malformed optimizer section ({exc!r})") from exc


def read_checkpoint(path: Path | str) -> Checkpoint:
    """Load a checkpoint with its metadata and optimizer state.

    Raises:
        ManifestError: Missing, unparsable, or malformed manifest.
        CheckpointShapeError: Declared shapes disagree with the layer configs
            or with the blob length.
        TruncatedWeightsError: Blob shorter than declared. No graph is returned.
    """
    manifest_path, _ = checkpoint_paths(path)
    manifest = _read_manifest(manifest_path)
    graph, shapes = _rebuild_graph(manifest["graph"], manifest_path)
    weights = _read_blob(manifest_path.with_name(manifest["weights_file"]), shapes)
    graph.set_weights(weights)
    optimizer_state = None
    if "optimizer" in manifest:
        optimizer_state = _read_optimizer(manifest_path, manifest["optimizer"])
    logger.debug("Loaded checkpoint %s (%s)", manifest_path, count_params(graph))
    return Checkpoint(graph, dict(manifest.get("metadata", {})), optimizer_state)


def load_checkpoint(path: Path | str) -> ModelGraph:
    """Load only the graph of a checkpoint. See :func:`read_checkpoint`."""
    return read_checkpoint(path).graph


def checkpoint_size_bytes(path: Path | str) -> int:
    """On-disk size of the manifest plus weight blob."""
    manifest, weights = checkpoint_paths(path)
    return manifest.stat().st_size + weights.stat().st_size
