"""
Instance documents: a JSON file holding one game and its communication graph.

Layout:
    {
      "schema_version": "1.0",
      "kind": "cournot" | "quadratic",
      "cournot": {"params": {...}, "data": {...}},          # kind == "cournot"
      "quadratic": {"M", "q", "dims", "coupling_blocks",     # kind == "quadratic"
                    "coupling_offsets", "lower", "upper", "beta", "eta"},
      "graph": {"n_agents": N, "edges": [[i, j, w], ...]},   # 0-based
      "provenance": {...}
    }

Infinite box bounds are stored as null.
"""

import json
from pathlib import Path

import numpy as np

from config import Config
from gne import cournot
from gne import graph as graphs
from gne.errors import ValidationError
from gne.model import quadratic_game
from utils.build_info import build_info
from utils.io_utils import atomic_write_json, sha256_text
from utils.versioning import is_compatible

KINDS = ("cournot", "quadratic")


def _bounds_to_json(values):
    if values is None:
        return None
    return [None if not np.isfinite(v) else float(v) for v in np.asarray(values, dtype=float)]


def _bounds_from_json(values, fill):
    if values is None:
        return None
    return np.array([fill if v is None else float(v) for v in values], dtype=float)


def _optional_float(value):
    if value is None or not np.isfinite(value):
        return None
    return float(value)


def graph_document(graph):
    return {"n_agents": graph.n_agents, "edges": [list(e) for e in graph.edges()]}


def game_document(game):
    """Serializable description of a game built by cournot.generate or quadratic_game."""
    if game.kind == "cournot":
        data = game.metadata["cournot"]
        return {"kind": "cournot", "cournot": {"params": data.params, "data": data.to_dict()}}
    if game.affine is None:
        raise ValidationError(f"Games of kind '{game.kind}' cannot be serialized.")
    M, q = game.affine
    return {
        "kind": "quadratic",
        "quadratic": {
            "M": np.asarray(M).tolist(),
            "q": np.asarray(q).tolist(),
            "dims": game.dims,
            "coupling_blocks": [np.asarray(a.coupling_block).tolist() for a in game.agents],
            "coupling_offsets": [np.asarray(a.coupling_offset).tolist() for a in game.agents],
            "lower": _bounds_to_json(game.metadata.get("lower")),
            "upper": _bounds_to_json(game.metadata.get("upper")),
            "beta": _optional_float(game.constants.beta) if game.constants.source == "declared" else None,
            "eta": game.constants.eta if game.constants.source == "declared" else None,
        },
    }


def instance_document(game, graph):
    doc = {"schema_version": Config.INSTANCE_SCHEMA_VERSION}
    doc.update(game_document(game))
    doc["graph"] = graph_document(graph)
    doc["provenance"] = build_info()
    return doc


def instance_hash(doc):
    """SHA-256 of the canonical document without its provenance block."""
    body = {k: v for k, v in doc.items() if k != "provenance"}
    return sha256_text(json.dumps(body, sort_keys=True, separators=(",", ":")))


def save_instance(game, graph, path):
    """
    Write the instance document.

    Returns:
        tuple[Path, str]: Written path and instance hash

    Raises:
        OSError: If the path is not writable
    """
    doc = instance_document(game, graph)
    return atomic_write_json(path, doc), instance_hash(doc)


def read_document(path):
    """
    Read and version-check an instance document.

    Raises:
        ValidationError: Unreadable file, unknown kind, or incompatible schema version
    """
    try:
        with open(path, 'r') as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ValidationError(f"Could not read instance file {path}: {e}")
    if not isinstance(doc, dict):
        raise ValidationError(f"Instance file {path} does not hold a JSON object")
    version = doc.get("schema_version")
    if not is_compatible(version, Config.INSTANCE_SCHEMA_VERSION):
        raise ValidationError(
            f"Instance schema {version!r} is not readable by this build "
            f"(supports {Config.INSTANCE_SCHEMA_VERSION})"
        )
    if doc.get("kind") not in KINDS:
        raise ValidationError(f"Unknown instance kind {doc.get('kind')!r}")
    if "graph" not in doc:
        raise ValidationError("Instance document has no graph section")
    return doc


def game_from_document(doc):
    if doc["kind"] == "cournot":
        section = doc["cournot"]
        params = section.get("params") or {}
        data = cournot.CournotData.from_dict(section["data"], params=params)
        return cournot.build_game(data)
    section = doc["quadratic"]
    try:
        return quadratic_game(
            section["M"], section["q"], section["dims"],
            section["coupling_blocks"], section["coupling_offsets"],
            lower=_bounds_from_json(section.get("lower"), -np.inf),
            upper=_bounds_from_json(section.get("upper"), np.inf),
            beta=section.get("beta"), eta=section.get("eta"),
        )
    except KeyError as e:
        raise ValidationError(f"Quadratic instance is missing field {e}")


def graph_from_document(doc):
    """
    Raises:
        ValidationError: Malformed edges
        AssumptionViolationError: Disconnected graph
    """
    section = doc["graph"]
    try:
        n_agents = int(section["n_agents"])
        edges = [(int(i), int(j), float(w)) for i, j, w in section["edges"]]
    except (KeyError, TypeError, ValueError) as e:
        raise ValidationError(f"Malformed graph section: {e}")
    return graphs.from_edges(n_agents, edges)


def load_instance(path):
    """
    Load (game, graph) from an instance document.

    Returns:
        tuple[GameInstance, CommGraph, str]: Game, graph and instance hash
    """
    doc = read_document(path)
    game = game_from_document(doc)
    graph = graph_from_document(doc)
    if graph.n_agents != game.n_agents:
        raise ValidationError(f"Graph has {graph.n_agents} nodes but the game has {game.n_agents} agents")
    return game, graph, instance_hash(doc)


def default_instance_path(output_dir, params):
    return Path(output_dir) / f"cournot_seed{params.seed}.json"
