"""Versioned JSON formats for selections, checkpoints and metrics streams."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .blockmap import BlockGrid, BlockIndex
from .selection import BlockSelection

SELECTION_FORMAT = "smt-selection"
CHECKPOINT_FORMAT = "smt-checkpoint"
VERSION = 1


class FormatError(ValueError):
    """A file does not follow the expected format or version."""


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def encode_array(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": a.reshape(-1).tolist()}


def decode_array(obj: dict) -> np.ndarray:
    return np.array(obj["data"], dtype=np.float64).reshape(obj["shape"])


def selection_to_dict(sel: BlockSelection, scores: dict | None = None) -> dict:
    layers = []
    for layer_id in sorted(sel.blocks):
        grid = sel.grids.get(layer_id)
        entry = {
            "layer_id": layer_id,
            "role": sel.roles.get(layer_id),
            "blocks": [list(idx) for idx in sel.blocks[layer_id]],
        }
        if grid is not None:
            entry.update(d=grid.rows_d, k=grid.cols_k, l=grid.side_l)
        layers.append(entry)
    out = {"format": SELECTION_FORMAT, "version": VERSION, "layers": layers, "provenance": sel.provenance}
    if scores is not None:
        out["scores"] = scores
    return out


def selection_from_dict(obj: dict) -> BlockSelection:
    if obj.get("format") != SELECTION_FORMAT:
        raise FormatError(f"not a selection file (format={obj.get('format')!r})")
    if obj.get("version") != VERSION:
        raise FormatError(f"unsupported selection file version {obj.get('version')!r}")
    blocks, grids, roles = {}, {}, {}
    for entry in obj["layers"]:
        lid = entry["layer_id"]
        blocks[lid] = [BlockIndex(int(i), int(j)) for i, j in entry["blocks"]]
        if "l" in entry:
            grids[lid] = BlockGrid(int(entry["d"]), int(entry["k"]), int(entry["l"]))
        if entry.get("role") is not None:
            roles[lid] = entry["role"]
    return BlockSelection(blocks, grids, roles, dict(obj.get("provenance", {})))


def write_selection(path, sel: BlockSelection, scores: dict | None = None) -> Path:
    path = Path(path)
    path.write_text(_dump(selection_to_dict(sel, scores)))
    return path


def read_selection(path) -> BlockSelection:
    return selection_from_dict(json.loads(Path(path).read_text()))


def write_checkpoint(path, *, config_hash: str, mode: str, step: int, weights: dict[str, np.ndarray],
                     packs: dict | None = None, optimizer: dict | None = None,
                     selection: BlockSelection | None = None) -> Path:
    obj = {
        "format": CHECKPOINT_FORMAT,
        "version": VERSION,
        "config_hash": config_hash,
        "mode": mode,
        "step": int(step),
        "weights": {k: encode_array(v) for k, v in sorted(weights.items())},
        "packs": {k: {"index_map": [list(i) for i in p.index_map], "values": encode_array(p.values)}
                  for k, p in sorted((packs or {}).items())},
        "optimizer": _encode_optimizer(optimizer),
        "selection": None if selection is None else selection_to_dict(selection),
    }
    path = Path(path)
    path.write_text(_dump(obj))
    return path


def read_checkpoint(path) -> dict:
    obj = json.loads(Path(path).read_text())
    if obj.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"not a checkpoint file (format={obj.get('format')!r})")
    if obj.get("version") != VERSION:
        raise FormatError(f"unsupported checkpoint version {obj.get('version')!r}")
    obj["weights"] = {k: decode_array(v) for k, v in obj["weights"].items()}
    obj["packs"] = {
        k: {"index_map": [BlockIndex(*i) for i in p["index_map"]], "values": decode_array(p["values"])}
        for k, p in obj["packs"].items()
    }
    obj["optimizer"] = _decode_optimizer(obj["optimizer"])
    if obj["selection"] is not None:
        obj["selection"] = selection_from_dict(obj["selection"])
    return obj


def _encode_optimizer(state):
    if state is None:
        return None
    if state["kind"] == "sparse":
        return {"kind": "sparse", "layers": {
            k: {"m": encode_array(s["m"]), "v": encode_array(s["v"]), "t": int(s["t"])}
            for k, s in sorted(state["layers"].items())
        }}
    return {"kind": "dense", "t": int(state["t"]),
            "m": [encode_array(a) for a in state["m"]], "v": [encode_array(a) for a in state["v"]]}


def _decode_optimizer(obj):
    if obj is None:
        return None
    if obj["kind"] == "sparse":
        return {"kind": "sparse", "layers": {
            k: {"m": decode_array(s["m"]), "v": decode_array(s["v"]), "t": s["t"]} for k, s in obj["layers"].items()
        }}
    return {"kind": "dense", "t": obj["t"], "m": [decode_array(a) for a in obj["m"]],
            "v": [decode_array(a) for a in obj["v"]]}


def append_metrics(path, records) -> None:
    with open(path, "a") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def read_metrics(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
