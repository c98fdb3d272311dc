"""Text formats for catalogs, sessions and decode requests.

Floats are written with 17 significant digits so every file reloads exactly.
"""

from __future__ import annotations

import json
from typing import Sequence

import numpy as np

from ..decoder import RankedItem
from .synth import ItemCatalog

CATALOG_FORMAT = "varlenrec-catalog/1"


def _floats(values) -> str:
    return " ".join(f"{v:.17g}" for v in values)


def format_catalog(catalog: ItemCatalog) -> str:
    """Header lines, then ``item<TAB>popularity<TAB>leaf<TAB>features`` per item."""
    lines = [f"# {CATALOG_FORMAT} N={len(catalog)} F={catalog.features.shape[1]}"]
    if catalog.tree is not None:
        lines.append("# tree " + " ".join(map(str, catalog.tree)))
    if catalog.lengths is not None:
        lines.append("# lengths " + " ".join(map(str, catalog.lengths)))
    for name, p, leaf, x in zip(catalog.item_ids, catalog.popularity, catalog.leaves,
                                catalog.features):
        if any(ch in name for ch in "\t\n ") or not name:
            raise ValueError(f"item id {name!r} must be non-empty without whitespace")
        lines.append(f"{name}\t{p:.17g}\t{leaf}\t{_floats(x)}")
    return "\n".join(lines) + "\n"


def parse_catalog(text: str) -> ItemCatalog:
    lines = text.splitlines()
    if not lines or not lines[0].startswith(f"# {CATALOG_FORMAT}"):
        raise ValueError(f"not a {CATALOG_FORMAT} file")
    meta = dict(kv.split("=") for kv in lines[0].split()[2:])
    tree = lengths = None
    names, pops, leaves, feats = [], [], [], []
    for ln in lines[1:]:
        if ln.startswith("# tree"):
            tree = [int(v) for v in ln.split()[2:]]
        elif ln.startswith("# lengths"):
            lengths = np.array([int(v) for v in ln.split()[2:]])
        elif ln.strip():
            name, p, leaf, x = ln.split("\t")
            names.append(name)
            pops.append(float(p))
            leaves.append(int(leaf))
            feats.append([float(v) for v in x.split()])
    if len(names) != int(meta["N"]):
        raise ValueError(f"expected {meta['N']} items, found {len(names)}")
    features = np.array(feats, dtype=np.float64).reshape(len(names), int(meta["F"]))
    return ItemCatalog(names, features, np.array(pops), np.array(leaves, dtype=np.int64),
                       tree, lengths)


def format_sessions(sessions: Sequence[Sequence[int]], catalog: ItemCatalog) -> str:
    return "".join(" ".join(catalog.item_ids[i] for i in s) + "\n" for s in sessions)


def parse_sessions(text: str, catalog: ItemCatalog) -> list[list[int]]:
    index = {name: i for i, name in enumerate(catalog.item_ids)}
    out = []
    for n, ln in enumerate(text.splitlines(), start=1):
        if not ln.strip():
            continue
        try:
            out.append([index[name] for name in ln.split()])
        except KeyError as err:
            raise ValueError(f"line {n}: unknown item {err.args[0]!r}") from None
    return out


def format_raw_ids(raw: Sequence[tuple], names: Sequence[str]) -> str:
    """``item<TAB>tokens`` lines of unresolved main-token sequences."""
    return "".join(f"{n}\t{' '.join(map(str, r))}\n" for n, r in zip(names, raw))


def parse_raw_ids(text: str) -> tuple[list[str], list[tuple[int, ...]]]:
    names, raw = [], []
    for ln in text.splitlines():
        if ln.strip():
            name, toks = ln.split("\t")
            names.append(name)
            raw.append(tuple(int(v) for v in toks.split()))
    return names, raw


def parse_decode_request(text: str) -> dict:
    """``{"history": [item ids], "topk": int, "beam": int}``; only history is required."""
    req = json.loads(text)
    if not isinstance(req, dict) or not isinstance(req.get("history"), list):
        raise ValueError("decode request needs a 'history' list")
    for key in ("topk", "beam"):
        if key in req and (not isinstance(req[key], int) or req[key] < 1):
            raise ValueError(f"'{key}' must be a positive integer")
    return req


def format_decode_response(ranked: Sequence[RankedItem], names: Sequence[str]) -> str:
    items = [dict(item=names[r.item], score=r.score, log_prob=r.log_prob, tokens=list(r.tokens))
             for r in ranked]
    return json.dumps({"items": items}, indent=2) + "\n"
