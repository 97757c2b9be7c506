"""Map and flatten nested parameter structures.

A parameter tree is any nesting of dataclasses, tuples, lists, and
string-keyed dicts with Tensor leaves.  Names are dotted paths; dict keys are
iterated in sorted order so flattening is deterministic.
"""

from __future__ import annotations

import dataclasses
from typing import Callable, Dict, List, Tuple

from .tensor import ShapeError, Tensor


def tree_leaves(obj, prefix: str = "") -> List[Tuple[str, Tensor]]:
    out: List[Tuple[str, Tensor]] = []

    def walk(node, path):
        if isinstance(node, Tensor):
            out.append((path, node))
        elif dataclasses.is_dataclass(node):
            for f in dataclasses.fields(node):
                walk(getattr(node, f.name), f"{path}.{f.name}" if path else f.name)
        elif isinstance(node, (tuple, list)):
            for i, item in enumerate(node):
                walk(item, f"{path}.{i}" if path else str(i))
        elif isinstance(node, dict):
            for key in sorted(node):
                walk(node[key], f"{path}.{key}" if path else str(key))
        elif node is None or isinstance(node, (int, float, str, bool)):
            pass  # configuration scalars ride along untouched
        else:
            raise TypeError(f"unsupported tree node {type(node)} at {path!r}")

    walk(obj, prefix)
    return out


def tree_map(fn: Callable, obj, *rest):
    """Apply fn to corresponding Tensor leaves; structure must match."""

    def walk(nodes, path):
        first = nodes[0]
        if isinstance(first, Tensor):
            for other in nodes[1:]:
                if not isinstance(other, Tensor) or other.shape != first.shape:
                    raise ShapeError(f"tree mismatch at {path!r}")
            return fn(*nodes)
        if dataclasses.is_dataclass(first):
            values = {}
            for f in dataclasses.fields(first):
                values[f.name] = walk([getattr(n, f.name) for n in nodes],
                                      f"{path}.{f.name}")
            return type(first)(**values)
        if isinstance(first, tuple):
            return tuple(walk(list(items), f"{path}.{i}")
                         for i, items in enumerate(zip(*nodes)))
        if isinstance(first, list):
            return [walk(list(items), f"{path}.{i}")
                    for i, items in enumerate(zip(*nodes))]
        if isinstance(first, dict):
            return {k: walk([n[k] for n in nodes], f"{path}.{k}")
                    for k in sorted(first)}
        return first

    return walk([obj, *rest], "")


def tree_to_dict(obj) -> Dict[str, Tensor]:
    return dict(tree_leaves(obj))
