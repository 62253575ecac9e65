"""Convert graph-structured communication plans into sequences.

Any DAG schedule can be replayed as a sequence: emit nodes in topological
order and give each step a context mask selecting exactly its DAG parents.
Every agent then sees precisely the messages it would have seen under graph
execution, so the sequence formulation covers the graph solution space.
"""

from __future__ import annotations

import json
from pathlib import Path

from .errors import InputError


def dag_to_sequence(
    nodes: list[tuple[str, str]], edges: list[tuple[str, str]]
) -> tuple[list[str], list[list[int]]]:
    """Lower a role-labeled DAG to (role sequence, per-step parent masks).

    `nodes` is an ordered list of (node_id, role); `edges` holds (u, v)
    pairs meaning v sees u's output.  Emission order is Kahn's algorithm with
    declaration order breaking ties, so output is deterministic.  Masks list
    the 1-based steps of each node's parents.
    """
    ids = [n for n, _ in nodes]
    if len(set(ids)) != len(ids):
        raise InputError("duplicate node ids in DAG")
    roles = dict(nodes)
    parents: dict[str, list[str]] = {n: [] for n in ids}
    children: dict[str, list[str]] = {n: [] for n in ids}
    for u, v in edges:
        if u not in roles or v not in roles:
            raise InputError(f"edge ({u!r}, {v!r}) references an unknown node")
        parents[v].append(u)
        children[u].append(v)

    indegree = {n: len(parents[n]) for n in ids}
    ready = [n for n in ids if indegree[n] == 0]
    order: list[str] = []
    while ready:
        node = ready.pop(0)
        order.append(node)
        for child in children[node]:
            indegree[child] -= 1
            if indegree[child] == 0:
                # keep declaration order among simultaneously-ready nodes
                ready.append(child)
                ready.sort(key=ids.index)
    if len(order) != len(ids):
        raise InputError("cycle detected in DAG")

    step_of = {n: i + 1 for i, n in enumerate(order)}
    sequence = [roles[n] for n in order]
    masks = [sorted(step_of[p] for p in parents[n]) for n in order]
    return sequence, masks


def load_dag_file(path) -> tuple[list[tuple[str, str]], list[tuple[str, str]]]:
    """Read the adjacency-list JSON form:
    {"nodes": [{"id": ..., "role": ...}, ...], "edges": [[u, v], ...]}"""
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise InputError(f"cannot read DAG file {path}: {e}") from e
    try:
        nodes = [(n["id"], n["role"]) for n in data["nodes"]]
        edges = [(u, v) for u, v in data.get("edges", [])]
    except (KeyError, TypeError, ValueError) as e:
        raise InputError(f"malformed DAG file {path}: {e}") from e
    return nodes, edges
