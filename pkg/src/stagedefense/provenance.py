"""Fused provenance graph for one observation window.

Event kind to edge relation:

    process_create  -> forked      (parent process -> child process)
    file_access     -> read/wrote  (by attributes["mode"], default read)
    socket_connect  -> connected   (process -> socket)
    user_login      -> logged_in   (user -> process)
    registry_write  -> wrote
    alert           -> raised_on   (alert -> fused host entity)

An alert is fused to the subject of the temporally nearest non-alert event on
the same host (ties broken by smallest entity id); with no such event it is
attached to the host entity itself.

Text export::

    # window <index>
    N <idx> <type> <entity id> <comma separated technique tags or ->
    E <src idx> <dst idx> <relation> <timestamp>
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .telemetry import ENTITY_TYPES, Event

NODE_TYPES = ENTITY_TYPES
RELATIONS = ("forked", "read", "wrote", "connected", "logged_in", "raised_on")
N_TAG_BUCKETS = 8
FEATURE_DIM = len(NODE_TYPES) + 3 + N_TAG_BUCKETS
_TYPE_INDEX = {t: i for i, t in enumerate(NODE_TYPES)}


@dataclass(frozen=True)
class Node:
    id: str
    type: str
    first_seen: float
    tags: frozenset


@dataclass(frozen=True)
class ProvenanceGraph:
    nodes: tuple[Node, ...]
    # (src index, dst index, relation, timestamp)
    edges: tuple[tuple[int, int, str, float], ...]
    window_index: int
    skipped: int = 0

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def edge_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.edges:
            return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
        e = np.array([(s, d) for s, d, _, _ in self.edges], dtype=np.int64)
        return e[:, 0], e[:, 1]

    def degrees(self) -> tuple[np.ndarray, np.ndarray]:
        src, dst = self.edge_arrays()
        n = self.n_nodes
        return np.bincount(dst, minlength=n), np.bincount(src, minlength=n)

    def to_text(self) -> str:
        lines = [f"# window {self.window_index}"]
        for i, n in enumerate(self.nodes):
            lines.append(f"N {i} {n.type} {n.id} {','.join(sorted(n.tags)) or '-'}")
        for s, d, rel, ts in self.edges:
            lines.append(f"E {s} {d} {rel} {ts:.3f}")
        return "\n".join(lines) + "\n"


def _entity_type(ref) -> str | None:
    if not isinstance(ref, str):
        return None
    parts = ref.split(":", 2)
    if len(parts) != 3 or parts[0] not in _TYPE_INDEX or not parts[1].startswith("h") or not parts[2]:
        return None
    return parts[0]


def _relation(ev: Event) -> str | None:
    if ev.kind == "process_create":
        return "forked"
    if ev.kind == "file_access":
        return "wrote" if ev.attributes.get("mode") == "write" else "read"
    if ev.kind == "socket_connect":
        return "connected"
    if ev.kind == "user_login":
        return "logged_in"
    if ev.kind == "registry_write":
        return "wrote"
    return None


def _event_key(ev: Event):
    return (ev.timestamp, ev.host, ev.kind, ev.subject, ev.object, sorted(ev.attributes.items()))


def build_graph(events, window_index: int) -> ProvenanceGraph:
    """Fuse one window of events into a provenance graph; malformed events are skipped."""
    events = sorted(events, key=_event_key)
    skipped = 0
    first_seen: dict[str, float] = {}
    types: dict[str, str] = {}
    tags: dict[str, set] = {}
    raw_edges: list[tuple[str, str, str, float]] = []
    host_events: dict[int, list[tuple[float, str]]] = {}
    alerts: list[Event] = []

    def touch(ref, etype, ts, tag):
        if ref not in first_seen:
            first_seen[ref] = ts
            types[ref] = etype
            tags[ref] = set()
        if tag:
            tags[ref].add(tag)

    for ev in events:
        if ev.kind == "alert":
            if _entity_type(ev.subject) != "alert":
                skipped += 1
                continue
            alerts.append(ev)
            continue
        rel = _relation(ev)
        st, ot = _entity_type(ev.subject), _entity_type(ev.object)
        if rel is None or st is None or ot is None or ev.subject == ev.object \
                or "alert" in (st, ot):
            skipped += 1
            continue
        tag = ev.attributes.get("technique")
        touch(ev.subject, st, ev.timestamp, tag)
        touch(ev.object, ot, ev.timestamp, tag)
        raw_edges.append((ev.subject, ev.object, rel, ev.timestamp))
        host_events.setdefault(ev.host, []).append((ev.timestamp, ev.subject))

    for ev in alerts:
        target = _nearest_subject(host_events.get(ev.host, ()), ev.timestamp)
        if target is None:
            target = f"host:h{ev.host}:host"
            touch(target, "host", ev.timestamp, None)
        touch(ev.subject, "alert", ev.timestamp, None)
        raw_edges.append((ev.subject, target, "raised_on", ev.timestamp))

    order = sorted(first_seen, key=lambda r: (_TYPE_INDEX[types[r]], first_seen[r], r))
    index = {r: i for i, r in enumerate(order)}
    nodes = tuple(Node(r, types[r], first_seen[r], frozenset(tags[r])) for r in order)
    edges = sorted((index[s], index[d], rel, ts) for s, d, rel, ts in raw_edges)
    return ProvenanceGraph(nodes, tuple(edges), window_index, skipped)


def _nearest_subject(entries, ts):
    if not entries:
        return None
    return min(entries, key=lambda e: (abs(e[0] - ts), e[1]))[1]


def tag_bucket(tag: str) -> int:
    return zlib.crc32(tag.encode()) % N_TAG_BUCKETS


def feature_matrix(graph: ProvenanceGraph) -> np.ndarray:
    """Features for every node: type one-hot, log degrees, alert flag, tag buckets (17)."""
    n = graph.n_nodes
    X = np.zeros((n, FEATURE_DIM))
    if n == 0:
        return X
    indeg, outdeg = graph.degrees()
    t = len(NODE_TYPES)
    for i, node in enumerate(graph.nodes):
        X[i, _TYPE_INDEX[node.type]] = 1.0
        if node.type == "alert":
            X[i, t + 2] = 1.0
        for tag in node.tags:
            X[i, t + 3 + tag_bucket(tag)] = 1.0
    X[:, t] = np.log1p(indeg)
    X[:, t + 1] = np.log1p(outdeg)
    return X


def node_features(graph: ProvenanceGraph, node) -> np.ndarray:
    """Feature vector of one node, addressed by index or entity id."""
    if isinstance(node, str):
        node = next(i for i, n in enumerate(graph.nodes) if n.id == node)
    return feature_matrix(graph)[node]


@dataclass(frozen=True)
class CompactGraph:
    """Array form consumed by the encoder: node features plus edge lists."""

    features: np.ndarray
    src: np.ndarray
    dst: np.ndarray

    @classmethod
    def from_graph(cls, graph: ProvenanceGraph) -> "CompactGraph":
        src, dst = graph.edge_arrays()
        return cls(feature_matrix(graph), src, dst)

    @property
    def n_nodes(self) -> int:
        return self.features.shape[0]

    def permuted(self, perm: np.ndarray) -> "CompactGraph":
        """Relabel nodes so that old node ``i`` becomes ``perm[i]``."""
        inv = np.argsort(perm)
        return CompactGraph(self.features[inv], perm[self.src], perm[self.dst])

