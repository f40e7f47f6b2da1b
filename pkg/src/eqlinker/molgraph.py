"""Molecule graph model: valency rules, double-cut fragment/linker extraction,
BFS generation ordering, isomorphism, canonical keys, JSON-lines serialization.

Node indexing convention for linker samples: fragment-1 nodes first, then
fragment-2 nodes, then linker nodes.  All types are immutable after
construction and safe to share.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field, replace
from itertools import combinations
from typing import Iterable, Sequence

import numpy as np

DEFAULT_VALENCES = (4, 3, 2, 1)


class ParseError(ValueError):
    """Malformed dataset record."""


@dataclass(frozen=True, eq=False)
class Molecule3D:
    """Typed node set, undirected edge set and per-node 3D coordinates."""

    types: tuple[int, ...]
    edges: tuple[tuple[int, int], ...]  # normalized i < j, sorted
    coords: np.ndarray  # (n, 3) float64

    def __post_init__(self):
        n = len(self.types)
        norm = []
        seen = set()
        for i, j in self.edges:
            if i == j:
                raise ValueError(f"self-loop at node {i}")
            if not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"edge ({i},{j}) out of range for {n} nodes")
            e = (min(i, j), max(i, j))
            if e in seen:
                raise ValueError(f"duplicate edge {e}")
            seen.add(e)
            norm.append(e)
        object.__setattr__(self, "edges", tuple(sorted(norm)))
        coords = np.asarray(self.coords, dtype=np.float64).reshape(n, 3)
        if not np.all(np.isfinite(coords)):
            raise ValueError("non-finite coordinates")
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)

    @property
    def n(self) -> int:
        return len(self.types)

    def adjacency(self) -> list[set[int]]:
        adj = [set() for _ in range(self.n)]
        for i, j in self.edges:
            adj[i].add(j)
            adj[j].add(i)
        return adj

    def degrees(self) -> list[int]:
        deg = [0] * self.n
        for i, j in self.edges:
            deg[i] += 1
            deg[j] += 1
        return deg

    def same_as(self, other: "Molecule3D", tol: float = 0.0) -> bool:
        return (self.types == other.types and self.edges == other.edges
                and (np.array_equal(self.coords, other.coords) if tol == 0.0
                     else bool(np.max(np.abs(self.coords - other.coords)) <= tol)))


def connected_components(n: int, edges: Iterable[tuple[int, int]]) -> list[set[int]]:
    adj = [[] for _ in range(n)]
    for i, j in edges:
        adj[i].append(j)
        adj[j].append(i)
    seen = [False] * n
    comps = []
    for s in range(n):
        if seen[s]:
            continue
        comp = set()
        stack = [s]
        seen[s] = True
        while stack:
            u = stack.pop()
            comp.add(u)
            for w in adj[u]:
                if not seen[w]:
                    seen[w] = True
                    stack.append(w)
        comps.append(comp)
    return comps


def max_valence(t: int, valences: Sequence[int] = DEFAULT_VALENCES) -> int:
    return valences[t]


def free_valences(mol: Molecule3D, valences: Sequence[int] = DEFAULT_VALENCES) -> list[int]:
    deg = mol.degrees()
    return [valences[t] - d for t, d in zip(mol.types, deg)]


@dataclass(frozen=True)
class ValidationReport:
    valency_violations: tuple[tuple[int, int, int], ...]  # (node, degree, max)
    not_linked: bool

    @property
    def ok(self) -> bool:
        return not self.valency_violations and not self.not_linked


def validate(mol: Molecule3D, valences: Sequence[int] = DEFAULT_VALENCES,
             fragment_nodes: tuple[set[int], set[int]] | None = None) -> ValidationReport:
    """Report valency violations and, when fragment node sets are given,
    whether the molecule fails to link them into one connected graph."""
    deg = mol.degrees()
    viol = tuple((i, deg[i], valences[mol.types[i]]) for i in range(mol.n)
                 if deg[i] > valences[mol.types[i]])
    not_linked = False
    if fragment_nodes is not None:
        # linking succeeds only if everything ends up in one connected graph
        not_linked = len(connected_components(mol.n, mol.edges)) != 1
    return ValidationReport(viol, not_linked)


# ------------------------------------------------------------------
# generation traces
# ------------------------------------------------------------------

@dataclass(frozen=True)
class GenerationTrace:
    """Ordered decisions: anchors, node types, per-focus edges/STOPs,
    first-connection coordinate events and post-STOP update events."""

    events: tuple[tuple, ...]


@dataclass(frozen=True)
class LinkerSample:
    fragments: Molecule3D      # two components, indices 0..n_frag-1
    linker: Molecule3D         # indices shifted down by n_frag
    full: Molecule3D
    anchors: tuple[int, int]
    cut_edges: tuple[tuple[int, int], tuple[int, int]]
    n_frag1: int
    bfs_trace: GenerationTrace | None = None

    @property
    def n_frag(self) -> int:
        return self.fragments.n

    @property
    def linker_nodes(self) -> range:
        return range(self.n_frag, self.full.n)

    def fragment_node_sets(self) -> tuple[set[int], set[int]]:
        return set(range(self.n_frag1)), set(range(self.n_frag1, self.n_frag))


def _induced(mol: Molecule3D, nodes: list[int]) -> Molecule3D:
    pos = {v: k for k, v in enumerate(nodes)}
    edges = tuple((pos[i], pos[j]) for i, j in mol.edges if i in pos and j in pos)
    return Molecule3D(tuple(mol.types[v] for v in nodes), edges, mol.coords[nodes])


def _bridges(n: int, edges: Sequence[tuple[int, int]]) -> list[tuple[int, int]]:
    """Tarjan low-link bridge finding (iterative)."""
    adj: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    for eidx, (i, j) in enumerate(edges):
        adj[i].append((j, eidx))
        adj[j].append((i, eidx))
    disc = [-1] * n
    low = [0] * n
    out: list[tuple[int, int]] = []
    timer = 0
    for root in range(n):
        if disc[root] != -1:
            continue
        stack = [(root, -1, iter(adj[root]))]
        disc[root] = low[root] = timer
        timer += 1
        while stack:
            u, pe, it = stack[-1]
            advanced = False
            for w, eidx in it:
                if eidx == pe:
                    continue
                if disc[w] == -1:
                    disc[w] = low[w] = timer
                    timer += 1
                    stack.append((w, eidx, iter(adj[w])))
                    advanced = True
                    break
                low[u] = min(low[u], disc[w])
            if not advanced:
                stack.pop()
                if stack:
                    p = stack[-1][0]
                    low[p] = min(low[p], low[u])
                    if low[u] > disc[p]:
                        out.append((min(p, u), max(p, u)))
    return sorted(out)


def cut_linker(mol: Molecule3D, min_frag: int = 1, min_linker: int = 1) -> list[LinkerSample]:
    """All decompositions obtained by removing two bridge edges, yielding two
    fragments and a connected middle linker, subject to minimum sizes."""
    comps0 = connected_components(mol.n, mol.edges)
    if len(comps0) != 1:
        raise ValueError("cut_linker expects a connected molecule")
    out = []
    bridges = _bridges(mol.n, mol.edges)
    for e1, e2 in combinations(bridges, 2):
        kept = [e for e in mol.edges if e != e1 and e != e2]
        comps = connected_components(mol.n, kept)
        if len(comps) != 3:
            continue
        # the linker is the component touching both removed edges
        def comp_of(v):
            return next(k for k, c in enumerate(comps) if v in c)

        touch = [set(), set()]
        for ci, (a, b) in enumerate((e1, e2)):
            touch[ci] = {comp_of(a), comp_of(b)}
        both = touch[0] & touch[1]
        if len(both) != 1:
            continue
        linker_ci = both.pop()
        frag_cis = [k for k in range(3) if k != linker_ci]
        # fragment-side endpoints of the cuts are the anchors
        anchors_old = {}
        linker_old = {}
        for a, b in (e1, e2):
            if comp_of(a) == linker_ci:
                a, b = b, a
            anchors_old[comp_of(a)] = a
            linker_old[comp_of(a)] = b
        frag_cis.sort(key=lambda k: min(comps[k]))
        f1, f2 = (sorted(comps[k]) for k in frag_cis)
        lk = sorted(comps[linker_ci])
        if min(len(f1), len(f2)) < min_frag or len(lk) < min_linker:
            continue
        order = f1 + f2 + lk
        pos = {v: k for k, v in enumerate(order)}
        full = _induced(mol, order)
        anchors = (pos[anchors_old[frag_cis[0]]], pos[anchors_old[frag_cis[1]]])
        cuts = ((anchors[0], pos[linker_old[frag_cis[0]]]),
                (anchors[1], pos[linker_old[frag_cis[1]]]))
        sample = LinkerSample(
            fragments=_induced(mol, f1 + f2),
            linker=_induced(mol, lk),
            full=full,
            anchors=anchors,
            cut_edges=cuts,
            n_frag1=len(f1),
        )
        out.append(sample)
    return out


def bfs_order(sample: LinkerSample) -> GenerationTrace:
    """Deterministic teacher-forcing trace: queue seeded with the two anchors,
    ascending-index tie-break, STOP per focus, coordinate event on first
    connection, update event after every STOP."""
    full = sample.full
    n_frag = sample.n_frag
    linker = set(sample.linker_nodes)
    adj = full.adjacency()
    gen_edges = {e for e in full.edges if e[0] in linker or e[1] in linker}
    a1, a2 = sample.anchors
    events: list[tuple] = [("anchor", a1, a2),
                           ("types", tuple(full.types[i] for i in sample.linker_nodes))]
    connected = set(range(n_frag))
    added: set[tuple[int, int]] = set()
    queue = deque([a1, a2])
    focused = set()
    while queue:
        f = queue.popleft()
        focused.add(f)
        events.append(("focus", f))
        for j in sorted(adj[f]):
            e = (min(f, j), max(f, j))
            if e in gen_edges and e not in added:
                added.add(e)
                events.append(("edge", f, j))
                if j not in connected:
                    connected.add(j)
                    events.append(("coord", j, tuple(full.coords[j])))
                    queue.append(j)
        events.append(("stop", f))
        events.append(("update", tuple(sorted(connected & linker))))
    if not linker <= connected:
        raise ValueError("linker is not reachable from the anchors")
    if not linker <= focused:
        raise ValueError("a linker node was never focused")
    return GenerationTrace(tuple(events))


def replay(trace: GenerationTrace, fragments: Molecule3D) -> Molecule3D:
    """Reconstruct the full molecule by applying trace events to the fragments."""
    n_frag = fragments.n
    types = list(fragments.types)
    coords = [tuple(r) for r in fragments.coords]
    edges = list(fragments.edges)
    for ev in trace.events:
        if ev[0] == "types":
            types.extend(ev[1])
            coords.extend((0.0, 0.0, 0.0) for _ in ev[1])
        elif ev[0] == "edge":
            edges.append((min(ev[1], ev[2]), max(ev[1], ev[2])))
        elif ev[0] == "coord":
            coords[ev[1]] = ev[2]
    return Molecule3D(tuple(types), tuple(edges), np.array(coords).reshape(len(types), 3))


def attach_trace(sample: LinkerSample) -> LinkerSample:
    return replace(sample, bfs_trace=bfs_order(sample))


def canonicalize_linker_order(sample: LinkerSample) -> LinkerSample:
    """Relabel linker nodes in BFS discovery order and attach the trace.

    After relabeling, every "connect a new linker node" decision in the trace
    targets the lowest-indexed not-yet-connected slot, so the decoding order
    is a deterministic function of the graph rather than of the arbitrary
    labeling the decomposition happened to produce."""
    trace = bfs_order(sample)
    discovery = [ev[1] for ev in trace.events if ev[0] == "coord"]
    n_frag = sample.n_frag
    if discovery == list(sample.linker_nodes):
        return replace(sample, bfs_trace=trace)
    order = list(range(n_frag)) + discovery
    pos = {v: k for k, v in enumerate(order)}
    (c1a, c1l), (c2a, c2l) = sample.cut_edges
    out = LinkerSample(
        fragments=sample.fragments,
        linker=_induced(sample.full, discovery),
        full=_induced(sample.full, order),
        anchors=sample.anchors,
        cut_edges=((c1a, pos[c1l]), (c2a, pos[c2l])),
        n_frag1=sample.n_frag1,
    )
    return attach_trace(out)


def swap_fragments(sample: LinkerSample) -> LinkerSample:
    """Fragment-permutation augmentation: exchange the roles of the fragments."""
    n1 = sample.n_frag1
    n_frag = sample.n_frag
    n = sample.full.n
    order = list(range(n1, n_frag)) + list(range(n1)) + list(range(n_frag, n))
    full = _induced(sample.full, order)
    pos = {v: k for k, v in enumerate(order)}
    a1, a2 = sample.anchors
    (c1a, c1l), (c2a, c2l) = sample.cut_edges
    out = LinkerSample(
        fragments=_induced(sample.full, order[:n_frag]),
        linker=sample.linker,
        full=full,
        anchors=(pos[a2], pos[a1]),
        cut_edges=((pos[c2a], pos[c2l]), (pos[c1a], pos[c1l])),
        n_frag1=n_frag - n1,
    )
    return canonicalize_linker_order(out)


# ------------------------------------------------------------------
# isomorphism and canonical keys (types + adjacency; coordinates ignored)
# ------------------------------------------------------------------

def graph_isomorphic(a: Molecule3D, b: Molecule3D) -> bool:
    m = find_isomorphism(a, b)
    return m is not None


def find_isomorphism(a: Molecule3D, b: Molecule3D) -> list[int] | None:
    """A type- and adjacency-preserving bijection a->b, or None."""
    for m in _isomorphisms(a, b):
        return m
    return None


def _isomorphisms(a: Molecule3D, b: Molecule3D):
    """Backtracking enumeration of all isomorphisms a->b."""
    n = a.n
    if n != b.n or sorted(a.types) != sorted(b.types) or len(a.edges) != len(b.edges):
        return
    dega, degb = a.degrees(), b.degrees()
    if sorted(zip(a.types, dega)) != sorted(zip(b.types, degb)):
        return
    adja, adjb = a.adjacency(), b.adjacency()
    # order a-nodes to keep the mapped frontier connected where possible
    order: list[int] = []
    placed = set()
    while len(order) < n:
        cand = [v for v in range(n) if v not in placed and any(w in placed for w in adja[v])]
        if not cand:
            cand = [v for v in range(n) if v not in placed]
        v = max(cand, key=lambda v: (dega[v], -v))
        order.append(v)
        placed.add(v)
    mapping = [-1] * n
    used = [False] * n

    def extend(k: int):
        if k == n:
            yield list(mapping)
            return
        v = order[k]
        for w in range(n):
            if used[w] or b.types[w] != a.types[v] or degb[w] != dega[v]:
                continue
            ok = True
            for u in adja[v]:
                if mapping[u] != -1 and mapping[u] not in adjb[w]:
                    ok = False
                    break
            if ok:
                for u in range(n):
                    if mapping[u] != -1 and u not in adja[v] and mapping[u] in adjb[w]:
                        ok = False
                        break
            if ok:
                mapping[v] = w
                used[w] = True
                yield from extend(k + 1)
                mapping[v] = -1
                used[w] = False

    yield from extend(0)


def all_isomorphisms(a: Molecule3D, b: Molecule3D) -> list[list[int]]:
    return list(_isomorphisms(a, b))


def _refine(n: int, adj: list[set[int]], colors: list[int]) -> list[int]:
    """Stable color refinement; color ids assigned by sorted signature."""
    while True:
        sigs = [(colors[v], tuple(sorted(colors[w] for w in adj[v]))) for v in range(n)]
        order = sorted(set(sigs))
        remap = {s: k for k, s in enumerate(order)}
        new = [remap[sigs[v]] for v in range(n)]
        if new == colors:
            return new
        colors = new


def canonical_key(mol: Molecule3D) -> str:
    """Canonical string: equal keys iff graph_isomorphic (types + adjacency)."""
    n = mol.n
    if n == 0:
        return "0||"
    adj = mol.adjacency()
    base = _refine(n, adj, list(mol.types))
    best: list[str | None] = [None]

    def encode(colors: list[int]) -> str:
        perm = sorted(range(n), key=lambda v: colors[v])
        pos = {v: k for k, v in enumerate(perm)}
        t = ",".join(str(mol.types[v]) for v in perm)
        es = sorted((min(pos[i], pos[j]), max(pos[i], pos[j])) for i, j in mol.edges)
        e = ";".join(f"{i}-{j}" for i, j in es)
        return f"{n}|{t}|{e}"

    def rec(colors: list[int]):
        cells: dict[int, list[int]] = {}
        for v, c in enumerate(colors):
            cells.setdefault(c, []).append(v)
        target = next((c for c in sorted(cells) if len(cells[c]) > 1), None)
        if target is None:
            key = encode(colors)
            if best[0] is None or key < best[0]:
                best[0] = key
            return
        fresh = n + 1
        for v in cells[target]:
            branch = list(colors)
            branch[v] = fresh
            rec(_refine(n, adj, branch))

    rec(base)
    return best[0]  # type: ignore[return-value]


# ------------------------------------------------------------------
# serialization: one JSON object per line, floats at 17 significant digits
# ------------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def molecule_to_json(mol: Molecule3D) -> str:
    types = ",".join(str(t) for t in mol.types)
    edges = ",".join(f"[{i},{j}]" for i, j in mol.edges)
    coords = ",".join("[" + ",".join(_fmt(c) for c in row) + "]" for row in mol.coords)
    return f'{{"types":[{types}],"edges":[{edges}],"coords":[{coords}]}}'


def _mol_from_obj(obj: dict, where: str) -> Molecule3D:
    for f in ("types", "edges", "coords"):
        if f not in obj:
            raise ParseError(f"{where}: missing field '{f}'")
    try:
        types = tuple(int(t) for t in obj["types"])
        edges = tuple((int(i), int(j)) for i, j in obj["edges"])
        coords = np.array([[float(c) for c in row] for row in obj["coords"]], dtype=np.float64)
        coords = coords.reshape(len(types), 3)
        return Molecule3D(types, edges, coords)
    except (TypeError, ValueError) as e:
        raise ParseError(f"{where}: {e}") from e


def molecule_from_json(line: str, where: str = "molecule") -> Molecule3D:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as e:
        raise ParseError(f"{where}: invalid JSON ({e})") from e
    return _mol_from_obj(obj, where)


def sample_to_json(sample: LinkerSample) -> str:
    cuts = ",".join(f"[{a},{b}]" for a, b in sample.cut_edges)
    return ('{"fragments":' + molecule_to_json(sample.fragments)
            + ',"linker":' + molecule_to_json(sample.linker)
            + ',"full":' + molecule_to_json(sample.full)
            + f',"anchors":[{sample.anchors[0]},{sample.anchors[1]}]'
            + f',"cut_edges":[{cuts}]'
            + f',"n_frag1":{sample.n_frag1}}}')


def sample_from_json(line: str, where: str = "sample") -> LinkerSample:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as e:
        raise ParseError(f"{where}: invalid JSON ({e})") from e
    for f in ("fragments", "linker", "full", "anchors", "cut_edges", "n_frag1"):
        if f not in obj:
            raise ParseError(f"{where}: missing field '{f}'")
    sample = LinkerSample(
        fragments=_mol_from_obj(obj["fragments"], f"{where}.fragments"),
        linker=_mol_from_obj(obj["linker"], f"{where}.linker"),
        full=_mol_from_obj(obj["full"], f"{where}.full"),
        anchors=(int(obj["anchors"][0]), int(obj["anchors"][1])),
        cut_edges=tuple((int(a), int(b)) for a, b in obj["cut_edges"]),  # type: ignore[arg-type]
        n_frag1=int(obj["n_frag1"]),
    )
    return attach_trace(sample)


def write_samples(path, samples: Sequence[LinkerSample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(sample_to_json(s) + "\n")


def read_samples(path) -> list[LinkerSample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for k, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            out.append(sample_from_json(line, where=f"line {k}"))
    return out


def write_molecules(path, mols: Sequence[Molecule3D]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for m in mols:
            fh.write(molecule_to_json(m) + "\n")


def read_molecules(path) -> list[Molecule3D]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for k, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            out.append(molecule_from_json(line, where=f"line {k}"))
    return out
