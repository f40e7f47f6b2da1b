"""Deterministic synthetic 3D molecules: random valence-respecting tree
growth with occasional ring closures, coordinates from a spring/repulsion
relaxation, and dataset assembly via the double-cut decomposition."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import molgraph as mg

BOND_LENGTH = 1.5
REPULSION_RANGE = 1.0
MIN_SEPARATION = 0.5


@dataclass(frozen=True)
class GenSpec:
    n_min: int = 6
    n_max: int = 14
    valences: tuple[int, ...] = mg.DEFAULT_VALENCES
    type_weights: tuple[float, ...] = (0.45, 0.25, 0.2, 0.1)
    bond_length: float = BOND_LENGTH
    relax_iters: int = 150
    ring_prob: float = 0.3
    max_ring_edges: int = 1

    def __post_init__(self):
        if self.n_min < 4:
            raise ValueError("n_min must be at least 4 (two fragments + 2-node linker)")
        if len(self.type_weights) != len(self.valences):
            raise ValueError("type_weights and valences length mismatch")


class GenerationBudgetError(RuntimeError):
    pass


def _relax(coords: np.ndarray, edges, bond_length: float, iters: int,
           step: float = 0.05) -> np.ndarray:
    """Gradient steps on bonded springs (rest = bond_length) plus a soft
    repulsion between non-bonded pairs closer than REPULSION_RANGE."""
    n = len(coords)
    coords = coords.copy()
    bonded = np.zeros((n, n), dtype=bool)
    for i, j in edges:
        bonded[i, j] = bonded[j, i] = True
    for _ in range(iters):
        force = np.zeros_like(coords)
        diff = coords[:, None, :] - coords[None, :, :]
        dist = np.linalg.norm(diff, axis=-1)
        np.fill_diagonal(dist, 1.0)
        unit = diff / dist[..., None]
        spring = np.where(bonded, dist - bond_length, 0.0)
        force -= np.einsum("ij,ijk->ik", spring, unit)
        close = (~bonded) & (dist < REPULSION_RANGE)
        np.fill_diagonal(close, False)
        push = np.where(close, REPULSION_RANGE - dist, 0.0)
        force += np.einsum("ij,ijk->ik", push, unit)
        coords += step * force
    return coords


def _random_unit(rng: np.random.Generator) -> np.ndarray:
    while True:
        u = rng.standard_normal(3)
        norm = np.linalg.norm(u)
        if norm > 1e-6:
            return u / norm


def gen_molecule(spec: GenSpec, rng: np.random.Generator) -> mg.Molecule3D:
    """One random molecule: tree growth respecting valences, optional ring
    closures between nearby valence-free nodes, relaxed 3D layout."""
    n_target = int(rng.integers(spec.n_min, spec.n_max + 1))
    weights = np.asarray(spec.type_weights) / np.sum(spec.type_weights)
    types = [int(rng.choice(len(weights), p=weights))]
    coords = [np.zeros(3)]
    edges: list[tuple[int, int]] = []
    free = [spec.valences[types[0]]]
    while len(types) < n_target:
        open_nodes = [i for i, f in enumerate(free) if f > 0]
        if not open_nodes:
            break
        parent = int(open_nodes[int(rng.integers(len(open_nodes)))])
        t = int(rng.choice(len(weights), p=weights))
        idx = len(types)
        types.append(t)
        coords.append(coords[parent] + spec.bond_length * _random_unit(rng))
        edges.append((parent, idx))
        free[parent] -= 1
        free.append(spec.valences[t] - 1)
    pos = _relax(np.array(coords), edges, spec.bond_length, spec.relax_iters)
    # ring closures between nearby nodes that still have free valence
    rings = 0
    n = len(types)
    adj = {tuple(sorted(e)) for e in edges}
    for i in range(n):
        for j in range(i + 1, n):
            if rings >= spec.max_ring_edges:
                break
            if (i, j) in adj or free[i] <= 0 or free[j] <= 0:
                continue
            if np.linalg.norm(pos[i] - pos[j]) < 1.3 * spec.bond_length \
                    and rng.random() < spec.ring_prob:
                edges.append((i, j))
                adj.add((i, j))
                free[i] -= 1
                free[j] -= 1
                rings += 1
    if rings:
        pos = _relax(pos, edges, spec.bond_length, spec.relax_iters)
    return mg.Molecule3D(tuple(types), tuple(edges), pos)


def _well_separated(mol: mg.Molecule3D) -> bool:
    d = np.linalg.norm(mol.coords[:, None, :] - mol.coords[None, :, :], axis=-1)
    np.fill_diagonal(d, np.inf)
    return bool(d.min() > MIN_SEPARATION)


def gen_dataset(n: int, spec: GenSpec, seed: int, min_frag: int = 1,
                min_linker: int = 2, max_tries_per_sample: int = 200
                ) -> list[mg.LinkerSample]:
    """n linker samples with BFS traces; molecules without a valid double cut
    are regenerated.  Per-sample RNG streams derive from the master seed."""
    if n < 1:
        raise ValueError("n must be >= 1")
    master = np.random.default_rng(seed)
    out = []
    for k in range(n):
        sub = np.random.default_rng(master.integers(0, 2**63))
        for _ in range(max_tries_per_sample):
            mol = gen_molecule(spec, sub)
            if mol.n < spec.n_min or not _well_separated(mol):
                continue
            cuts = mg.cut_linker(mol, min_frag=min_frag, min_linker=min_linker)
            if not cuts:
                continue
            pick = cuts[int(sub.integers(len(cuts)))]
            out.append(mg.canonicalize_linker_order(pick))
            break
        else:
            raise GenerationBudgetError(
                f"sample {k}: no valid decomposition within {max_tries_per_sample} tries")
    return out


def write_manifest(path, spec: GenSpec, seed: int, count: int) -> None:
    obj = {"seed": seed, "spec": asdict(spec), "count": count}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(obj, sort_keys=True) + "\n")
