"""Growth and inspection of branching random walks on the Ulam–Harris tree.

A :class:`BrwTree` stores one array per generation.  Children are generated
parent by parent, so the descendants of any node at any later generation form
a contiguous slice of that generation.  A tree may have several roots (a
*forest*); each root is an independent replica and generation arrays carry
the root index of every particle, which lets per-replica sums run as a single
``bincount`` over a generation.

For lattice laws :func:`lattice_occupation_statistics` offers a much faster
route to per-replica martingale values: it only tracks how many particles sit
on each lattice site, which is all the additive, derivative and truncated
martingales depend on.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BudgetExceeded, CapExceeded, DepthOutOfRange, InvalidNode
from .offspring import OffspringLaw, _sample_counts, _sample_displacements

__all__ = [
    "NodeId",
    "BrwTree",
    "grow_tree",
    "grow_forest",
    "generation_positions",
    "min_position",
    "ancestral_path",
    "ancestral_paths",
    "many_to_one_expectation",
    "ManyToOneResult",
    "dump_tree",
    "load_tree",
    "lattice_occupation_statistics",
    "DEFAULT_CAP",
]

#: Default population cap per generation.
DEFAULT_CAP = 2**25


@dataclass(frozen=True)
class NodeId:
    """Generation and flat index of a particle."""

    generation: int
    index: int


@dataclass(frozen=True)
class BrwTree:
    """A branching random walk grown to a finite depth.

    Attributes
    ----------
    positions : list of ndarray
        ``positions[n]`` holds ``V(x)`` for ``|x| = n`` in flat-index order.
    displacements : list of ndarray
        Displacement from the parent (zeros at generation 0).
    parents : list of ndarray
        Flat index of the parent in generation ``n - 1`` (``-1`` for roots).
    prefix_min : list of ndarray
        ``min`` of ``V`` over the ancestral line including the root and the node.
    roots : list of ndarray
        Root index (replica) of every particle.
    child_offsets : list of ndarray
        ``child_offsets[n][i]:child_offsets[n][i+1]`` is the slice of
        generation ``n + 1`` holding the children of node ``(n, i)``.
    depth : int
        Number of generations requested.  Generations after extinction are
        present and empty.
    extinct : bool
        True when some generation ``<= depth`` is empty.
    """

    positions: list
    displacements: list
    parents: list
    prefix_min: list
    roots: list
    child_offsets: list
    depth: int
    extinct: bool
    n_roots: int = 1
    law_fingerprint: str = ""
    law: OffspringLaw | None = field(default=None, compare=False)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def populations(self) -> tuple[int, ...]:
        return tuple(len(p) for p in self.positions)

    def check_generation(self, n: int) -> None:
        if not 0 <= n <= self.depth:
            raise DepthOutOfRange(f"generation {n} outside [0, {self.depth}]")

    def check_node(self, node: NodeId) -> None:
        if not 0 <= node.generation <= self.depth:
            raise InvalidNode(f"generation {node.generation} not grown")
        if not 0 <= node.index < len(self.positions[node.generation]):
            raise InvalidNode(f"no node {node.index} in generation {node.generation}")

    def descendant_range(self, node: NodeId, n: int) -> tuple[int, int]:
        """Slice ``[lo, hi)`` of generation ``n`` holding the descendants of ``node``."""
        self.check_node(node)
        self.check_generation(n)
        if n < node.generation:
            raise DepthOutOfRange("descendants requested above the node")
        lo, hi = node.index, node.index + 1
        for g in range(node.generation, n):
            off = self.child_offsets[g]
            lo, hi = int(off[lo]), int(off[hi])
        return lo, hi

    def children(self, node: NodeId) -> list[NodeId]:
        """Children of ``node`` (empty at the last grown generation)."""
        self.check_node(node)
        if node.generation == self.depth:
            return []
        off = self.child_offsets[node.generation]
        return [NodeId(node.generation + 1, j) for j in range(int(off[node.index]), int(off[node.index + 1]))]

    def root_sum(self, n: int, values: np.ndarray) -> np.ndarray:
        """Per-root sums of ``values`` over generation ``n`` (sequential, fixed order)."""
        return np.bincount(self.roots[n], weights=values, minlength=self.n_roots)


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def grow_forest(law: OffspringLaw, depth: int, n_roots: int, rng: np.random.Generator,
                cap: int = DEFAULT_CAP) -> BrwTree:
    """Grow ``n_roots`` independent trees simultaneously.

    The cap applies to the total population of a generation across roots.

    Raises
    ------
    CapExceeded
        Carrying the forest grown up to the last complete generation.
    """
    if depth < 0 or cap < 1 or n_roots < 1:
        raise ValueError("need depth >= 0, cap >= 1 and n_roots >= 1")
    if n_roots > cap:
        raise CapExceeded("root population exceeds cap", None, 0)
    pos = [np.zeros(n_roots)]
    disp = [np.zeros(n_roots)]
    par = [np.full(n_roots, -1, dtype=np.int64)]
    pmin = [np.zeros(n_roots)]
    roots = [np.arange(n_roots, dtype=np.int64)]
    offsets = []
    extinct = False
    for g in range(depth):
        npar = len(pos[-1])
        counts = _sample_counts(law, npar, rng) if npar else np.zeros(0, dtype=np.int64)
        total = int(counts.sum())
        if total > cap:
            partial = _assemble(pos, disp, par, pmin, roots, offsets, g, extinct, n_roots, law)
            raise CapExceeded(f"generation {g + 1} would hold {total} > cap {cap}", partial, g + 1)
        d = _sample_displacements(law, total, rng)
        parent = np.repeat(np.arange(npar, dtype=np.int64), counts)
        offsets.append(np.concatenate(([0], np.cumsum(counts))).astype(np.int64))
        v = pos[-1][parent] + d
        pos.append(v)
        disp.append(d)
        par.append(parent)
        pmin.append(np.minimum(pmin[-1][parent], v))
        roots.append(roots[-1][parent])
        if total == 0:
            extinct = True
    return _assemble(pos, disp, par, pmin, roots, offsets, depth, extinct, n_roots, law)


def _assemble(pos, disp, par, pmin, roots, offsets, depth, extinct, n_roots, law):
    offsets = list(offsets)
    if len(offsets) < len(pos):
        # last generation has no children yet
        offsets.append(np.zeros(len(pos[-1]) + 1, dtype=np.int64))
    return BrwTree(
        positions=[_freeze(a) for a in pos],
        displacements=[_freeze(a) for a in disp],
        parents=[_freeze(a) for a in par],
        prefix_min=[_freeze(a) for a in pmin],
        roots=[_freeze(a) for a in roots],
        child_offsets=[_freeze(a) for a in offsets],
        depth=len(pos) - 1,
        extinct=extinct,
        n_roots=n_roots,
        law_fingerprint=law.fingerprint(),
        law=law,
    )


def grow_tree(law: OffspringLaw, depth: int, cap: int = DEFAULT_CAP,
              rng: np.random.Generator | None = None) -> BrwTree:
    """Grow a single branching random walk to ``depth`` generations.

    Parameters
    ----------
    law : OffspringLaw
    depth : int
        Number of generations, ``>= 0``.
    cap : int
        Maximal population of any generation.
    rng : numpy.random.Generator

    Returns
    -------
    BrwTree
        Realized to exactly ``depth`` generations; generations after an
        extinction are empty and ``extinct`` is set.
    """
    if rng is None:
        raise ValueError("an explicit random generator is required")
    return grow_forest(law, depth, 1, rng, cap)


def generation_positions(tree: BrwTree, n: int) -> np.ndarray:
    """Positions ``V(x)``, ``|x| = n``, in flat-index order."""
    tree.check_generation(n)
    return tree.positions[n]


def min_position(tree: BrwTree) -> float:
    """Minimum of ``V`` over every grown particle (the root included)."""
    return float(min(p.min() for p in tree.positions if len(p)))


def ancestral_path(tree: BrwTree, node: NodeId) -> np.ndarray:
    """``(V(x_1), ..., V(x_n))`` along the ancestral line of ``node``."""
    tree.check_node(node)
    out = np.empty(node.generation)
    i = node.index
    for g in range(node.generation, 0, -1):
        out[g - 1] = tree.positions[g][i]
        i = int(tree.parents[g][i])
    return out


def ancestral_paths(tree: BrwTree, n: int) -> np.ndarray:
    """Matrix of ancestral paths of all generation-``n`` particles, shape ``(pop, n)``."""
    tree.check_generation(n)
    idx = np.arange(len(tree.positions[n]))
    out = np.empty((len(idx), n))
    for g in range(n, 0, -1):
        out[:, g - 1] = tree.positions[g][idx]
        idx = tree.parents[g][idx]
    return out


@dataclass(frozen=True)
class ManyToOneResult:
    """Paired estimates of the two sides of the many-to-one identity."""

    lhs: float
    rhs: float
    lhs_se: float
    rhs_se: float

    def intervals_overlap(self, z: float = 2.5758293035489004) -> bool:
        """Whether the two ``z``-sigma confidence intervals overlap (99% default)."""
        return abs(self.lhs - self.rhs) <= z * (self.lhs_se + self.rhs_se)


def many_to_one_expectation(law: OffspringLaw, g, n: int, reps: int, rng: np.random.Generator,
                            budget: int = 2**27):
    """Estimate both sides of the many-to-one formula.

    Parameters
    ----------
    law : OffspringLaw
        A boundary-normalized law.
    g : callable or dict of callables
        Path functional mapping an array of shape ``(k, n)`` of paths
        ``(x_1, ..., x_n)`` to ``k`` values.
    n : int
        Path length, ``>= 1``.
    reps : int
        Number of BRW replicas and of walk replicas.
    budget : int
        Upper bound on ``reps * E[N]^n`` particles.

    Returns
    -------
    ManyToOneResult or dict of ManyToOneResult
    """
    from .walk import associated_walk

    if n < 1:
        raise ValueError("n must be >= 1")
    expected = reps * law.mean_count**n
    if expected > budget:
        raise BudgetExceeded(f"about {expected:.3g} particles exceed budget {budget}")
    funcs = g if isinstance(g, dict) else {"g": g}
    walk = associated_walk(law)
    block = max(1, int(budget // max(1.0, 4 * law.mean_count**n)))
    block = min(block, reps, 1 << 14)
    lhs_vals = {k: np.empty(reps) for k in funcs}
    start = 0
    while start < reps:
        size = min(block, reps - start)
        forest = grow_forest(law, n, size, rng, cap=max(DEFAULT_CAP, budget))
        paths = ancestral_paths(forest, n)
        w = np.exp(-forest.positions[n])
        for k, f in funcs.items():
            vals = np.asarray(f(paths), dtype=float) * w if len(paths) else np.zeros(0)
            lhs_vals[k][start:start + size] = forest.root_sum(n, vals)
        start += size
    steps = walk.sample((reps, n), rng)
    walk_paths = np.cumsum(steps, axis=1)
    out = {}
    for k, f in funcs.items():
        rv = np.asarray(f(walk_paths), dtype=float)
        lv = lhs_vals[k]
        out[k] = ManyToOneResult(
            lhs=float(lv.mean()), rhs=float(rv.mean()),
            lhs_se=float(lv.std(ddof=1) / math.sqrt(reps)),
            rhs_se=float(rv.std(ddof=1) / math.sqrt(reps)),
        )
    return out if isinstance(g, dict) else out["g"]


# ----------------------------------------------------------------------
# Columnar dump
# ----------------------------------------------------------------------
_MAGIC = b"BRWTREE1\n"


def dump_tree(tree: BrwTree, path) -> None:
    """Write a columnar little-endian binary dump of ``tree``.

    Layout: a magic line, one JSON header line, then for each generation the
    positions and displacements as ``<f8`` and the parent indices as ``<i8``.
    """
    header = {
        "depth": tree.depth,
        "populations": list(tree.populations),
        "n_roots": tree.n_roots,
        "extinct": tree.extinct,
        "law": tree.law_fingerprint,
    }
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for g in range(tree.depth + 1):
            fh.write(np.asarray(tree.positions[g], dtype="<f8").tobytes())
            fh.write(np.asarray(tree.displacements[g], dtype="<f8").tobytes())
            fh.write(np.asarray(tree.parents[g], dtype="<i8").tobytes())


def load_tree(path) -> BrwTree:
    """Read a dump written by :func:`dump_tree`."""
    with open(path, "rb") as fh:
        if fh.readline() != _MAGIC:
            raise ValueError("not a tree dump")
        header = json.loads(fh.readline())
        buf = io.BytesIO(fh.read())
    pos, disp, par, pmin, roots, offsets = [], [], [], [], [], []
    for g, size in enumerate(header["populations"]):
        pos.append(np.frombuffer(buf.read(8 * size), dtype="<f8").astype(float))
        disp.append(np.frombuffer(buf.read(8 * size), dtype="<f8").astype(float))
        par.append(np.frombuffer(buf.read(8 * size), dtype="<i8").astype(np.int64))
        if g == 0:
            pmin.append(np.minimum(pos[0], 0.0))
            roots.append(np.arange(size, dtype=np.int64))
        else:
            pmin.append(np.minimum(pmin[-1][par[-1]], pos[-1]))
            roots.append(roots[-1][par[-1]])
            counts = np.bincount(par[-1], minlength=len(pos[-2]))
            offsets.append(np.concatenate(([0], np.cumsum(counts))).astype(np.int64))
    offsets.append(np.zeros(len(pos[-1]) + 1, dtype=np.int64))
    return BrwTree(
        positions=[_freeze(a) for a in pos], displacements=[_freeze(a) for a in disp],
        parents=[_freeze(a) for a in par], prefix_min=[_freeze(a) for a in pmin],
        roots=[_freeze(a) for a in roots], child_offsets=[_freeze(a) for a in offsets],
        depth=header["depth"], extinct=header["extinct"], n_roots=header["n_roots"],
        law_fingerprint=header["law"],
    )


# ----------------------------------------------------------------------
# Occupation counts for lattice laws
# ----------------------------------------------------------------------
def lattice_occupation_statistics(law: OffspringLaw, depth: int, reps: int, rng: np.random.Generator,
                                  *, alphas=(), renewal=None, betas=(), chunk: int = 8192) -> dict:
    """Per-replica martingale values for a lattice law from site occupation counts.

    Only the number of particles on each lattice site (split by which
    barriers ``-alpha`` their ancestral line has crossed) is simulated.  The
    joint law of these counts is the same as in the full tree, so every
    statistic that depends on positions and prefix minima only is exact in
    distribution.

    Parameters
    ----------
    law : OffspringLaw
        A finite-atom lattice law.
    depth, reps : int
    alphas : sequence of float
        Barrier levels for truncated martingales and survival-above-barrier flags.
    renewal : RenewalTable
        Needed when ``alphas`` is non-empty.
    betas : sequence of float
        Inverse temperatures for partition functions ``Z_beta``.

    Returns
    -------
    dict
        ``"W"``, ``"D"``, ``"N"`` (population): arrays of shape ``(reps, depth+1)``;
        ``"D_alpha"``: dict alpha -> array; ``"Z"``: dict beta -> array;
        ``"stayed_above"``: dict alpha -> bool array (no particle below ``-alpha``).
    """
    if law.family != "atoms" or not law.is_lattice:
        raise ValueError("occupation counts need a lattice law")
    if depth * math.log2(max(2, law.max_count)) > 62:
        raise ValueError("occupation counts would overflow 64-bit integers at this depth")
    alphas = [float(a) for a in alphas]
    if alphas and renewal is None:
        raise ValueError("truncated martingales need a renewal table")
    order = np.argsort(alphas, kind="stable")
    sorted_alphas = [alphas[i] for i in order]
    span = law.lattice_span
    shifts = np.rint(np.asarray(law.atoms) / span).astype(np.int64)
    reach = int(np.max(np.abs(shifts))) * depth
    nsite = 2 * reach + 1
    site_pos = (np.arange(nsite) - reach) * span
    # barrier -alpha allows sites k with k*span >= -alpha (1e-9 slack for rounding)
    kmin = [int(math.ceil(-a / span - 1e-9)) + reach for a in sorted_alphas]
    nclass = len(alphas) + 1
    violated = np.zeros(nsite, dtype=np.int64)
    for k in kmin:
        violated += (np.arange(nsite) < k).astype(np.int64)
    counts_v = np.asarray(law.count_values, dtype=np.int64)
    count_p = np.asarray(law.count_probs, dtype=float)
    atom_p = np.asarray(law.atom_probs, dtype=float)
    ew = np.exp(-site_pos)
    out = {
        "W": np.empty((reps, depth + 1)),
        "D": np.empty((reps, depth + 1)),
        "N": np.empty((reps, depth + 1), dtype=np.int64),
        "D_alpha": {a: np.empty((reps, depth + 1)) for a in alphas},
        "Z": {b: np.empty((reps, depth + 1)) for b in betas},
        "stayed_above": {a: np.ones(reps, dtype=bool) for a in alphas},
    }
    r_weights = {a: renewal(site_pos + a) * ew for a in alphas}
    for start in range(0, reps, chunk):
        size = min(chunk, reps - start)
        sl = slice(start, start + size)
        occ = np.zeros((nclass, size, nsite), dtype=np.int64)
        occ[0, :, reach] = 1
        max_class = np.zeros(size, dtype=np.int64)
        for g in range(depth + 1):
            tot = occ.sum(axis=0)
            out["N"][sl, g] = tot.sum(axis=1)
            out["W"][sl, g] = tot @ ew
            out["D"][sl, g] = tot @ (site_pos * ew)
            for b in betas:
                out["Z"][b][sl, g] = tot @ np.exp(-b * site_pos)
            for rank, i in enumerate(order):
                a = alphas[i]
                alive = occ[: rank + 1].sum(axis=0)
                out["D_alpha"][a][sl, g] = alive @ r_weights[a]
            for c in range(nclass):
                present = occ[c].sum(axis=1) > 0
                max_class = np.where(present, np.maximum(max_class, c), max_class)
            if g == depth:
                break
            new = np.zeros_like(occ)
            for c in range(nclass):
                if not occ[c].any():
                    continue
                if len(counts_v) == 1:
                    nchild = counts_v[0] * occ[c]
                else:
                    nchild = rng.multinomial(occ[c], count_p) @ counts_v
                if len(shifts) == 2:
                    first = rng.binomial(nchild, atom_p[0])
                    parts = (first, nchild - first)
                else:
                    split = rng.multinomial(nchild, atom_p)
                    parts = tuple(split[..., j] for j in range(len(shifts)))
                for j, part in zip(shifts, parts):
                    moved = np.zeros_like(part)
                    if j >= 0:
                        moved[:, j:] = part[:, : nsite - j]
                    else:
                        moved[:, :j] = part[:, -j:]
                    target = np.maximum(c, violated)
                    for t in np.unique(target):
                        mask = target == t
                        new[t][:, mask] += moved[:, mask]
            occ = new
        for rank, i in enumerate(order):
            out["stayed_above"][alphas[i]][sl] = max_class <= rank
    return out
