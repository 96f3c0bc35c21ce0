"""Deterministic execution of configured experiments.

Replicas ``0..reps-1`` are cut into blocks of ``params.block`` consecutive
indices.  Blocks run on a process pool and are merged strictly in block
order, so the outputs do not depend on the number of workers or on
scheduling.  Replica ``r`` draws from ``derive_stream(seed, r, purpose)``;
the batched spine-envelope experiment draws one stream per block, keyed by
the block's first replica.  Shared inputs (offspring law, renewal table,
side-subtree pool) are built once, deterministically, in the parent.
"""

from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import json
import math
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .brw import NodeId, dump_tree, grow_tree, lattice_occupation_statistics, min_position
from .cascade import ball_mass_estimate, martingale_trace, partition_function
from .config import ExperimentConfig, build_law, dump_config
from .envelope import PsiSpec, envelope_exceedance, lil_envelope, psi_envelope
from .errors import ConfigInvalid, WorkerFailure
from .offspring import boundary_diagnostics, partition_rate
from .rng import Purpose, derive_stream, stream_state
from .spine import SidePool, sample_spine, sample_spines, spine_log_masses
from .walk import associated_walk, build_renewal, conditioned_paths

__all__ = ["RunManifest", "run", "parse_psi"]


@dataclass
class RunManifest:
    """Record of one run.

    ``outputs`` lists every data file with its SHA-256; the manifest itself
    and the copied configuration are not part of the inventory.
    """

    config_hash: str
    code_version: str
    kind: str
    seed: int
    reps: int
    workers: int
    started: str
    finished: str = ""
    seed_derivation: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    complete: bool = True
    failures: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True, default=_json_default)


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(type(obj).__name__)


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _f(x) -> str:
    return repr(float(x))


def parse_psi(text: str) -> PsiSpec:
    """``"iterated:k"``, ``"perturbed:k:eps"`` or ``"user:<expression>"``."""
    family, _, rest = text.partition(":")
    family = family.strip()
    if family == "user":
        return PsiSpec("user", expr=rest.strip())
    parts = [p for p in rest.split(":") if p.strip()]
    try:
        if family == "iterated":
            return PsiSpec("iterated", int(parts[0]))
        if family == "perturbed":
            return PsiSpec("perturbed", int(parts[0]), float(parts[1]))
    except (IndexError, ValueError) as exc:
        raise ConfigInvalid(f"bad psi envelope {text!r}") from exc
    raise ConfigInvalid(f"bad psi envelope {text!r}")


# ----------------------------------------------------------------------
# Shared state for worker processes
# ----------------------------------------------------------------------
_SHARED: dict = {}


def _init_worker(shared: dict) -> None:
    _SHARED.clear()
    _SHARED.update(shared)


def _renewal_for(cfg: ExperimentConfig, law, max_alpha: float):
    walk = associated_walk(law)
    method = None if cfg.params.renewal_method == "auto" else cfg.params.renewal_method
    u_max = max(cfg.params.u_max, max_alpha + 10 * walk.sigma)
    rng = derive_stream(cfg.seed, 0, Purpose.RENEWAL)
    return build_renewal(walk, u_max=u_max, method=method, rng=rng, reps=cfg.params.mc_budget)


# ----------------------------------------------------------------------
# Per-block work
# ----------------------------------------------------------------------
def _block_grow(cfg, start, stop):
    law = _SHARED["law"]
    rows, trees = [], []
    for r in range(start, stop):
        tree = grow_tree(law, cfg.params.depth, cfg.params.cap, derive_stream(cfg.seed, r, Purpose.TREE))
        mins = [float(p.min()) if len(p) else math.nan for p in tree.positions]
        for n, pop in enumerate(tree.populations):
            rows.append((r, n, pop, mins[n]))
        if cfg.params.retain_trees:
            trees.append((r, tree))
    return {"rows": rows, "trees": trees}


def _block_martingales(cfg, start, stop):
    law, R = _SHARED["law"], _SHARED["renewal"]
    p = cfg.params
    rows, balls = [], []
    for r in range(start, stop):
        tree = grow_tree(law, p.depth, p.cap, derive_stream(cfg.seed, r, Purpose.TREE))
        for a in p.alpha:
            tr = martingale_trace(tree, a, R)
            for n in range(p.depth + 1):
                rows.append((r, n, tr.W[n], tr.D[n], a, tr.D_alpha[n], tr.sqrtn_W[n]))
            if p.depth >= 1:
                for i in range(len(tree.positions[1])):
                    est = ball_mass_estimate(tree, NodeId(1, i), a, p.depth - 1, R, _SHARED["sigma2"])
                    balls.append((r, str(i), a, est.m, est.mu_alpha, est.mu, est.valid, est.rel_change))
    return {"rows": rows, "balls": balls}


def _block_cwalk(cfg, start, stop):
    walk, R = _SHARED["walk"], _SHARED["renewal"]
    alpha = cfg.params.alpha[0]
    rows = []
    for r in range(start, stop):
        path = conditioned_paths(walk, R, alpha, cfg.params.steps, 1,
                                 derive_stream(cfg.seed, r, Purpose.CONDITIONED))[0]
        rows.extend((r, k + 1, s) for k, s in enumerate(path))
    return {"rows": rows}


def _block_spine(cfg, start, stop):
    law, R, pool = _SHARED["law"], _SHARED["renewal"], _SHARED.get("pool")
    p = cfg.params
    rows = []
    for r in range(start, stop):
        sp = sample_spine(law, R, p.alpha[0], p.depth, p.side_depth, p.side_cap,
                          derive_stream(cfg.seed, r, Purpose.SPINE), side_mode=p.side_mode, pool=pool)
        for k in range(p.depth):
            rows.append((r, k, sp.positions[k], sp.dhat[k], bool(sp.side_cap_hit[k])))
        rows.append((r, p.depth, sp.positions[p.depth], math.nan, False))
    return {"rows": rows}


def _block_envelope(cfg, start, stop):
    law, R, pool = _SHARED["law"], _SHARED["renewal"], _SHARED["pool"]
    p = cfg.params
    N = p.depth
    tail = p.tail_window if p.tail_window > 0 else 3 * N
    batch = sample_spines(law, R, p.alpha[0], N + tail, p.side_depth, stop - start,
                          derive_stream(cfg.seed, start, Purpose.SPINE), pool)
    lm = spine_log_masses(batch.positions, batch.dhat)[:, 1:N + 1]
    return {"log_mass": lm, "positions": batch.positions[:, 1:N + 1], "clipped": batch.clipped}


def _block_phase(cfg, start, stop):
    law = _SHARED["law"]
    p = cfg.params
    rows = []
    for r in range(start, stop):
        rng = derive_stream(cfg.seed, r, Purpose.TREE)
        if law.family == "atoms" and law.is_lattice and p.depth * math.log2(max(2, law.max_count)) <= 62:
            z = lattice_occupation_statistics(law, p.depth, 1, rng, betas=p.betas)["Z"]
            vals = {b: z[b][0] for b in p.betas}
        else:
            tree = grow_tree(law, p.depth, p.cap, rng)
            vals = {b: np.array([partition_function(tree, b, n, law)[0] for n in range(p.depth + 1)])
                    for b in p.betas}
        for b in p.betas:
            for n in range(1, p.depth + 1):
                rows.append((r, n, b, vals[b][n], _normalization(law, b, n)))
    return {"rows": rows}


def _normalization(law, beta, n):
    if beta < 1:
        return partition_rate(law, beta) ** (-n)
    if beta == 1:
        return math.sqrt(n)
    return float(n) ** (1.5 * beta)


_BLOCK_FUNCS = {
    "grow": _block_grow,
    "tree-martingales": _block_martingales,
    "conditioned-walk": _block_cwalk,
    "spine": _block_spine,
    "spine-envelope": _block_envelope,
    "phase-scan": _block_phase,
}


def _run_block(kind, cfg_text, start, stop):
    from .config import parse_config

    cfg = parse_config(cfg_text)
    try:
        return ("ok", _BLOCK_FUNCS[kind](cfg, start, stop))
    except Exception as exc:  # reported to the parent, which keeps the other blocks
        return ("error", f"{type(exc).__name__}: {exc}\n{traceback.format_exc()}")


# ----------------------------------------------------------------------
# Writers
# ----------------------------------------------------------------------
def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_f(v) if isinstance(v, (float, np.floating)) else
                        (str(bool(v)).lower() if isinstance(v, (bool, np.bool_)) else
                         ("" if v is None else v)) for v in row])


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _inventory(out: Path, names) -> list:
    return [{"path": n, "sha256": _sha256(out / n), "bytes": (out / n).stat().st_size} for n in sorted(names)]


def _thin_grid(N: int, points: int = 256) -> np.ndarray:
    g = np.unique(np.round(np.geomspace(1, N, points)).astype(np.int64))
    return g[(g >= 1) & (g <= N)]


# ----------------------------------------------------------------------
# Main entry
# ----------------------------------------------------------------------
def run(config: ExperimentConfig, log=None) -> RunManifest:
    """Execute ``config`` and write its outputs and ``manifest.json`` to ``config.out``.

    Raises
    ------
    ConfigInvalid
        If the configuration is invalid.
    WorkerFailure
        If some block failed; completed blocks are written and the manifest
        is marked incomplete.
    """
    cfg = config.validate()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.ini", "w") as fh:
        fh.write(dump_config(cfg))
    manifest = RunManifest(config_hash=cfg.hash(), code_version=__version__, kind=cfg.kind,
                           seed=cfg.seed, reps=cfg.reps, workers=cfg.workers, started=_now())
    manifest.seed_derivation = {
        "scheme": "Philox-4x64; key = SeedSequence(seed).generate_state(2, uint64); "
                  "counter = (0, 0, replica, purpose)",
        "purposes": {p.name.lower(): int(p) for p in Purpose},
        "example_state_replica0_generic": list(stream_state(cfg.seed, 0, 0)),
    }
    written: list[str] = []
    if cfg.kind == "verify":
        _run_verify(cfg, out, manifest, written)
    elif cfg.kind == "model-diagnose":
        _run_diagnose(cfg, out, manifest, written)
    elif cfg.kind == "renewal":
        law = build_law(cfg.model)
        R = _renewal_for(cfg, law, max(cfg.params.alpha))
        R.to_csv(out / "renewal.csv")
        written.append("renewal.csv")
        manifest.summary = {"method": R.method, "c0": R.c0, "u_max": R.u_max}
    else:
        _run_replicated(cfg, out, manifest, written, log)
    manifest.outputs = _inventory(out, written)
    manifest.finished = _now()
    manifest.to_json(out / "manifest.json")
    if not manifest.complete:
        raise WorkerFailure(f"{len(manifest.failures)} block(s) failed; see {out / 'manifest.json'}")
    return manifest


def _run_diagnose(cfg, out, manifest, written):
    law = build_law(cfg.model)
    res = {"law": law.fingerprint(), "mean_count": law.mean_count, "supercritical": law.is_supercritical}
    for method in ("closed-form", "quadrature"):
        if method == "closed-form" and law.family != "atoms":
            continue
        res[method] = asdict(boundary_diagnostics(law, method))
    res["monte-carlo"] = asdict(boundary_diagnostics(law, "monte-carlo", cfg.params.mc_budget,
                                                     derive_stream(cfg.seed, 0, Purpose.DIAGNOSTICS)))
    with open(out / "diagnostics.json", "w") as fh:
        json.dump(res, fh, indent=2, sort_keys=True, default=_json_default)
    written.append("diagnostics.json")
    manifest.summary = {"boundary": boundary_diagnostics(law, "quadrature").is_boundary()}


def _run_verify(cfg, out, manifest, written):
    from .acceptance import run_suite

    results = run_suite(cfg.seed, cfg.params.profile)
    with open(out / "verify.json", "w") as fh:
        json.dump([r.to_dict() for r in results], fh, indent=2, sort_keys=True)
    written.append("verify.json")
    manifest.summary = {"passed": [r.number for r in results if r.passed],
                        "failed": [r.number for r in results if not r.passed]}


def _run_replicated(cfg, out, manifest, written, log):
    law = build_law(cfg.model)
    shared = {"law": law}
    p = cfg.params
    if cfg.kind in ("tree-martingales", "conditioned-walk", "spine", "spine-envelope"):
        shared["renewal"] = _renewal_for(cfg, law, max(p.alpha))
        shared["walk"] = associated_walk(law)
        shared["sigma2"] = boundary_diagnostics(law, "quadrature").sigma2
    if cfg.kind in ("spine", "spine-envelope") and (cfg.kind == "spine-envelope" or p.side_mode == "pool"):
        shared["pool"] = SidePool.build(law, p.side_depth, p.pool_size,
                                        derive_stream(cfg.seed, 0, Purpose.POOL), p.side_cap)
    blocks = [(s, min(s + p.block, cfg.reps)) for s in range(0, cfg.reps, p.block)]
    manifest.seed_derivation["blocks"] = [list(b) for b in blocks]
    manifest.seed_derivation["stream_unit"] = "block" if cfg.kind == "spine-envelope" else "replica"
    text = dump_config(cfg)
    if cfg.workers == 1:
        _init_worker(shared)
        results = [_run_block(cfg.kind, text, a, b) for a, b in blocks]
    else:
        with ProcessPoolExecutor(max_workers=cfg.workers, initializer=_init_worker, initargs=(shared,)) as ex:
            futs = [ex.submit(_run_block, cfg.kind, text, a, b) for a, b in blocks]
            results = []
            for (a, b), fut in zip(blocks, futs):
                try:
                    results.append(fut.result())
                except Exception as exc:  # a worker process died
                    results.append(("error", f"{type(exc).__name__}: {exc}"))
    good = []
    for (a, b), (status, payload) in zip(blocks, results):
        if status == "ok":
            good.append(payload)
        else:
            manifest.complete = False
            manifest.failures.append({"replicas": [a, b], "error": payload})
    _merge(cfg, out, law, shared, good, manifest, written)


def _merge(cfg, out, law, shared, parts, manifest, written):
    p = cfg.params
    kind = cfg.kind
    if kind == "grow":
        _write_csv(out / "populations.csv", ["replica_id", "n", "population", "min_V"],
                   [row for part in parts for row in part["rows"]])
        written.append("populations.csv")
        if p.retain_trees:
            (out / "trees").mkdir(exist_ok=True)
            for part in parts:
                for r, tree in part["trees"]:
                    name = f"trees/replica_{r:06d}.brw"
                    dump_tree(tree, out / name)
                    written.append(name)
    elif kind == "tree-martingales":
        _write_csv(out / "martingales.csv",
                   ["replica_id", "n", "W_n", "D_n", "alpha", "D_n_alpha", "sqrtn_W_n"],
                   [row for part in parts for row in part["rows"]])
        _write_csv(out / "ball_masses.csv",
                   ["replica_id", "node_path", "alpha", "m", "mu_alpha", "mu", "valid", "rel_change"],
                   [row for part in parts for row in part["balls"]])
        written += ["martingales.csv", "ball_masses.csv"]
    elif kind == "conditioned-walk":
        _write_csv(out / "cwalk.csv", ["replica", "k", "S_k"], [row for part in parts for row in part["rows"]])
        written.append("cwalk.csv")
    elif kind == "spine":
        _write_csv(out / "spine.csv", ["replica", "k", "V_wk", "dhat_k", "side_cap_hit"],
                   [row for part in parts for row in part["rows"]])
        written.append("spine.csv")
    elif kind == "phase-scan":
        rows = [row for part in parts for row in part["rows"]]
        _write_csv(out / "partition.csv", ["replica_id", "n", "beta", "Z", "normalization"], rows)
        med = []
        if rows:
            arr = np.array([(n, b, z * norm) for _, n, b, z, norm in rows])
            for b in p.betas:
                for n in range(1, p.depth + 1):
                    sel = (arr[:, 0] == n) & (arr[:, 1] == b)
                    med.append((b, n, float(np.median(arr[sel, 2]))))
        _write_csv(out / "phase_scan.csv", ["beta", "n", "median_normalized_Z"], med)
        written += ["partition.csv", "phase_scan.csv"]
    elif kind == "spine-envelope":
        _merge_envelope(cfg, out, shared, parts, manifest, written)


def _merge_envelope(cfg, out, shared, parts, manifest, written):
    p = cfg.params
    if not parts:
        return
    lm = np.concatenate([part["log_mass"] for part in parts])
    pos = np.concatenate([part["positions"] for part in parts])
    N = p.depth
    ns = np.arange(1, N + 1)
    grid = _thin_grid(N)
    rows = [(r, int(n), pos[r, n - 1], -lm[r, n - 1]) for r in range(lm.shape[0]) for n in grid]
    _write_csv(out / "spine_masses.csv", ["replica", "n", "V_wn", "neg_log_mass"], rows)
    written.append("spine_masses.csv")
    s2 = shared["sigma2"]
    envs = {
        "lil_lower": (lil_envelope(s2, 1 + p.delta), "above"),
        "lil_upper": (lil_envelope(s2, 1 - p.delta), "above"),
        "psi": (psi_envelope(parse_psi(p.psi)), "below"),
    }
    summary = {"clipped_dhat": int(sum(part["clipped"] for part in parts))}
    for name, (env, sense) in envs.items():
        rep = envelope_exceedance(ns, log_masses=lm, phi=env, n0=p.n0, sense=sense)
        rep.to_json(out / f"envelope_{name}.json")
        with open(out / f"envelope_{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["n", "phi", "neg_log_phi", "median_neg_log_mass"])
            for n in grid:
                i = n - 1
                w.writerow([int(n), _f(math.exp(rep.log_phi[i])), _f(-rep.log_phi[i]),
                            _f(np.median(rep.neg_log_mass[:, i]))])
        written += [f"envelope_{name}.json", f"envelope_{name}.csv"]
        summary[name] = rep.summary()
    manifest.summary = summary
