import hashlib
import json
from dataclasses import replace
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from critcascade.cli import SUBCOMMANDS, build_parser, main
from critcascade.config import (
    EXPERIMENT_KINDS,
    ExperimentConfig,
    ModelConfig,
    ParamsConfig,
    build_law,
    dump_config,
    load_config,
    parse_config,
)
from critcascade.errors import ConfigInvalid, WorkerFailure
from critcascade.offspring import boundary_diagnostics
from critcascade.runner import parse_psi, run

EXAMPLE = """
[experiment]
kind = spine-envelope
seed = 20240611
reps = 200
workers = 1
out = runs/envelope

[model]
kind = lattice

[params]
alpha = 8
depth = 10000
side_depth = 20
tail_window = 30000
"""


# ----------------------------------------------------------------------
# configuration
# ----------------------------------------------------------------------
def test_parse_example():
    cfg = parse_config(EXAMPLE)
    assert cfg.kind == "spine-envelope" and cfg.seed == 20240611 and cfg.reps == 200
    assert cfg.params.alpha == (8.0,) and cfg.params.tail_window == 30000


def test_round_trip_is_identity():
    cfg = parse_config(EXAMPLE)
    assert parse_config(dump_config(cfg)) == cfg
    assert dump_config(parse_config(dump_config(cfg))) == dump_config(cfg)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**64 - 1), reps=st.integers(1, 10**6),
       alpha=st.lists(st.floats(0, 50, allow_nan=False), min_size=1, max_size=4),
       delta=st.floats(0.01, 0.99), depth=st.integers(0, 10**5),
       kind=st.sampled_from(EXPERIMENT_KINDS), model=st.sampled_from(["lattice", "gaussian"]))
def test_round_trip_property(seed, reps, alpha, delta, depth, kind, model):
    cfg = ExperimentConfig(kind=kind, seed=seed, reps=reps, model=ModelConfig(kind=model),
                           params=ParamsConfig(alpha=tuple(alpha), delta=delta, depth=depth)).validate()
    back = parse_config(dump_config(cfg))
    assert back == cfg and back.hash() == cfg.hash()


@pytest.mark.parametrize("text", [
    EXAMPLE + "colour = blue\n",
    EXAMPLE.replace("[model]", "[modle]"),
    EXAMPLE.replace("seed = 20240611", "seed = many"),
    EXAMPLE.replace("kind = spine-envelope", "kind = nothing"),
    EXAMPLE.replace("alpha = 8", "alpha = -1"),
])
def test_invalid_configs_rejected(text):
    with pytest.raises(ConfigInvalid):
        parse_config(text).validate()


def test_hash_tracks_content():
    cfg = parse_config(EXAMPLE)
    assert cfg.hash() == parse_config(EXAMPLE).hash()
    assert cfg.hash() != cfg.with_overrides(seed=1).hash()


def test_load_config(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text(EXAMPLE)
    assert load_config(p) == parse_config(EXAMPLE)


def test_build_law_variants():
    assert build_law(ModelConfig("lattice")).name == "lattice"
    law = build_law(ModelConfig("gaussian-template", mean=1.0, variance=3.0, boundary_normalize=True))
    assert boundary_diagnostics(law, "quadrature").is_boundary()
    atoms = build_law(ModelConfig("finite-atom", atoms=((-1.0, 0.1), (1.0, 0.9)), boundary_normalize=True))
    assert boundary_diagnostics(atoms, "closed-form").is_boundary()


def test_parse_psi():
    assert parse_psi("perturbed:1:1").eps == 1.0
    assert parse_psi("iterated:2").k == 2
    with pytest.raises(ConfigInvalid):
        parse_psi("cubic:3")


# ----------------------------------------------------------------------
# runner
# ----------------------------------------------------------------------
SMALL = {
    "grow": ParamsConfig(depth=6),
    "tree-martingales": ParamsConfig(depth=6, alpha=(2.0,)),
    "conditioned-walk": ParamsConfig(steps=50, alpha=(1.0,)),
    "spine": ParamsConfig(depth=60, side_depth=6, alpha=(8.0,), pool_size=128),
    "spine-envelope": ParamsConfig(depth=256, side_depth=6, alpha=(8.0,), pool_size=128, n0=16),
    "phase-scan": ParamsConfig(depth=6),
    "renewal": ParamsConfig(u_max=10.0),
    "model-diagnose": ParamsConfig(mc_budget=10_000),
}


def _sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@pytest.mark.parametrize("kind", sorted(SMALL))
@pytest.mark.parametrize("model", ["lattice", "gaussian"])
def test_every_kind_runs_and_inventories(tmp_path, kind, model):
    cfg = ExperimentConfig(kind=kind, seed=3, reps=5, out=str(tmp_path), model=ModelConfig(model),
                           params=replace(SMALL[kind], block=2))
    man = run(cfg)
    assert man.complete and man.outputs
    data = json.loads((tmp_path / "manifest.json").read_text())
    assert data["config_hash"] == cfg.validate().hash()
    for item in man.outputs:
        assert _sha(tmp_path / item["path"]) == item["sha256"]
    assert parse_config((tmp_path / "config.ini").read_text()) == cfg.validate()


@pytest.mark.parametrize("kind", ["tree-martingales", "spine-envelope", "conditioned-walk"])
def test_outputs_independent_of_worker_count(tmp_path, kind):
    sums = []
    for workers in (1, 2):
        cfg = ExperimentConfig(kind=kind, seed=9, reps=6, workers=workers, out=str(tmp_path / str(workers)),
                               model=ModelConfig("gaussian"), params=replace(SMALL[kind], block=2))
        sums.append(sorted((o["path"], o["sha256"]) for o in run(cfg).outputs))
    assert sums[0] == sums[1]


def test_failed_block_writes_partial_outputs(tmp_path):
    cfg = ExperimentConfig(kind="tree-martingales", seed=1, reps=4, out=str(tmp_path),
                           model=ModelConfig("lattice"), params=ParamsConfig(depth=14, cap=100, block=2))
    with pytest.raises(WorkerFailure):
        run(cfg)
    data = json.loads((tmp_path / "manifest.json").read_text())
    assert data["complete"] is False and data["failures"]


# ----------------------------------------------------------------------
# command line
# ----------------------------------------------------------------------
def test_parser_knows_every_subcommand():
    parser = build_parser()
    for name in SUBCOMMANDS:
        args = parser.parse_args([name, "--seed", "4"])
        assert args.seed == 4


def test_cli_run_and_errors(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text(dump_config(ExperimentConfig(kind="grow", params=ParamsConfig(depth=4))))
    assert main(["grow", "--config", str(cfg), "--out", str(tmp_path / "o"), "--replicas", "3"]) == 0
    assert (tmp_path / "o" / "populations.csv").exists()
    out = json.loads(capsys.readouterr().out)
    assert out["outputs"] == 1
    bad = tmp_path / "bad.ini"
    bad.write_text("[experiment]\nflavour = odd\n")
    assert main(["grow", "--config", str(bad)]) == 1
