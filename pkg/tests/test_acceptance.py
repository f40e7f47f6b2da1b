"""Acceptance criteria, one test per criterion.  Each prints a single
PASS/FAIL line (visible with `pytest -s`).  The overfit-based criteria share
one trained model; budgets are calibrated for a single CPU core."""

import dataclasses
import itertools
import json
import os
import time

import numpy as np
import pytest

from eqlinker import cli
from eqlinker import evalsuite as ev
from eqlinker import molgraph as mg
from eqlinker import synthdata as sd
from eqlinker import training as tr
from eqlinker import vaemodel as vm

from test_molgraph import mol, oracle_cuts, oracle_isomorphic, random_graph, relabel

DATA_SEED = 11

# overfit protocol (criterion 3); reduced widths keep the 64-sample run
# inside the 30-minute single-core budget
OVERFIT = tr.TrainConfig(
    epochs=300, learning_rate=0.006, lr_final=0.0005, batch_size=8,
    beta=0.3, coord_noise=1.2, max_linker_nodes=8, seed=3,
    augment_permutation=False, early_stop_accuracy=0.995,
    n_h=24, n_v=6, hidden=32, m_h=16, m_v=4,
    enc_layers=2, dec_layers=2, type_emb_dim=6, attn_dim=16,
)

TINY = vm.ModelConfig(n_h=10, n_v=3, hidden=12, m_h=8, m_v=3,
                      enc_layers=1, dec_layers=1, type_emb_dim=4, attn_dim=8)


def _verdict(num: int, name: str, ok: bool, detail: str = "") -> None:
    line = f"[criterion {num}] {name}: {'PASS' if ok else 'FAIL'}"
    if detail:
        line += f" ({detail})"
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def dataset64():
    return sd.gen_dataset(64, sd.GenSpec(), seed=DATA_SEED)


@pytest.fixture(scope="module")
def overfit(dataset64):
    t0 = time.perf_counter()
    model, report = tr.train(dataset64, OVERFIT)
    return model, report, time.perf_counter() - t0


@pytest.fixture(scope="module")
def generations(overfit, dataset64):
    model, _, _ = overfit
    return ev.generate_records(model, dataset64, k=50, seed=5)


def test_criterion_1_equivariance_audit():
    model = vm.Model(TINY, seed=0)
    samples = sd.gen_dataset(10, sd.GenSpec(n_min=6, n_max=8), seed=21)
    t0 = time.perf_counter()
    rep = ev.equivariance_audit(model, samples, n_transforms=100, seed=0)
    wall = time.perf_counter() - t0
    ok = (rep.n_checks == 1000 and rep.graph_mismatches == 0
          and rep.encoder_dev < 1e-9 and rep.coord_dev < 1e-6
          and rep.logprob_dev < 1e-8 and wall < 120.0)
    _verdict(1, "equivariance audit", ok,
             f"enc {rep.encoder_dev:.2e}, coord {rep.coord_dev:.2e}, "
             f"logprob {rep.logprob_dev:.2e}, mismatches {rep.graph_mismatches}, "
             f"{wall:.0f}s")


def test_criterion_2_gradient_correctness():
    model = vm.Model(vm.ModelConfig(n_h=12, n_v=4, hidden=16, m_h=8, m_v=4,
                                    enc_layers=2, dec_layers=2,
                                    type_emb_dim=4, attn_dim=8), seed=0)
    sample = sd.gen_dataset(1, sd.GenSpec(n_min=6, n_max=7), seed=4)[0]
    noise = vm.prior_noise(np.random.default_rng(2), sample.full.n - sample.n_frag,
                           model.config)
    t0 = time.perf_counter()
    worst, worst_name = 0.0, ""
    for name in sorted(model.params):  # every layer's weights reach the objective
        err = cli._param_fd(model, sample, noise, name, n_coords=2, eps=1e-5)
        if err > worst:
            worst, worst_name = err, name
    wall = time.perf_counter() - t0
    ok = worst < 1e-4 and wall < 300.0
    _verdict(2, "gradient correctness", ok,
             f"worst {worst_name} rel err {worst:.2e}, "
             f"{len(model.params)} params, {wall:.0f}s")


def test_criterion_3_overfit_reproduction(overfit, dataset64, generations):
    model, report, wall = overfit
    acc, _ = tr.teacher_forced_eval(model, dataset64, config=OVERFIT)
    geom = tr.final_geometry_mse(model, dataset64, config=OVERFIT)
    truth = {i: s.full for i, s in enumerate(dataset64)}
    rec_pct, rmsd_mean, _ = ev.recovery_and_rmsd(generations, truth)
    ok = (len(report.epochs) <= 300 and wall < 1800.0
          and acc >= 0.95 and geom <= 0.05
          and rec_pct >= 80.0 and rmsd_mean <= 0.15)
    _verdict(3, "overfit reproduction", ok,
             f"{len(report.epochs)} epochs in {wall:.0f}s, tf acc {acc:.3f}, "
             f"final-geometry mse {geom:.4f}, recovery {rec_pct:.1f}%, "
             f"rmsd {rmsd_mean:.3f}")


def test_criterion_4_valency_guarantee(generations):
    batch = generations[:1000]
    assert len(batch) == 1000
    violations = sum(len(mg.validate(r.molecule).valency_violations) for r in batch)
    valid_pct = ev.validity(batch)
    ok = violations == 0 and valid_pct >= 95.0
    _verdict(4, "valency guarantee", ok,
             f"{violations} violations, {valid_pct:.1f}% fully valid of 1000")


def test_criterion_5_oracle_equivalences(dataset64):
    rng = np.random.default_rng(42)
    cuts_ok = all(
        len(mg.cut_linker(g, min_frag=1, min_linker=1))
        == oracle_cuts(g, min_frag=1, min_linker=1)
        for g in (random_graph(rng) for _ in range(200)))

    rng = np.random.default_rng(7)
    iso_ok = True
    for k in range(500):
        a = random_graph(rng, n_max=6)
        if k % 2:
            b = relabel(a, list(rng.permutation(a.n)))
            if rng.random() < 0.5 and a.n >= 3:
                b = mol([(t + 1) % 4 for t in b.types], b.edges)
        else:
            b = random_graph(rng, n_max=6)
        want = oracle_isomorphic(a, b)
        if mg.graph_isomorphic(a, b) != want \
                or (mg.canonical_key(a) == mg.canonical_key(b)) != want:
            iso_ok = False
            break

    replays = sum(mg.replay(s.bfs_trace, s.fragments).same_as(s.full)
                  for s in dataset64)
    replay_ok = replays == len(dataset64)

    ok = cuts_ok and iso_ok and replay_ok
    _verdict(5, "oracle equivalences", ok,
             f"cuts {cuts_ok}, isomorphism {iso_ok}, "
             f"replay {replays}/{len(dataset64)}")


def test_criterion_6_ablation_directionality(dataset64):
    # reduced shared-seed setup: the eight smallest-linker pairs
    small = sorted(dataset64, key=lambda s: s.full.n - s.n_frag)[:8]
    cfg = dataclasses.replace(OVERFIT, epochs=150)
    result = ev.ablation_run(small, cfg, k=12, seed=5)
    base = result.reports["base"].rmsd_mean
    deltas = result.rmsd_deltas()   # inf - base counts as strictly worse
    ok = np.isfinite(base) and all(d > 0 for d in deltas.values())
    detail = ", ".join(f"{k} +{v:.3f}" for k, v in sorted(deltas.items()))
    _verdict(6, "ablation directionality", ok, f"base rmsd {base:.3f}, {detail}")


def test_criterion_7_protocol_fidelity(tmp_path):
    cfg = tr.TrainConfig()
    defaults_ok = (cfg.epochs == 20 and cfg.learning_rate == 0.006
                   and cfg.batch_size == 48 and cfg.beta == 0.6)
    parser = cli.build_parser()
    ns = parser.parse_args(["sample", "--ckpt", "x", "--fragments", "y",
                            "--out", "z"])
    defaults_ok = defaults_ok and ns.k == 250

    # both anchor modes end to end on a small untrained model
    model = vm.Model(TINY, seed=0)
    samples = sd.gen_dataset(2, sd.GenSpec(n_min=6, n_max=8), seed=3)
    free = ev.generate_records(model, samples, k=2, seed=1)
    given = ev.generate_records(model, samples, k=2, seed=1, given_anchors=True)
    modes_ok = (len(free) == 4 and len(given) == 4
                and all(r.anchors == samples[r.pair_id].anchors for r in given))

    ok = defaults_ok and modes_ok
    _verdict(7, "protocol fidelity", ok,
             f"defaults {defaults_ok}, anchor modes {modes_ok}")


def test_criterion_8_determinism(tmp_path):
    def run(tag):
        d = tmp_path / tag
        os.makedirs(d)
        data = str(d / "data.jsonl")
        ckpt = str(d / "model.ckpt")
        gen = str(d / "gen.jsonl")
        conf = str(d / "config.json")
        with open(conf, "w", encoding="utf-8") as fh:
            json.dump({"epochs": 2, "batch_size": 4, "seed": 1,
                       "n_h": 10, "n_v": 3, "hidden": 12, "m_h": 8, "m_v": 3,
                       "enc_layers": 1, "dec_layers": 1,
                       "type_emb_dim": 4, "attn_dim": 8}, fh)
        assert cli.main(["gen-data", "--n", "4", "--seed", "9", "--out", data]) == 0
        assert cli.main(["train", "--data", data, "--config", conf,
                         "--out", ckpt]) == 0
        assert cli.main(["sample", "--ckpt", ckpt, "--fragments", data,
                         "--k", "2", "--seed", "4", "--out", gen]) == 0
        out = {}
        for name in ("data.jsonl", "data.jsonl.manifest.json", "model.ckpt",
                     "model.ckpt.report.json", "gen.jsonl"):
            with open(d / name, "rb") as fh:
                out[name] = fh.read()
        return out

    first, second = run("a"), run("b")
    diffs = [k for k in first if first[k] != second[k]]
    ok = not diffs
    _verdict(8, "determinism", ok,
             "all artifacts byte-identical" if ok else f"differs: {diffs}")
