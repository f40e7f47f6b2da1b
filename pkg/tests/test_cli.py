"""End-to-end command-line flows on tiny datasets: every subcommand, exit
codes, seed handling, and byte-identical reruns."""

import json
import os

import pytest

import eqlinker.cli as cli

TINY_CONFIG = {
    "epochs": 2, "batch_size": 4, "seed": 3, "beta": 0.1,
    "augment_permutation": False,
    "n_h": 12, "n_v": 4, "hidden": 16, "m_h": 8, "m_v": 4,
    "enc_layers": 2, "dec_layers": 2, "type_emb_dim": 4, "attn_dim": 8,
}
TINY_SPEC = {"n_min": 6, "n_max": 8}


def run(*argv):
    return cli.main(list(argv))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    spec = d / "spec.json"
    spec.write_text(json.dumps(TINY_SPEC))
    cfg = d / "config.json"
    cfg.write_text(json.dumps(TINY_CONFIG))
    data = d / "data.jsonl"
    assert run("gen-data", "--n", "6", "--seed", "5", "--spec", str(spec),
               "--out", str(data)) == 0
    ckpt = d / "model.ckpt"
    assert run("train", "--data", str(data), "--config", str(cfg),
               "--out", str(ckpt)) == 0
    return d


class TestGenData:
    def test_line_count_and_manifest(self, workdir):
        data = workdir / "data.jsonl"
        assert len(data.read_text().splitlines()) == 6
        manifest = json.loads((workdir / "data.jsonl.manifest.json").read_text())
        assert manifest["count"] == 6 and manifest["seed"] == 5

    def test_same_seed_byte_identical(self, workdir, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        spec = str(workdir / "spec.json")
        assert run("gen-data", "--n", "4", "--seed", "9", "--spec", spec,
                   "--out", str(a)) == 0
        assert run("gen-data", "--n", "4", "--seed", "9", "--spec", spec,
                   "--out", str(b)) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_zero_count_is_usage_error(self, tmp_path):
        assert run("gen-data", "--n", "0", "--out", str(tmp_path / "x")) == 1

    def test_unknown_spec_key_rejected(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"n_minn": 5}')
        assert run("gen-data", "--n", "2", "--spec", str(bad),
                   "--out", str(tmp_path / "x")) == 1


class TestTrain:
    def test_missing_data_is_usage_error(self, workdir):
        assert run("train", "--data", str(workdir / "nope.jsonl"),
                   "--out", str(workdir / "x.ckpt")) == 1

    def test_unknown_config_key_rejected(self, workdir, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"epoch": 2}')
        assert run("train", "--data", str(workdir / "data.jsonl"),
                   "--config", str(bad), "--out", str(tmp_path / "x.ckpt")) == 1

    def test_report_written(self, workdir):
        rep = json.loads((workdir / "model.ckpt.report.json").read_text())
        assert len(rep["epochs"]) == 2
        assert "wall_time" not in rep["epochs"][0]

    def test_default_config_echoes_reference_protocol(self, workdir, capsys):
        # bare train echoes the standard hyperparameters before running;
        # we only check the echo, not a full default-size run
        import eqlinker.training as tr
        cfg = tr.TrainConfig()
        echo = cli._resolved(cfg)
        assert '"epochs": 20' in echo
        assert '"learning_rate": 0.006' in echo
        assert '"batch_size": 48' in echo
        assert '"beta": 0.6' in echo

    def test_resume_continues_steps(self, workdir, tmp_path):
        import eqlinker.vaemodel as vm
        out2 = tmp_path / "resumed.ckpt"
        _, extra0 = vm.load_checkpoint(workdir / "model.ckpt")
        assert run("train", "--data", str(workdir / "data.jsonl"),
                   "--config", str(workdir / "config.json"),
                   "--resume", str(workdir / "model.ckpt"),
                   "--out", str(out2)) == 0
        _, extra1 = vm.load_checkpoint(out2)
        assert extra1["adam_step"] > extra0["adam_step"]

    def test_ablation_flag_applied(self, workdir, tmp_path):
        import eqlinker.vaemodel as vm
        out = tmp_path / "abl.ckpt"
        assert run("train", "--data", str(workdir / "data.jsonl"),
                   "--config", str(workdir / "config.json"),
                   "--ablate-equivariant", "--out", str(out)) == 0
        model, _ = vm.load_checkpoint(out)
        assert model.config.ablate_equivariant


class TestSampleEvalAudit:
    def test_sample_eval_roundtrip(self, workdir, tmp_path):
        gen = tmp_path / "gen.jsonl"
        assert run("sample", "--ckpt", str(workdir / "model.ckpt"),
                   "--fragments", str(workdir / "data.jsonl"),
                   "--k", "2", "--seed", "7", "--out", str(gen)) == 0
        assert len(gen.read_text().splitlines()) == 12
        rep = tmp_path / "report.json"
        assert run("eval", "--generated", str(gen),
                   "--truth", str(workdir / "data.jsonl"),
                   "--train-linkers", str(workdir / "data.jsonl"),
                   "--out", str(rep)) == 0
        obj = json.loads(rep.read_text())
        assert set(obj) >= {"validity", "recovery", "rmsd_mean", "uniqueness",
                            "novelty", "per_pair"}
        assert len(obj["per_pair"]) == 6

    def test_sample_deterministic(self, workdir, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        for out in (a, b):
            assert run("sample", "--ckpt", str(workdir / "model.ckpt"),
                       "--fragments", str(workdir / "data.jsonl"),
                       "--k", "1", "--seed", "3", "--out", str(out)) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_given_anchors_mode(self, workdir, tmp_path):
        gen = tmp_path / "ga.jsonl"
        assert run("sample", "--ckpt", str(workdir / "model.ckpt"),
                   "--fragments", str(workdir / "data.jsonl"),
                   "--k", "1", "--given-anchors", "--out", str(gen)) == 0
        import eqlinker.evalsuite as ev
        import eqlinker.molgraph as mg
        recs = ev.read_records(gen)
        truth = mg.read_samples(workdir / "data.jsonl")
        assert all(r.anchors == s.anchors for r, s in zip(recs, truth))

    def test_audit_passes_on_model(self, workdir):
        assert run("audit", "--ckpt", str(workdir / "model.ckpt"),
                   "--data", str(workdir / "data.jsonl"),
                   "--transforms", "5") == 0

    def test_eval_empty_generated_is_usage_error(self, workdir, tmp_path):
        empty = tmp_path / "empty.jsonl"
        empty.write_text("")
        assert run("eval", "--generated", str(empty),
                   "--truth", str(workdir / "data.jsonl"),
                   "--out", str(tmp_path / "r.json")) == 1


class TestGradcheck:
    def test_random_model_passes(self):
        assert run("gradcheck", "--n-params", "3") == 0


class TestSeedEnvOverride:
    def test_env_var_wins(self, workdir, tmp_path, monkeypatch):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        spec = str(workdir / "spec.json")
        monkeypatch.setenv("EQLINKER_SEED", "123")
        assert run("gen-data", "--n", "3", "--seed", "1", "--spec", spec,
                   "--out", str(a)) == 0
        assert run("gen-data", "--n", "3", "--seed", "2", "--spec", spec,
                   "--out", str(b)) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_bad_env_var_is_usage_error(self, workdir, tmp_path, monkeypatch):
        monkeypatch.setenv("EQLINKER_SEED", "abc")
        assert run("gen-data", "--n", "2", "--spec", str(workdir / "spec.json"),
                   "--out", str(tmp_path / "x.jsonl")) == 1
