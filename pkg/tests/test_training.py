"""Training loop: config validation, loss composition, optimization progress,
fault handling, determinism, and resumption."""

import dataclasses

import numpy as np
import pytest

import eqlinker.synthdata as sd
import eqlinker.tensorcore as tc
import eqlinker.training as tr
import eqlinker.vaemodel as vm

TINY = dict(n_h=12, n_v=4, hidden=16, m_h=8, m_v=4, enc_layers=2, dec_layers=2,
            type_emb_dim=4, attn_dim=8)


@pytest.fixture(scope="module")
def data():
    return sd.gen_dataset(6, sd.GenSpec(n_min=6, n_max=8), seed=31)


class TestConfig:
    def test_defaults_match_reference_protocol(self):
        cfg = tr.TrainConfig()
        assert cfg.epochs == 20
        assert cfg.learning_rate == 0.006
        assert cfg.batch_size == 48
        assert cfg.beta == 0.6

    def test_unknown_keys_rejected(self):
        with pytest.raises(ValueError, match="unknown config keys"):
            tr.config_from_dict({"learning_rte": 0.1})

    def test_invalid_values_rejected(self):
        with pytest.raises(ValueError):
            tr.TrainConfig(beta=-1.0)
        with pytest.raises(ValueError):
            tr.TrainConfig(batch_size=0)

    def test_ablation_flags_propagate(self):
        cfg = tr.TrainConfig(ablate_equivariant=True, ablate_coord_update=True)
        mc = cfg.model_config()
        assert mc.ablate_equivariant and mc.ablate_coord_update


class TestElboLoss:
    def test_composition(self, data):
        model = vm.Model(tr.TrainConfig(**TINY).model_config(), seed=2)
        s = data[0]
        noise = vm.zero_noise(s.full.n - s.n_frag, model.config)
        total, parts = tr.elbo_loss(model, s, beta=0.6, noise=noise)
        want = float(parts.reconstruction().data) \
            + 0.6 * float((parts.kl_h + parts.kl_v).data)
        assert abs(float(total.data) - want) < 1e-12

    def test_beta_zero_drops_kl(self, data):
        model = vm.Model(tr.TrainConfig(**TINY).model_config(), seed=2)
        s = data[0]
        noise = vm.zero_noise(s.full.n - s.n_frag, model.config)
        total, parts = tr.elbo_loss(model, s, beta=0.0, noise=noise)
        assert abs(float(total.data) - float(parts.reconstruction().data)) < 1e-12


class TestTrainLoop:
    def test_loss_decreases(self, data):
        cfg = tr.TrainConfig(epochs=8, batch_size=4, seed=5, beta=0.1,
                             augment_permutation=False, **TINY)
        _, report = tr.train(data, cfg)
        first = report.epochs[0].reconstruction
        last = min(r.reconstruction for r in report.epochs[-3:])
        assert last < first

    def test_deterministic(self, data):
        cfg = tr.TrainConfig(epochs=2, batch_size=4, seed=9,
                             augment_permutation=False, **TINY)
        m1, r1 = tr.train(data, cfg)
        m2, r2 = tr.train(data, cfg)
        for name in m1.params:
            assert np.array_equal(m1.params[name].data, m2.params[name].data)
        assert r1.to_json() == r2.to_json()

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            tr.train([], tr.TrainConfig(**TINY))

    def test_augmentation_doubles_pass_size(self, data):
        cfg = tr.TrainConfig(epochs=1, batch_size=100, seed=1,
                             augment_permutation=True, **TINY)
        model, report = tr.train(data, cfg)
        # one batch holding all 2N samples trains without error
        assert len(report.epochs) == 1

    def test_checkpoint_written_and_loadable(self, data, tmp_path):
        p = tmp_path / "m.ckpt"
        cfg = tr.TrainConfig(epochs=2, batch_size=4, seed=3,
                             augment_permutation=False, **TINY)
        model, _ = tr.train(data, cfg, ckpt_path=p)
        loaded, extra = vm.load_checkpoint(p, expect_config=cfg.model_config())
        assert extra["adam_step"] > 0
        for name in model.params:
            assert np.array_equal(model.params[name].data, loaded.params[name].data)

    def test_resume_continues_step_counter(self, data, tmp_path):
        p = tmp_path / "r.ckpt"
        cfg = tr.TrainConfig(epochs=1, batch_size=4, seed=3,
                             augment_permutation=False, **TINY)
        tr.train(data, cfg, ckpt_path=p)
        model, extra = vm.load_checkpoint(p)
        step0 = extra["adam_step"]
        tr.train(data, cfg, ckpt_path=p, model=model, start_step=step0)
        _, extra2 = vm.load_checkpoint(p)
        assert extra2["adam_step"] == 2 * step0

    def test_numeric_fault_rolls_back_and_checkpoints(self, data, tmp_path,
                                                      monkeypatch):
        p = tmp_path / "f.ckpt"
        cfg = tr.TrainConfig(epochs=1, batch_size=2, seed=3,
                             augment_permutation=False, **TINY)
        calls = {"n": 0}
        real = tc.adam_step

        def poisoned(params, grads, state, **kw):
            calls["n"] += 1
            if calls["n"] == 2:
                bad = dict(grads)
                k = next(iter(bad))
                bad[k] = np.full_like(bad[k], np.nan)
                return real(params, bad, state, **kw)
            return real(params, grads, state, **kw)

        monkeypatch.setattr(tr, "adam_step", poisoned)
        with pytest.raises(tr.TrainAbort) as exc:
            tr.train(data, cfg, ckpt_path=p)
        assert exc.value.batch == 1
        loaded, _ = vm.load_checkpoint(p)   # last good params were saved
        assert all(np.all(np.isfinite(t.data)) for t in loaded.params.values())

    def test_early_stop(self, data):
        cfg = tr.TrainConfig(epochs=50, batch_size=4, seed=5, beta=0.0,
                             augment_permutation=False,
                             early_stop_accuracy=0.0, **TINY)
        _, report = tr.train(data, cfg)
        assert len(report.epochs) == 1   # trivially satisfied after first epoch


class TestReport:
    def test_json_excludes_wall_time(self, data):
        cfg = tr.TrainConfig(epochs=1, batch_size=4, seed=1,
                             augment_permutation=False, **TINY)
        _, report = tr.train(data, cfg)
        assert "wall_time" not in report.to_json()
        assert "wall_time" in report.to_json(include_wall_time=True)
