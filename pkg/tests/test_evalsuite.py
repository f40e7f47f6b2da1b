"""Metric engine: analytic metric values, RMSD properties, record round-trip,
equivariance audit on a live model, and the property head."""

import math

import numpy as np
import pytest

import eqlinker.evalsuite as ev
import eqlinker.molgraph as mg
import eqlinker.synthdata as sd
import eqlinker.vaemodel as vm
from eqlinker.equivariant import random_orthogonal

SMALL = vm.ModelConfig(n_h=12, n_v=4, hidden=16, m_h=8, m_v=4,
                       enc_layers=2, dec_layers=2, type_emb_dim=4, attn_dim=8)


@pytest.fixture(scope="module")
def samples():
    return sd.gen_dataset(6, sd.GenSpec(n_min=6, n_max=9), seed=3)


@pytest.fixture(scope="module")
def truth_records(samples):
    return [ev.GeneratedRecord(i, s.full, s.n_frag, s.n_frag1, s.anchors)
            for i, s in enumerate(samples)]


@pytest.fixture(scope="module")
def model():
    return vm.Model(SMALL, seed=5)


class TestValidity:
    def test_truth_is_all_valid(self, truth_records):
        assert ev.validity(truth_records) == 100.0

    def test_one_broken_of_four(self, truth_records):
        s = truth_records[0]
        # disconnect: drop all edges so the fragments are not linked
        broken = ev.GeneratedRecord(99, mg.Molecule3D(s.molecule.types, (),
                                                      s.molecule.coords),
                                    s.n_frag, s.n_frag1, s.anchors)
        batch = list(truth_records[:3]) + [broken]
        assert ev.validity(batch) == 75.0

    def test_empty_errors(self):
        with pytest.raises(ValueError, match="no samples"):
            ev.validity([])


class TestRmsd:
    def test_identity_zero(self, samples):
        m = samples[0].full
        assert ev.rmsd(m, m) == 0.0

    def test_symmetric(self, samples):
        m = samples[0].full
        shifted = mg.Molecule3D(m.types, m.edges, m.coords + 0.01)
        assert abs(ev.rmsd(m, shifted) - ev.rmsd(shifted, m)) < 1e-15

    def test_uniform_offset_analytic(self, samples):
        s = next(x for x in samples if x.full.n - x.n_frag >= 3)
        m = s.full
        k = 3
        c = m.coords.copy()
        c[-k:] += np.array([1.0, 0.0, 0.0])
        assert abs(ev.rmsd(mg.Molecule3D(m.types, m.edges, c), m)
                   - math.sqrt(k / m.n)) < 1e-12

    def test_minimizes_over_isomorphisms(self):
        # symmetric path: relabeled copy must still give 0
        coords = np.array([[0.0, 0, 0], [1.5, 0, 0], [3.0, 0, 0], [4.5, 0, 0]])
        a = mg.Molecule3D((0, 0, 0, 0), ((0, 1), (1, 2), (2, 3)), coords)
        b = mg.Molecule3D((0, 0, 0, 0), ((0, 1), (1, 2), (2, 3)), coords[::-1].copy())
        assert ev.rmsd(a, b) < 1e-12

    def test_non_isomorphic_rejected(self):
        a = mg.Molecule3D((0, 0), ((0, 1),), np.zeros((2, 3)) + [[0, 0, 0], [1.5, 0, 0]])
        b = mg.Molecule3D((0, 1), ((0, 1),), a.coords)
        with pytest.raises(ValueError):
            ev.rmsd(a, b)


class TestRecoveryUniquenessNovelty:
    def test_truth_recovers_everything(self, truth_records, samples):
        truth = {i: s.full for i, s in enumerate(samples)}
        rec, rm, detail = ev.recovery_and_rmsd(truth_records, truth)
        assert rec == 100.0 and rm == 0.0
        assert all(d["recovered"] for d in detail.values())

    def test_relabeled_isomorphic_counts(self, samples):
        s = samples[0]
        # reverse linker node order: isomorphic, same coords per atom
        n, nf = s.full.n, s.n_frag
        order = list(range(nf)) + list(range(n - 1, nf - 1, -1))
        m = mg._induced(s.full, order)
        rec, _, _ = ev.recovery_and_rmsd(
            [ev.GeneratedRecord(0, m, nf, s.n_frag1, s.anchors)], {0: s.full})
        assert rec == 100.0

    def test_missing_truth_errors(self, truth_records):
        with pytest.raises(ValueError, match="no ground truth"):
            ev.recovery_and_rmsd(truth_records, {0: truth_records[0].molecule})

    def test_uniqueness_all_identical(self, truth_records):
        batch = [truth_records[0]] * 4
        assert ev.uniqueness(batch) == 25.0

    def test_novelty_bounds(self, truth_records, samples):
        keys = ev.linker_keys(samples)
        assert ev.novelty(truth_records, keys) == 0.0
        assert ev.novelty(truth_records, set()) == 100.0


class TestEvalReport:
    def test_full_report_and_serialization(self, truth_records, samples):
        truth = {i: s.full for i, s in enumerate(samples)}
        rep = ev.evaluate(truth_records, truth, ev.linker_keys(samples))
        assert rep.validity == 100.0 and rep.recovery == 100.0
        js = rep.to_json()
        assert '"validity": 100.0' in js
        csv = rep.to_csv()
        assert csv.splitlines()[0].startswith("valid_pct")

    def test_infinite_rmsd_serializes_as_null(self):
        rep = ev.EvalReport(0.0, 0.0, math.inf, 0.0, None)
        assert '"rmsd_mean": null' in rep.to_json()


class TestAudit:
    def test_untrained_model_passes(self, model, samples):
        rep = ev.equivariance_audit(model, samples[:2], n_transforms=10, seed=4)
        assert rep.ok()
        assert rep.encoder_dev < 1e-9
        assert rep.logprob_dev < 1e-8
        assert rep.coord_dev < 1e-6

    def test_broken_layer_detected(self, samples):
        # fault injection: a coordinate-dependent bias breaks equivariance
        broken = vm.Model(SMALL, seed=5)
        real = broken._encode_graph

        def bad(mol):
            h, v = real(mol)
            import eqlinker.tensorcore as tc
            return h + tc.const(mol.coords[:, :1] @ np.ones((1, SMALL.n_h))), v

        broken._encode_graph = bad
        rep = ev.equivariance_audit(broken, samples[:1], n_transforms=5, seed=4)
        assert not rep.ok()


class TestPropertyHead:
    def test_output_in_unit_interval(self, model, samples):
        head = ev.PropertyHead(SMALL.m_h, SMALL.m_v, seed=1)
        for s in samples:
            p = ev.predict_property(head, model, s)
            assert 0.0 < p < 1.0

    def test_rigid_invariance(self, model, samples):
        head = ev.PropertyHead(SMALL.m_h, SMALL.m_v, seed=1)
        s = samples[0]
        p0 = ev.predict_property(head, model, s)
        rng = np.random.default_rng(8)
        for _ in range(5):
            st = ev._transform_sample(s, random_orthogonal(rng),
                                      rng.uniform(-3, 3, 3))
            assert abs(ev.predict_property(head, model, st) - p0) < 1e-9

    def test_training_reduces_rmse(self, model, samples):
        head0 = ev.PropertyHead(SMALL.m_h, SMALL.m_v, seed=2)
        base = math.sqrt(np.mean([
            (ev.predict_property(head0, model, s) - ev.synthetic_property(s)) ** 2
            for s in samples]))
        _, rmse = ev.train_property_head(model, samples, epochs=150, seed=2)
        assert rmse < base

    def test_target_deterministic(self, samples):
        for s in samples:
            assert ev.synthetic_property(s) == ev.synthetic_property(s)
            assert 0.0 < ev.synthetic_property(s) < 1.0


class TestGenerateRecords:
    def test_per_pair_counts_and_determinism(self, model, samples):
        r1 = ev.generate_records(model, samples[:2], k=3, seed=11)
        r2 = ev.generate_records(model, samples[:2], k=3, seed=11)
        assert len(r1) == 6
        assert [r.pair_id for r in r1] == [0, 0, 0, 1, 1, 1]
        for a, b in zip(r1, r2):
            assert a.molecule.same_as(b.molecule)
            assert np.array_equal(a.molecule.coords, b.molecule.coords)

    def test_record_file_roundtrip(self, model, samples, tmp_path):
        recs = ev.generate_records(model, samples[:2], k=2, seed=1)
        p = tmp_path / "g.jsonl"
        ev.write_records(p, recs)
        back = ev.read_records(p)
        for a, b in zip(recs, back):
            assert a.pair_id == b.pair_id and a.anchors == b.anchors
            assert a.molecule.same_as(b.molecule)
            assert np.array_equal(a.molecule.coords, b.molecule.coords)
