import hashlib
import json
import struct

import numpy as np
import pytest

from evisurv import dataio, survival
from evisurv.dataio import BinEdges, SurvivalLabel


def _tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture
def two_patient_dir(tmp_path):
    gene_sets = dataio.GeneSetMap(dataio.DEFAULT_CATEGORIES, np.arange(6))
    recs = [
        dataio.PatientRecord("a", 12.5, 0, np.arange(12, dtype=float).reshape(3, 4) / 7, np.linspace(0, 1, 6)),
        dataio.PatientRecord("b", 40.0, 1, np.ones((1, 4)) * 0.1, np.zeros(6)),
    ]
    dataio.save_dataset(dataio.Dataset(recs, gene_sets, 4), tmp_path)
    return tmp_path


class TestBagFormat:
    def test_round_trip_float32(self, tmp_path, rng):
        x = rng.normal(size=(7, 3)).astype(np.float32)
        dataio.write_bag(tmp_path / "b.bin", x)
        y = dataio.read_bag(tmp_path / "b.bin")
        assert y.dtype == np.float64
        np.testing.assert_array_equal(y, x.astype(np.float64))

    def test_header_layout(self, tmp_path):
        dataio.write_bag(tmp_path / "b.bin", np.zeros((2, 5)))
        raw = (tmp_path / "b.bin").read_bytes()
        assert raw[:4] == b"M2EB"
        assert struct.unpack("<HHII", raw[4:16]) == (1, 0, 2, 5)
        assert len(raw) == 16 + 2 * 5 * 4

    def test_truncated_payload(self, tmp_path):
        dataio.write_bag(tmp_path / "b.bin", np.zeros((2, 5)))
        p = tmp_path / "b.bin"
        p.write_bytes(p.read_bytes()[:-4])
        with pytest.raises(dataio.DataFormatError, match="payload"):
            dataio.read_bag(p)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "b.bin"
        p.write_bytes(b"XXXX" + bytes(12))
        with pytest.raises(dataio.DataFormatError, match="magic"):
            dataio.read_bag(p)


class TestLoadDataset:
    def test_two_patients(self, two_patient_dir):
        ds = dataio.load_dataset(two_patient_dir / "manifest.json")
        assert len(ds) == 2
        assert ds[0].wsi_bag.shape == (3, 4) and ds[1].wsi_bag.shape == (1, 4)
        assert ds[0].gene_values.shape == (6,)
        assert ds[0].event == 1 and ds[1].event == 0
        np.testing.assert_array_equal(
            ds[0].wsi_bag, (np.arange(12, dtype=float).reshape(3, 4) / 7).astype(np.float32).astype(np.float64)
        )

    def test_missing_bag_names_path_and_patient(self, two_patient_dir):
        (two_patient_dir / "bags" / "b_wsi.bin").unlink()
        with pytest.raises(dataio.MissingFileError, match=r"patient b.*b_wsi\.bin"):
            dataio.load_dataset(two_patient_dir / "manifest.json")

    def test_truncated_bag(self, two_patient_dir):
        p = two_patient_dir / "bags" / "a_wsi.bin"
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(dataio.DataFormatError, match="patient a.*payload"):
            dataio.load_dataset(two_patient_dir / "manifest.json")

    def test_dimension_mismatch(self, two_patient_dir):
        dataio.write_bag(two_patient_dir / "bags" / "b_wsi.bin", np.zeros((2, 5)))
        with pytest.raises(dataio.DimensionError, match="patient b"):
            dataio.load_dataset(two_patient_dir / "manifest.json")

    def test_unknown_category(self, two_patient_dir):
        (two_patient_dir / "gene_sets.csv").write_text("gene_index,category\n0,0\n1,1\n2,2\n3,3\n4,4\n5,9\n")
        with pytest.raises(dataio.UnknownCategoryError):
            dataio.load_dataset(two_patient_dir / "manifest.json")

    def test_malformed_header(self, two_patient_dir):
        (two_patient_dir / "gene_sets.csv").write_text("gene,cat\n0,0\n")
        with pytest.raises(dataio.DataFormatError, match="header"):
            dataio.load_dataset(two_patient_dir / "manifest.json")

    def test_manifest_schema(self, two_patient_dir):
        m = json.loads((two_patient_dir / "manifest.json").read_text())
        del m["wsi_dim"]
        (two_patient_dir / "manifest.json").write_text(json.dumps(m))
        with pytest.raises(dataio.DataFormatError, match="wsi_dim"):
            dataio.load_dataset(two_patient_dir / "manifest.json")

    def test_round_trip_bit_exact(self, tmp_path):
        ds, _ = dataio.synth_cohort(dataio.SynthConfig(patients=15, seed=9))
        dataio.save_dataset(ds, tmp_path)
        back = dataio.load_dataset(tmp_path / "manifest.json")
        for a, b in zip(ds.records, back.records):
            assert (a.id, a.survival_months, a.status) == (b.id, b.survival_months, b.status)
            np.testing.assert_array_equal(a.wsi_bag, b.wsi_bag)
            np.testing.assert_array_equal(a.gene_values, b.gene_values)
        np.testing.assert_array_equal(ds.gene_sets.assignment, back.gene_sets.assignment)


def _dataset_with_times(times, status):
    gene_sets = dataio.GeneSetMap(dataio.DEFAULT_CATEGORIES, np.arange(6))
    recs = [dataio.PatientRecord(str(i), float(t), int(s), np.zeros((1, 2)), np.zeros(6))
            for i, (t, s) in enumerate(zip(times, status))]
    return dataio.Dataset(recs, gene_sets, 2)


class TestDiscretize:
    def test_quantile_edges(self):
        ds = _dataset_with_times(range(1, 101), [0] * 100)
        edges, labels = dataio.discretize_times(ds, 4)
        # order-statistic interpolation at q*(n-1) on the sorted sample 1..100
        sorted_t = np.arange(1, 101, dtype=float)
        oracle = []
        for q in (0.25, 0.5, 0.75):
            pos = q * 99
            lo = int(pos)
            oracle.append(sorted_t[lo] + (pos - lo) * (sorted_t[lo + 1] - sorted_t[lo]))
        np.testing.assert_allclose(edges.edges, oracle, rtol=0, atol=1e-12)
        np.testing.assert_allclose(edges.edges, (25.75, 50.5, 75.25), atol=1e-12)
        assert labels[9].bin == 0 and labels[98].bin == 3

    def test_boundary_goes_low(self):
        edges = BinEdges((10.0, 20.0))
        assert [edges.bin(t) for t in (0.0, 10.0, 10.0001, 20.0, 25.0)] == [0, 0, 1, 1, 2]

    def test_single_bin(self):
        ds = _dataset_with_times([3, 1, 2], [0, 0, 1])
        edges, labels = dataio.discretize_times(ds, 1)
        assert edges.edges == () and all(lb.bin == 0 for lb in labels)

    def test_censored_above_last_edge_clamps(self):
        ds = _dataset_with_times([1, 2, 3, 4, 99], [0, 0, 0, 0, 1])
        _, labels = dataio.discretize_times(ds, 4)
        assert labels[4].bin == 3 and labels[4].event == 0

    def test_edges_use_uncensored_only(self):
        ds = _dataset_with_times([1, 2, 3, 4, 50, 60, 70], [0, 0, 0, 0, 1, 1, 1])
        edges, _ = dataio.discretize_times(ds, 2)
        assert edges.edges == (2.5,)

    def test_too_few_events(self):
        with pytest.raises(dataio.DiscretizationError, match="at least 4"):
            dataio.discretize_times(_dataset_with_times([1, 2, 3, 4], [0, 0, 0, 1]), 4)

    def test_degenerate_times(self):
        with pytest.raises(dataio.DiscretizationError, match="equal"):
            dataio.discretize_times(_dataset_with_times([5, 5, 5, 5], [0, 0, 0, 0]), 4)

    def test_every_event_in_its_interval(self):
        ds, _ = dataio.synth_cohort(dataio.SynthConfig(patients=80, seed=4))
        edges, labels = dataio.discretize_times(ds, 4)
        bounds = (0.0, *edges.edges, np.inf)
        for lb in labels:
            lo, hi = bounds[lb.bin], bounds[lb.bin + 1]
            assert (lo < lb.time <= hi) or (lb.bin == 0 and 0 <= lb.time <= hi)

    def test_label_event_is_inverse_status(self):
        ds = _dataset_with_times([1, 2, 3, 4, 5], [0, 1, 0, 0, 0])
        _, labels = dataio.discretize_times(ds, 2)
        assert [lb.event for lb in labels] == [1, 0, 1, 1, 1]
        assert isinstance(labels[0], SurvivalLabel)


class TestKFold:
    def test_partition(self):
        folds = dataio.kfold_split(10, 5, seed=0)
        vals = [set(v.tolist()) for _, v in folds]
        assert all(len(v) == 2 for v in vals)
        assert set().union(*vals) == set(range(10))
        assert sum(len(v) for v in vals) == 10
        for tr, va in folds:
            assert not set(tr) & set(va) and len(tr) + len(va) == 10

    def test_uneven_sizes_differ_by_one(self):
        sizes = [len(v) for _, v in dataio.kfold_split(23, 5, seed=1)]
        assert max(sizes) - min(sizes) <= 1 and sum(sizes) == 23

    def test_deterministic(self):
        a, b = dataio.kfold_split(30, 5, 7), dataio.kfold_split(30, 5, 7)
        assert all(np.array_equal(x[1], y[1]) for x, y in zip(a, b))

    def test_seeds_differ(self):
        a, b = dataio.kfold_split(30, 5, 1), dataio.kfold_split(30, 5, 2)
        assert any(not np.array_equal(x[1], y[1]) for x, y in zip(a, b))

    @pytest.mark.parametrize("k", [1, 11])
    def test_k_out_of_range(self, k):
        with pytest.raises(ValueError):
            dataio.kfold_split(10, k, 0)


class TestSynth:
    def test_deterministic_files(self, tmp_path):
        cfg = dataio.SynthConfig(patients=20, seed=11)
        dataio.synth_generate(cfg, tmp_path / "a")
        dataio.synth_generate(cfg, tmp_path / "b")
        assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")

    def test_censor_rate(self):
        ds, _ = dataio.synth_cohort(dataio.SynthConfig(patients=200, censor_rate=0.3, seed=5))
        assert abs(np.mean([r.status for r in ds.records]) - 0.3) <= 0.02

    def test_shapes_and_categories(self):
        cfg = dataio.SynthConfig(patients=30, d_h=16, n_genes=18, mean_bag_size=10, seed=2)
        ds, z = dataio.synth_cohort(cfg)
        assert z.shape == (30,)
        assert all(r.wsi_bag.shape[1] == 16 and r.wsi_bag.shape[0] >= 1 for r in ds.records)
        assert ds.gene_sets.sizes() == [3] * 6

    def test_planted_signal_matches_population_concordance(self):
        # For exponential times with rate exp(s*z), a pair is concordant with probability
        # sigmoid(s*|z_i - z_j|); z_i - z_j ~ N(0, 2). Integrate that by quadrature.
        from scipy import integrate, stats

        s = 1.5
        pop, _ = integrate.quad(lambda d: 2 * stats.norm.pdf(d, scale=np.sqrt(2)) / (1 + np.exp(-s * d)), 0, np.inf)
        ds, z = dataio.synth_cohort(dataio.SynthConfig(patients=200, signal_strength=s, seed=42))
        oracle = survival.concordance(z, ds.times(), ds.events()).c_index
        assert abs(oracle - pop) < 0.04
        assert oracle >= 0.75

    def test_zero_signal_is_chance(self):
        cs = []
        for seed in range(10):
            ds, z = dataio.synth_cohort(dataio.SynthConfig(patients=200, signal_strength=0.0, seed=seed))
            cs.append(survival.concordance(z, ds.times(), ds.events()).c_index)
        assert abs(np.mean(cs) - 0.5) < 0.03

    @pytest.mark.parametrize("bad", [dict(patients=0), dict(censor_rate=1.0), dict(censor_rate=-0.1), dict(d_h=0)])
    def test_rejects_bad_config(self, bad):
        with pytest.raises(ValueError):
            dataio.synth_cohort(dataio.SynthConfig(**bad))
