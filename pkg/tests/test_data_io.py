import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from protomixer import data_io
from protomixer.clustering import kmeans
from protomixer.data_io import (
    Manifest, ManifestEntry, SyntheticSpec, gen_synthetic, load_dataset,
    read_manifest, read_matrix, read_truth, write_manifest, write_matrix,
)
from protomixer.errors import ConfigError, DataError, FormatError


class TestMatrixFormat:
    def test_file_size(self, tmp_path):
        write_matrix(np.zeros((2, 3)), tmp_path / "m.pmb")
        assert (tmp_path / "m.pmb").stat().st_size == 60

    def test_layout(self, tmp_path):
        write_matrix(np.array([[1.5, -2.0]]), tmp_path / "m.pmb")
        raw = (tmp_path / "m.pmb").read_bytes()
        assert raw[:4] == b"PMB1"
        assert raw[4:8] == (1).to_bytes(4, "little")
        assert raw[8:12] == (2).to_bytes(4, "little")
        assert np.frombuffer(raw[12:], "<f8").tolist() == [1.5, -2.0]

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(0, 6), st.integers(0, 6)),
                  elements=st.floats(allow_nan=False, width=64)))
    def test_round_trip(self, tmp_path_factory, m):
        p = tmp_path_factory.mktemp("rt") / "m.pmb"
        write_matrix(m, p)
        back = read_matrix(p)
        assert back.shape == m.shape
        assert back.tobytes() == m.tobytes()

    def test_bad_magic(self, tmp_path):
        (tmp_path / "m.pmb").write_bytes(b"XXXX" + bytes(8))
        with pytest.raises(FormatError, match="offset 0"):
            read_matrix(tmp_path / "m.pmb")

    def test_truncated(self, tmp_path):
        write_matrix(np.ones((3, 3)), tmp_path / "m.pmb")
        raw = (tmp_path / "m.pmb").read_bytes()
        (tmp_path / "t.pmb").write_bytes(raw[:-1])
        with pytest.raises(FormatError, match="length mismatch") as exc:
            read_matrix(tmp_path / "t.pmb")
        assert exc.value.offset == len(raw) - 1
        (tmp_path / "h.pmb").write_bytes(raw[:7])
        with pytest.raises(FormatError, match="truncated header"):
            read_matrix(tmp_path / "h.pmb")

    def test_trailing_bytes(self, tmp_path):
        write_matrix(np.ones((1, 1)), tmp_path / "m.pmb")
        with open(tmp_path / "m.pmb", "ab") as fh:
            fh.write(b"\0")
        with pytest.raises(FormatError):
            read_matrix(tmp_path / "m.pmb")

    def test_float32_widening(self, tmp_path):
        m = np.array([[0.5, 1.25], [3.0, -8.0]], dtype="<f4")
        (tmp_path / "f.pmb").write_bytes(b"PMF1" + (2).to_bytes(4, "little") * 2
                                         + m.tobytes())
        with pytest.raises(FormatError):
            read_matrix(tmp_path / "f.pmb")
        back = read_matrix(tmp_path / "f.pmb", allow_float32=True)
        assert back.dtype == np.float64
        np.testing.assert_array_equal(back, m.astype(np.float64))


class TestManifest:
    def test_round_trip_order(self, tmp_path):
        entries = [ManifestEntry(f"s{i}", i % 2, 10 - i, f"x/{i}.pmb") for i in range(5)]
        write_manifest(Manifest("demo", 2, entries), tmp_path / "m.tsv")
        back = read_manifest(tmp_path / "m.tsv")
        assert back.dataset_name == "demo" and back.num_classes == 2
        assert back.entries == entries
        assert back.root == tmp_path

    def test_duplicate_slide(self, tmp_path):
        entries = [ManifestEntry("a", 0, 0, "a.pmb"), ManifestEntry("a", 1, 1, "b.pmb")]
        write_manifest(Manifest("d", 2, entries), tmp_path / "m.tsv")
        with pytest.raises(DataError, match="duplicate slide_id 'a'"):
            read_manifest(tmp_path / "m.tsv")

    def test_missing_file_names_slide(self, tmp_path):
        write_manifest(Manifest("d", 1, [ManifestEntry("ghost", 0, 0, "nope.pmb")]),
                       tmp_path / "m.tsv")
        with pytest.raises(DataError, match="ghost"):
            load_dataset(tmp_path / "m.tsv")

    def test_mixed_width(self, tmp_path):
        write_matrix(np.zeros((3, 4)), tmp_path / "a.pmb")
        write_matrix(np.zeros((3, 5)), tmp_path / "b.pmb")
        entries = [ManifestEntry("a", 0, 0, "a.pmb"), ManifestEntry("b", 0, 1, "b.pmb")]
        write_manifest(Manifest("d", 1, entries), tmp_path / "m.tsv")
        with pytest.raises(DataError, match="'b'"):
            load_dataset(tmp_path / "m.tsv")

    def test_label_range(self, tmp_path):
        write_manifest(Manifest("d", 2, [ManifestEntry("a", 2, 0, "a.pmb")]),
                       tmp_path / "m.tsv")
        with pytest.raises(DataError):
            read_manifest(tmp_path / "m.tsv")


class TestSynthetic:
    def test_counts(self, tmp_path):
        m, _ = gen_synthetic(SyntheticSpec(num_bags=50, patches_min=5,
                                           patches_max=9, N=6), tmp_path)
        man = read_manifest(m)
        assert len({e.slide_id for e in man.entries}) == 50
        assert len(list((tmp_path / "bags").glob("*.pmb"))) == 50
        assert len(load_dataset(m)) == 50

    def test_deterministic(self, tmp_path):
        spec = SyntheticSpec(num_bags=8, patches_min=3, patches_max=6, N=5,
                             noise_sigma=0.3, domain_shift_magnitude=1.0, seed=4)
        gen_synthetic(spec, tmp_path / "a")
        gen_synthetic(spec, tmp_path / "b")
        files = sorted(p.relative_to(tmp_path / "a")
                       for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert files
        for rel in files:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_noiseless_separable_by_nearest_center(self, tmp_path):
        spec = SyntheticSpec(num_bags=12, num_classes=3, patches_min=4,
                             patches_max=8, N=10, signal_fraction=1.0, seed=2)
        m, truth = gen_synthetic(spec, tmp_path)
        for bag in load_dataset(m):
            d = ((bag.features[:, None, :] - truth.class_centers[None]) ** 2).sum(-1)
            assert np.all(d.argmin(axis=1) == bag.class_label)
            assert np.all(d.min(axis=1) == 0.0)

    def test_truth_sidecar(self, tmp_path):
        spec = SyntheticSpec(num_bags=6, num_domains=3, patches_min=3,
                             patches_max=4, N=4, domain_shift_magnitude=2.0)
        _, truth = gen_synthetic(spec, tmp_path)
        back = read_truth(tmp_path)
        np.testing.assert_array_equal(back.class_centers, truth.class_centers)
        np.testing.assert_array_equal(back.domain_offsets, truth.domain_offsets)
        np.testing.assert_allclose(np.linalg.norm(back.domain_offsets, axis=1), 2.0)
        assert back.sites == truth.sites

    def test_domain_ids_unique_per_slide(self, tmp_path):
        m, _ = gen_synthetic(SyntheticSpec(num_bags=10, patches_min=2,
                                           patches_max=3, N=3), tmp_path)
        ids = [e.domain_id for e in read_manifest(m).entries]
        assert sorted(ids) == list(range(10))

    def test_kmeans_recovers_centers(self, tmp_path):
        spec = SyntheticSpec(num_bags=10, num_classes=2, num_shared=3,
                             patches_min=30, patches_max=60, N=8,
                             signal_fraction=0.4, seed=5)
        m, truth = gen_synthetic(spec, tmp_path)
        k = spec.num_shared + 1
        for bag in load_dataset(m):
            res = kmeans(bag.features, k, seed=0)
            present = np.unique(bag.features, axis=0)
            expected = np.vstack([truth.class_centers[bag.class_label],
                                  truth.shared_centers])
            for c in res.centroids:
                assert np.min(np.abs(expected - c).max(axis=1)) < 1e-6
            for p in present:
                assert np.min(np.abs(res.centroids - p).max(axis=1)) < 1e-6

    @pytest.mark.parametrize("kw", [dict(signal_fraction=0.0),
                                    dict(num_domains=100),
                                    dict(patches_min=5, patches_max=4)])
    def test_invalid_spec(self, tmp_path, kw):
        with pytest.raises(ConfigError):
            gen_synthetic(SyntheticSpec(num_bags=10, **kw), tmp_path)
