import numpy as np
import pytest

from cridiff.data import (
    DatasetManifest,
    PhantomSpec,
    generate_phantom,
    load_dataset,
    load_image01,
    load_mask,
    save_manifest,
    save_png,
    split_counts,
    split_manifest,
    write_dataset,
)


class TestGeneratePhantom:
    def test_deterministic_per_seed(self):
        spec = PhantomSpec()
        i1, m1 = generate_phantom(spec, np.random.default_rng(7))
        i2, m2 = generate_phantom(spec, np.random.default_rng(7))
        np.testing.assert_array_equal(i1, i2)
        np.testing.assert_array_equal(m1, m2)
        i3, _ = generate_phantom(spec, np.random.default_rng(8))
        assert not np.array_equal(i1, i3)

    def test_ranges_and_shapes(self):
        spec = PhantomSpec(size=(32, 64))
        img, mask = generate_phantom(spec, np.random.default_rng(0))
        assert img.shape == (32, 64) and mask.shape == (32, 64)
        assert img.min() >= 0.0 and img.max() <= 1.0
        assert set(np.unique(mask)) <= {0, 1}

    def test_noiseless_hard_edge_is_two_level(self):
        # falloff 0 + noise 0 collapses the image to exactly bg/fg levels,
        # with the fg support equal to the mask
        spec = PhantomSpec(noise_sigma=0.0, falloff=0.0)
        img, mask = generate_phantom(spec, np.random.default_rng(3))
        levels = np.unique(img)
        assert len(levels) == 2
        np.testing.assert_array_equal(img == levels[1], mask.astype(bool))

    def test_area_bounds_hold_over_many_draws(self):
        spec = PhantomSpec(area_frac=(0.05, 0.3))
        rng = np.random.default_rng(1)
        for _ in range(1000):
            _, mask = generate_phantom(spec, rng)
            assert 0.05 <= mask.mean() <= 0.3

    def test_unsatisfiable_area_raises(self):
        spec = PhantomSpec(axes_frac=(0.34, 0.35), area_frac=(0.02, 0.05))
        with pytest.raises(ValueError):
            generate_phantom(spec, np.random.default_rng(0))

    def test_bad_size_rejected(self):
        with pytest.raises(ValueError):
            PhantomSpec(size=(30, 64))

    def test_texture_changes_image_not_mask(self):
        plain = PhantomSpec(texture=False)
        textured = PhantomSpec(texture=True)
        ip, mp = generate_phantom(plain, np.random.default_rng(5))
        it, mt = generate_phantom(textured, np.random.default_rng(5))
        np.testing.assert_array_equal(mp, mt)
        assert not np.array_equal(ip, it)


class TestPngRoundtrip:
    def test_image_roundtrip_quantized(self, tmp_path):
        rng = np.random.default_rng(0)
        arr = rng.random((16, 16))
        save_png(tmp_path / "a.png", arr)
        back = load_image01(tmp_path / "a.png")
        assert np.abs(back - arr).max() <= 0.5 / 255 + 1e-12

    def test_mask_binarize_rule(self, tmp_path):
        save_png(tmp_path / "m.png", np.array([[0.0, 127 / 255, 128 / 255, 1.0]]))
        np.testing.assert_array_equal(
            load_mask(tmp_path / "m.png"), [[0, 0, 1, 1]]
        )


class TestDatasetIO:
    def test_write_then_load(self, tmp_path):
        man = write_dataset(tmp_path, 6, PhantomSpec(), seed=11)
        assert len(man.pairs) == 6
        loaded = load_dataset(tmp_path)
        assert [p[0].name for p in loaded.pairs] == [
            f"phantom_{i:04d}.png" for i in range(6)
        ]
        mask = load_mask(loaded.pairs[0][1])
        assert set(np.unique(mask)) <= {0, 1}

    def test_write_is_deterministic(self, tmp_path):
        write_dataset(tmp_path / "a", 4, PhantomSpec(), seed=3)
        write_dataset(tmp_path / "b", 4, PhantomSpec(), seed=3)
        for i in range(4):
            p = f"images/phantom_{i:04d}.png"
            assert (tmp_path / "a" / p).read_bytes() == (tmp_path / "b" / p).read_bytes()

    def test_missing_dirs(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path)

    def test_empty_dirs(self, tmp_path):
        (tmp_path / "images").mkdir()
        (tmp_path / "masks").mkdir()
        with pytest.raises(ValueError, match="no pairs"):
            load_dataset(tmp_path)

    def test_unpaired_stem(self, tmp_path):
        write_dataset(tmp_path, 2, PhantomSpec(), seed=0)
        (tmp_path / "masks" / "phantom_0001.png").unlink()
        with pytest.raises(ValueError, match="unpaired"):
            load_dataset(tmp_path)

    def test_size_mismatch(self, tmp_path):
        write_dataset(tmp_path, 1, PhantomSpec(), seed=0)
        save_png(tmp_path / "masks" / "phantom_0000.png", np.zeros((32, 32)))
        with pytest.raises(ValueError, match="size mismatch"):
            load_dataset(tmp_path)


class TestSplits:
    def test_counts_enumeration(self):
        fr = (0.8, 0.1, 0.1)
        for n in range(1, 21):
            counts = split_counts(n, fr)
            assert sum(counts) == n
            assert all(c >= 0 for c in counts)
            # no count strays more than 1 from its real-valued target
            for c, f in zip(counts, fr):
                assert abs(c - n * f) < 1.0

    def test_counts_examples(self):
        assert split_counts(10, (0.8, 0.1, 0.1)) == [8, 1, 1]
        assert split_counts(5, (0.6, 0.2, 0.2)) == [3, 1, 1]

    def test_bad_fractions(self):
        with pytest.raises(ValueError):
            split_counts(10, (0.5, 0.2, 0.2))

    def test_split_deterministic_and_disjoint(self, tmp_path):
        man = write_dataset(tmp_path, 10, PhantomSpec(), seed=1)
        split_manifest(man, (0.8, 0.1, 0.1), seed=5)
        all_idx = man.splits["train"] + man.splits["val"] + man.splits["test"]
        assert sorted(all_idx) == list(range(10))
        man2 = DatasetManifest(pairs=list(man.pairs))
        split_manifest(man2, (0.8, 0.1, 0.1), seed=5)
        assert man2.splits == man.splits
        man3 = DatasetManifest(pairs=list(man.pairs))
        split_manifest(man3, (0.8, 0.1, 0.1), seed=6)
        assert man3.splits != man.splits

    def test_subset_returns_pairs(self, tmp_path):
        man = write_dataset(tmp_path, 10, PhantomSpec(), seed=1)
        split_manifest(man, (0.8, 0.1, 0.1), seed=5)
        assert len(man.subset("val")) == 1
        assert man.subset("val")[0] in man.pairs

    def test_too_few_items(self, tmp_path):
        man = DatasetManifest(pairs=[("a", "b")] * 2)
        with pytest.raises(ValueError):
            split_manifest(man, (0.4, 0.3, 0.3), seed=0)

    def test_save_manifest_format(self, tmp_path):
        man = write_dataset(tmp_path, 5, PhantomSpec(), seed=2)
        split_manifest(man, (0.6, 0.2, 0.2), seed=4)
        out = tmp_path / "manifest.tsv"
        save_manifest(man, out)
        lines = out.read_text().strip().splitlines()
        assert lines[0].startswith("# seed=4 fractions=(0.6, 0.2, 0.2)")
        body = [l.split("\t") for l in lines[1:]]
        assert len(body) == 5
        assert [r[0] for r in body].count("train") == 3
