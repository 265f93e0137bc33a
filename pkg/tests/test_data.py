"""Synthetic attribute dataset: generation, oracle recovery, directory IO."""

import math
import os

import numpy as np
import pytest

from zslvit.data import (
    ClassPrototype,
    SynthSpec,
    ZslDataset,
    generate,
    load,
    oracle_attribute_estimate,
    save,
)
from zslvit.errors import ConfigError, ContractError, FormatError


def small_spec(**overrides):
    base = dict(
        num_seen=4,
        num_unseen=2,
        attr_dim=8,
        train_per_seen=6,
        test_per_seen=4,
        test_per_unseen=4,
        image_size=16,
        channels=1,
        grid=4,
        signal_strength=1.0,
        background_noise_std=0.25,
        attr_patch_fraction=0.5,
        seed=3,
    )
    base.update(overrides)
    return SynthSpec(**base)


def nearest_prototype(ds, est):
    best, best_d = None, None
    for p in ds.prototypes:
        d = float(np.linalg.norm(p._z - est))
        if best_d is None or d < best_d:
            best, best_d = p.class_id, d
    return best


class TestSpecValidation:
    def test_counts_must_be_positive(self):
        with pytest.raises(ConfigError):
            small_spec(num_seen=0)
        with pytest.raises(ConfigError):
            small_spec(train_per_seen=0)

    def test_grid_must_divide_image(self):
        with pytest.raises(ConfigError):
            small_spec(grid=5)

    def test_fraction_bounds(self):
        for bad in (0.0, 1.0, -0.2):
            with pytest.raises(ConfigError):
                small_spec(attr_patch_fraction=bad)

    def test_noise_and_strength(self):
        with pytest.raises(ConfigError):
            small_spec(background_noise_std=-0.1)
        with pytest.raises(ConfigError):
            small_spec(signal_strength=0.0)

    def test_too_many_classes_for_distinct_patterns(self):
        # attr_dim 4 gives one active attribute per class, so at most 4
        # distinct patterns; 6 classes cannot fit.
        spec = small_spec(attr_dim=4)
        with pytest.raises(ConfigError):
            generate(spec)

    def test_too_few_signal_cells(self):
        spec = small_spec(grid=2, image_size=16)
        with pytest.raises(ConfigError):
            generate(spec)


class TestGeneration:
    def test_split_sizes_and_shapes(self):
        ds = generate(small_spec())
        assert len(ds.splits["trs"]) == 4 * 6
        assert len(ds.splits["tes"]) == 4 * 4
        assert len(ds.splits["teu"]) == 2 * 4
        assert len(ds.images) == 24 + 16 + 8
        for img in ds.images.values():
            assert img.shape == (1, 16, 16)
            assert img.dtype == np.float64
        assert ds.seen_ids == [0, 1, 2, 3]
        assert ds.unseen_ids == [4, 5]

    def test_prototype_structure(self):
        ds = generate(small_spec())
        actives = []
        for p in ds.prototypes:
            z = p._z
            on = np.flatnonzero(z)
            assert len(on) == max(1, round(8 / 4))
            assert np.all(z[on] >= 0.5) and np.all(z[on] <= 1.0)
            actives.append(frozenset(on.tolist()))
        assert len(set(actives)) == len(actives)

    def test_generation_is_deterministic(self):
        a = generate(small_spec())
        b = generate(small_spec())
        for p, q in zip(a.prototypes, b.prototypes):
            assert np.array_equal(p._z, q._z)
        assert a.splits == b.splits
        for key in a.images:
            assert np.array_equal(a.images[key], b.images[key])
        c = generate(small_spec(seed=4))
        assert any(not np.array_equal(a.images[k], c.images[k]) for k in a.images)

    def test_noise_free_images_repeat_within_class(self):
        ds = generate(small_spec(background_noise_std=0.0))
        by_class = {}
        for key, cid in ds.splits["trs"]:
            by_class.setdefault(cid, []).append(key)
        for cid, keys in by_class.items():
            first = ds.images[keys[0]]
            for k in keys[1:]:
                assert np.array_equal(ds.images[k], first)

    def test_cells_are_exclusive(self):
        ds = generate(small_spec())
        seen = set()
        for cells in ds.attr_cells.values():
            assert len(cells) == round(0.5 * 16) // 8
            for c in cells:
                assert c not in seen
                seen.add(c)


class TestOracle:
    def test_recovers_attributes_without_noise(self):
        ds = generate(small_spec(background_noise_std=0.0))
        for key, cid in ds.splits["tes"] + ds.splits["teu"]:
            est = oracle_attribute_estimate(ds, ds.images[key])
            np.testing.assert_allclose(est, ds.prototype(cid)._z, rtol=1e-10, atol=1e-12)
            assert nearest_prototype(ds, est) == cid

    def test_classifies_under_moderate_noise(self):
        ds = generate(small_spec(background_noise_std=0.1))
        hits = 0
        items = ds.splits["tes"] + ds.splits["teu"]
        for key, cid in items:
            est = oracle_attribute_estimate(ds, ds.images[key])
            hits += nearest_prototype(ds, est) == cid
        assert hits / len(items) >= 0.95

    def test_masked_signal_drops_to_chance(self):
        ds = generate(small_spec(background_noise_std=0.0))
        p = ds.synth_spec.cell
        per_class = {}
        for key, cid in ds.splits["tes"] + ds.splits["teu"]:
            img = ds.images[key].copy()
            for cells in ds.attr_cells.values():
                for gy, gx in cells:
                    img[:, gy * p : (gy + 1) * p, gx * p : (gx + 1) * p] = 0.0
            pred = nearest_prototype(ds, oracle_attribute_estimate(ds, img))
            ok, n = per_class.get(cid, (0, 0))
            per_class[cid] = (ok + (pred == cid), n + 1)
        mean_acc = np.mean([ok / n for ok, n in per_class.values()])
        np.testing.assert_allclose(mean_acc, 1.0 / 6.0, atol=1e-12)

    def test_requires_synthetic_cell_map(self, tmp_path):
        ds = generate(small_spec())
        save(ds, tmp_path / "d")
        loaded = load(tmp_path / "d")
        with pytest.raises(ContractError):
            oracle_attribute_estimate(loaded, next(iter(loaded.images.values())))


class TestPrototypeInstrumentation:
    def test_read_counter(self):
        p = ClassPrototype(3, np.array([0.5, 0.0]), seen=True)
        assert p.read_count == 0
        _ = p.z
        _ = p.z
        assert p.read_count == 2
        _ = p._z
        assert p.read_count == 2

    def test_matrix_read_accounting(self):
        ds = generate(small_spec())
        before = ds.total_reads()
        ds.prototype_matrix(ds.seen_ids)
        assert ds.total_reads() == before + len(ds.seen_ids)

    def test_normalized_matrix(self):
        ds = generate(small_spec())
        m = ds.prototype_matrix(ds.seen_ids, normalize=True)
        np.testing.assert_allclose(np.linalg.norm(m, axis=1), 1.0, rtol=1e-12)


class TestDirectoryIO:
    def test_roundtrip_is_exact(self, tmp_path):
        ds = generate(small_spec())
        save(ds, tmp_path / "d")
        back = load(tmp_path / "d")
        assert back.attr_dim == ds.attr_dim
        assert back.channels == 1 and back.image_size == 16
        assert back.splits == ds.splits
        assert back.synth_spec == ds.synth_spec
        for p, q in zip(ds.prototypes, back.prototypes):
            assert p.class_id == q.class_id and p.seen == q.seen
            assert np.array_equal(p._z, q._z)
        for key in ds.images:
            assert np.array_equal(ds.images[key], back.images[key])

    def test_save_is_byte_deterministic(self, tmp_path):
        ds = generate(small_spec())
        save(ds, tmp_path / "a")
        save(ds, tmp_path / "b")
        for name in ("attributes.tsv", "splits.tsv"):
            fa = (tmp_path / "a" / name).read_bytes()
            fb = (tmp_path / "b" / name).read_bytes()
            assert fa == fb
        for entry in sorted(os.listdir(tmp_path / "a" / "images")):
            fa = (tmp_path / "a" / "images" / entry).read_bytes()
            fb = (tmp_path / "b" / "images" / entry).read_bytes()
            assert fa == fb

    def test_missing_files(self, tmp_path):
        with pytest.raises(FormatError):
            load(tmp_path / "nothing")

    def _saved(self, tmp_path):
        ds = generate(small_spec())
        root = tmp_path / "d"
        save(ds, root)
        return root

    def test_truncated_attribute_row(self, tmp_path):
        root = self._saved(tmp_path)
        path = root / "attributes.tsv"
        lines = path.read_text().splitlines()
        lines[2] = "2\tseen"
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(FormatError, match=r"attributes\.tsv:3"):
            load(root)

    def test_bad_role_flag(self, tmp_path):
        root = self._saved(tmp_path)
        path = root / "attributes.tsv"
        text = path.read_text().replace("\tunseen\n", "\tmystery\n", 1)
        path.write_text(text)
        with pytest.raises(FormatError, match="flag"):
            load(root)

    def test_inconsistent_attribute_count(self, tmp_path):
        root = self._saved(tmp_path)
        path = root / "attributes.tsv"
        lines = path.read_text().splitlines()
        parts = lines[1].split("\t")
        lines[1] = "\t".join(parts[:1] + parts[2:])
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(FormatError, match="expected 8"):
            load(root)

    def test_unknown_split_label(self, tmp_path):
        root = self._saved(tmp_path)
        path = root / "splits.tsv"
        text = path.read_text().replace("\ttrs\n", "\tbogus\n", 1)
        path.write_text(text)
        with pytest.raises(FormatError, match="unknown split"):
            load(root)

    def test_role_split_mismatch(self, tmp_path):
        root = self._saved(tmp_path)
        path = root / "splits.tsv"
        text = path.read_text().replace("\tteu\n", "\ttrs\n", 1)
        path.write_text(text)
        with pytest.raises(FormatError, match="unseen class"):
            load(root)

    def test_missing_image_blob(self, tmp_path):
        root = self._saved(tmp_path)
        victim = sorted(os.listdir(root / "images"))[0]
        os.remove(root / "images" / victim)
        with pytest.raises(FormatError, match="missing image"):
            load(root)

    def test_corrupt_image_blob(self, tmp_path):
        root = self._saved(tmp_path)
        victim = sorted(os.listdir(root / "images"))[0]
        (root / "images" / victim).write_bytes(b"NOTATENS" + b"\0" * 16)
        with pytest.raises(FormatError):
            load(root)

    def test_blank_lines_tolerated(self, tmp_path):
        root = self._saved(tmp_path)
        for name in ("attributes.tsv", "splits.tsv"):
            path = root / name
            path.write_text(path.read_text() + "\n\n")
        back = load(root)
        assert len(back.prototypes) == 6
