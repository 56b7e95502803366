import hashlib

import numpy as np
import pytest

from pni import benchmark, tensorio
from pni.benchmark import BenchSpec


def small_spec(**kwargs):
    base = dict(grid=6, palette=4, cell_px=8, n_train=8, n_test_normal=3,
                n_permute=3, n_blob=3, seed=0)
    base.update(kwargs)
    return BenchSpec(**base)


def cells_of(image, cell_px):
    g = image.shape[0] // cell_px
    return (
        image.reshape(g, cell_px, g, cell_px)
        .transpose(0, 2, 1, 3)
        .reshape(g * g, cell_px * cell_px)
    )


class TestGeneration:
    def test_deterministic(self):
        a = benchmark.generate_benchmark(small_spec())
        b = benchmark.generate_benchmark(small_spec())
        for x, y in zip(a.train_images, b.train_images):
            np.testing.assert_array_equal(x, y)
        for x, y in zip(a.test_masks, b.test_masks):
            np.testing.assert_array_equal(x, y)

    def test_split_sizes_and_labels(self):
        data = benchmark.generate_benchmark(small_spec())
        assert len(data.train_images) == 8
        assert len(data.test_images) == 9
        assert data.test_labels == [0] * 3 + [1] * 6
        assert data.test_kinds.count("permute") == 3
        assert data.test_kinds.count("blob") == 3

    def test_masks_match_kinds(self):
        data = benchmark.generate_benchmark(small_spec())
        for mask, kind in zip(data.test_masks, data.test_kinds):
            if kind == "normal":
                assert not mask.any()
            else:
                assert mask.any()
            assert set(np.unique(mask)) <= {0, 1}

    def test_permuted_cells_locally_normal(self):
        # every swapped cell's texture must appear (noise aside) among the
        # training cells: nearest-cell distance stays at the noise floor
        spec = small_spec(n_train=20)
        data = benchmark.generate_benchmark(spec)
        train_cells = np.concatenate(
            [cells_of(im, spec.cell_px) for im in data.train_images]
        )
        normal_dists = []
        for im, kind in zip(data.test_images, data.test_kinds):
            if kind == "normal":
                for cell in cells_of(im, spec.cell_px):
                    normal_dists.append(
                        np.linalg.norm(train_cells - cell, axis=1).min()
                    )
        cutoff = np.percentile(normal_dists, 99)
        for im, mask, kind in zip(data.test_images, data.test_masks, data.test_kinds):
            if kind != "permute":
                continue
            cell_masks = cells_of(mask.astype(float), spec.cell_px)
            for cell, cm in zip(cells_of(im, spec.cell_px), cell_masks):
                if cm.sum() == cm.size:  # fully swapped cell
                    dist = np.linalg.norm(train_cells - cell, axis=1).min()
                    assert dist <= cutoff * 1.5

    def test_blob_cells_locally_abnormal(self):
        spec = small_spec(n_train=20)
        data = benchmark.generate_benchmark(spec)
        train_cells = np.concatenate(
            [cells_of(im, spec.cell_px) for im in data.train_images]
        )
        normal_dists = []
        for im, kind in zip(data.test_images, data.test_kinds):
            if kind == "normal":
                for cell in cells_of(im, spec.cell_px):
                    normal_dists.append(
                        np.linalg.norm(train_cells - cell, axis=1).min()
                    )
        cutoff = np.percentile(normal_dists, 99)
        found = 0
        for im, mask, kind in zip(data.test_images, data.test_masks, data.test_kinds):
            if kind != "blob":
                continue
            cell_masks = cells_of(mask.astype(float), spec.cell_px)
            for cell, cm in zip(cells_of(im, spec.cell_px), cell_masks):
                if cm.mean() >= 0.9:  # cell essentially inside the blob
                    dist = np.linalg.norm(train_cells - cell, axis=1).min()
                    assert dist > cutoff
                    found += 1
        assert found > 0

    def test_swap_tokens_stay_out_of_context(self):
        spec = small_spec()
        rng = np.random.default_rng(spec.seed)
        rng.uniform(0.15, 0.85, (spec.palette, spec.cell_px, spec.cell_px))
        layout = benchmark._make_layout(spec, rng)
        for _ in range(20):
            (r1, c1), (r2, c2) = benchmark._pick_swap_cells(layout, rng)
            assert layout[r2, c2] not in benchmark._window_tokens(layout, r1, c1)
            assert layout[r1, c1] not in benchmark._window_tokens(layout, r2, c2)

    def test_infeasible_specs_rejected(self):
        with pytest.raises(ValueError, match="infeasible"):
            benchmark.generate_benchmark(small_spec(palette=1))
        with pytest.raises(ValueError, match="infeasible"):
            benchmark.generate_benchmark(small_spec(grid=1))
        with pytest.raises(ValueError, match="infeasible"):
            # stripes with palette 2: the swapped token is always adjacent
            benchmark.generate_benchmark(small_spec(palette=2))

    def test_noise_bound_enforced(self):
        with pytest.raises(ValueError, match="noise"):
            benchmark.generate_benchmark(small_spec(noise=0.5))

    def test_values_in_unit_interval(self):
        data = benchmark.generate_benchmark(small_spec())
        for im in data.train_images + data.test_images:
            assert im.min() >= 0.0 and im.max() <= 1.0


class TestDefaultSpec:
    def test_default_spec_has_60_train_entries(self, tmp_path):
        data = benchmark.generate_benchmark(BenchSpec())
        benchmark.write_benchmark(data, tmp_path)
        rows, _ = benchmark.read_manifest(tmp_path)
        assert len([r for r in rows if r["split"] == "train"]) == 60
        assert len([r for r in rows if r["split"] == "test"]) == 40


class TestWriteRead:
    def test_round_trip_manifest(self, tmp_path):
        data = benchmark.generate_benchmark(small_spec())
        benchmark.write_benchmark(data, tmp_path)
        rows, meta = benchmark.read_manifest(tmp_path)
        assert meta["seed"] == "0"
        train = [r for r in rows if r["split"] == "train"]
        test = [r for r in rows if r["split"] == "test"]
        assert len(train) == 8 and len(test) == 9
        assert all(r["mask"] is None for r in train)
        assert all(r["mask"] is not None for r in test)

    def test_images_survive_quantization(self, tmp_path):
        data = benchmark.generate_benchmark(small_spec())
        benchmark.write_benchmark(data, tmp_path)
        img = tensorio.read_image(tmp_path / "train" / "train_000.pgm")
        assert np.abs(img - data.train_images[0]).max() <= 0.5 / 255 + 1e-9

    def test_masks_binary_after_round_trip(self, tmp_path):
        data = benchmark.generate_benchmark(small_spec())
        benchmark.write_benchmark(data, tmp_path)
        rows, _ = benchmark.read_manifest(tmp_path)
        for r in rows:
            if r["mask"]:
                mask = tensorio.read_image(tmp_path / "masks" / r["mask"])
                assert set(np.unique(mask)) <= {0.0, 1.0}

    def test_fixed_seed_gives_identical_files(self, tmp_path):
        for sub in ("a", "b"):
            data = benchmark.generate_benchmark(small_spec())
            benchmark.write_benchmark(data, tmp_path / sub)
        for rel in sorted(p.relative_to(tmp_path / "a")
                          for p in (tmp_path / "a").rglob("*") if p.is_file()):
            ha = hashlib.sha256((tmp_path / "a" / rel).read_bytes()).hexdigest()
            hb = hashlib.sha256((tmp_path / "b" / rel).read_bytes()).hexdigest()
            assert ha == hb, f"{rel} differs between identically seeded runs"
