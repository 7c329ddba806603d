import math
import os

import numpy as np
import pytest

from fetalbiometry import geometry as G
from fetalbiometry import synthdata as S
from fetalbiometry.network import OrganClass
from fetalbiometry.synthdata import (FemurTruth, ScanSample, generate_dataset,
                                     generate_sample, load_dataset,
                                     overlay_annotations, split_of,
                                     split_subjects, true_biometric_mm)
from fetalbiometry.tensor import Tensor
from fetalbiometry.training import dice_loss


def sample(organ, seed=0, size=64):
    return generate_sample(organ, size, np.random.default_rng(seed))


class TestGenerateSample:
    def test_deterministic(self):
        for organ in OrganClass:
            a = sample(organ, seed=4)
            b = sample(organ, seed=4)
            np.testing.assert_array_equal(a.image, b.image)
            np.testing.assert_array_equal(a.mask, b.mask)
            assert a.truth == b.truth

    def test_small_size_rejected(self):
        with pytest.raises(ValueError):
            generate_sample(OrganClass.BRAIN, 31, np.random.default_rng(0))

    def test_image_range_and_shapes(self):
        for organ in OrganClass:
            s = sample(organ, seed=1)
            assert s.image.shape == s.mask.shape == (64, 64)
            assert s.image.min() >= 0.0 and s.image.max() <= 1.0
            assert s.mask.dtype == bool and s.mask.any()

    @pytest.mark.parametrize("organ", [OrganClass.BRAIN, OrganClass.ABDOMEN])
    def test_ring_circumference_round_trip(self, organ):
        for seed in range(10):
            s = sample(organ, seed=seed)
            fit = G.fit_filled_ellipse(s.mask)
            truth_c = G.ellipse_circumference(s.truth)
            assert abs(G.ellipse_circumference(fit) - truth_c) / truth_c <= 0.02, seed

    def test_femur_rect_length_round_trip(self):
        for seed in range(10):
            s = sample(OrganClass.FEMUR, seed=seed)
            rect = G.fit_min_rect(s.mask)
            assert abs(rect.length - s.truth.length) <= 2.0, seed

    def test_dice_self_overlap(self):
        for organ in OrganClass:
            m = Tensor(sample(organ, seed=2).mask.astype(float)[None, None])
            assert dice_loss(m, m).item() <= 1e-6

    def test_true_biometric_mm(self):
        s = sample(OrganClass.BRAIN, seed=3)
        expect = G.ellipse_circumference(s.truth) * s.pixel_spacing_mm
        assert true_biometric_mm(s) == expect
        f = sample(OrganClass.FEMUR, seed=3)
        assert true_biometric_mm(f) == f.truth.length * f.pixel_spacing_mm


class TestOverlay:
    def test_ring_annotation_recovers_truth(self):
        for organ in (OrganClass.BRAIN, OrganClass.ABDOMEN):
            for seed in range(5):
                s = sample(organ, seed=seed)
                annot = overlay_annotations(s) > 0.5
                f = G.recover_annotated_ellipse(annot)
                assert abs(f.a - s.truth.a) / s.truth.a <= 0.05, (organ, seed)
                assert abs(f.b - s.truth.b) / s.truth.b <= 0.05, (organ, seed)

    def test_femur_crosses_recover_endpoints(self):
        for seed in range(5):
            s = sample(OrganClass.FEMUR, seed=seed)
            peaks = G.match_cross_patterns(overlay_annotations(s), arm=3, top_k=2)
            assert len(peaks) == 2
            ends = [(s.truth.x1, s.truth.y1), (s.truth.x2, s.truth.y2)]
            for (px, py), _ in peaks:
                assert min(math.hypot(px - ex, py - ey) for ex, ey in ends) <= 1.0

    def test_unannotated_region_is_empty(self):
        s = sample(OrganClass.BRAIN, seed=1)
        annot = overlay_annotations(s)
        outline = G.rasterize_ellipse_mask(s.truth, 64, 64, filled=False)
        assert not annot[~G.dilate(outline, 1)].any()


class TestSplits:
    def test_disjoint_and_fractions_many_seeds(self):
        for seed in range(20):
            splits = split_subjects(range(50), seed)
            counts = {k: sum(1 for v in splits.values() if v == k)
                      for k in ("train", "val", "test")}
            assert sum(counts.values()) == 50
            assert abs(counts["test"] - 10) <= 2
            assert abs(counts["val"] - 4) <= 2
            assert abs(counts["train"] - 36) <= 2

    def test_split_of_filters(self):
        samples = [ScanSample(image=np.zeros((2, 2)), mask=np.zeros((2, 2), bool),
                              organ=OrganClass.BRAIN, truth=None, subject_id=i,
                              split=s) for i, s in enumerate(["train", "test", "train"])]
        assert len(split_of(samples, "train")) == 2
        assert len(split_of(samples, "test")) == 1


class TestDataset:
    def test_counts_and_balance(self, tmp_path):
        samples = generate_dataset(str(tmp_path), 10, 6, 32, seed=1)
        assert len(samples) == 60
        for organ in OrganClass:
            n = sum(1 for s in samples if s.organ == organ)
            assert abs(n - 20) <= 2
        assert os.path.exists(tmp_path / "manifest.csv")

    def test_too_few_subjects_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            generate_dataset(str(tmp_path), 4, 2, 32, seed=0)

    def test_regeneration_is_byte_identical(self, tmp_path):
        generate_dataset(str(tmp_path / "a"), 6, 3, 32, seed=9)
        generate_dataset(str(tmp_path / "b"), 6, 3, 32, seed=9)
        ma = (tmp_path / "a" / "manifest.csv").read_bytes()
        mb = (tmp_path / "b" / "manifest.csv").read_bytes()
        assert ma == mb
        stem = "s0000_00_brain.pgm"
        assert (tmp_path / "a" / "images" / stem).read_bytes() == \
               (tmp_path / "b" / "images" / stem).read_bytes()

    def test_load_round_trip(self, tmp_path):
        written = generate_dataset(str(tmp_path), 6, 3, 32, seed=5)
        loaded = load_dataset(str(tmp_path / "manifest.csv"))
        assert len(loaded) == len(written)
        by_stem = {s.stem: s for s in written}
        for s in loaded:
            w = by_stem[s.stem]
            assert s.organ == w.organ and s.subject_id == w.subject_id
            assert s.split == w.split
            np.testing.assert_array_equal(s.mask, w.mask)
            # image round-trips through 8-bit quantization
            assert np.abs(s.image - w.image).max() <= 0.5 / 255
            if isinstance(w.truth, FemurTruth):
                assert abs(s.truth.length - w.truth.length) <= 2e-6
            else:
                assert abs(s.truth.a - w.truth.a) <= 1e-6

    def test_missing_image_names_row(self, tmp_path):
        generate_dataset(str(tmp_path), 6, 1, 32, seed=2)
        victim = next((tmp_path / "images").iterdir())
        victim.unlink()
        with pytest.raises(ValueError, match="row"):
            load_dataset(str(tmp_path / "manifest.csv"))

    def test_malformed_truth_names_row(self, tmp_path):
        generate_dataset(str(tmp_path), 6, 1, 32, seed=3)
        manifest = tmp_path / "manifest.csv"
        lines = manifest.read_text().splitlines()
        parts = lines[2].split(",")
        parts[3] = "1.0;2.0;3.0"
        lines[2] = ",".join(parts)
        manifest.write_text("\n".join(lines) + "\n")
        with pytest.raises(ValueError, match="row 3"):
            load_dataset(str(manifest))

    def test_wrong_header_rejected(self, tmp_path):
        manifest = tmp_path / "manifest.csv"
        manifest.write_text("a,b,c\n")
        with pytest.raises(ValueError, match="header"):
            load_dataset(str(manifest))


class TestSeparability:
    def test_three_feature_baseline_accuracy(self):
        feats, labels = [], []
        for i in range(300):
            organ = OrganClass(i % 3)
            s = generate_sample(organ, 64, np.random.default_rng([1234, i]))
            rect = G.fit_min_rect(s.mask)
            feats.append([s.image[s.mask].mean(), float(s.mask.sum()),
                          rect.length / max(rect.breadth, 1e-9)])
            labels.append(int(organ))
        x = np.asarray(feats)
        y = np.asarray(labels)
        x = (x - x.mean(axis=0)) / x.std(axis=0)
        cents = np.stack([x[y == k].mean(axis=0) for k in range(3)])
        pred = np.argmin(((x[:, None, :] - cents[None]) ** 2).sum(-1), axis=1)
        assert (pred == y).mean() >= 0.90
