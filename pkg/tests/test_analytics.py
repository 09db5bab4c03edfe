import csv
import itertools

import numpy as np
import pytest

from croprot import analytics
from croprot.errors import ContractError
from croprot.model import CropModel
from croprot.training import PredictionRecord

from conftest import tiny_dims


def rec(true, pred, L=4):
    z = np.zeros(L, dtype=np.float32)
    z[pred] = 1.0
    return PredictionRecord(0, 1, z, true)


class TestConfusion:
    def test_counts(self):
        records = [rec(0, 0), rec(0, 1), rec(1, 1), rec(1, 1)]
        cm = analytics.confusion(records, 4)
        assert cm[0, 0] == 1 and cm[0, 1] == 1 and cm[1, 1] == 2
        assert cm.sum() == 4

    def test_rows_are_truth(self):
        cm = analytics.confusion([rec(2, 0)], 4)
        assert cm[2, 0] == 1 and cm[0, 2] == 0


class TestMetrics:
    def test_hand_case(self):
        # cm = [[5, 5], [0, 10]]: OA 0.75, IoU (0.5, 2/3), mIoU 7/12
        cm = np.array([[5, 5], [0, 10]])
        oa, iou, miou = analytics.metrics(cm)
        assert oa == pytest.approx(0.75)
        assert iou[0] == pytest.approx(0.5)
        assert iou[1] == pytest.approx(2 / 3)
        assert miou == pytest.approx(7 / 12)

    def test_perfect_prediction(self):
        oa, iou, miou = analytics.metrics(np.diag([3, 4, 5]))
        assert oa == 1.0 and miou == 1.0
        assert np.allclose(iou, 1.0)

    def test_absent_class_is_nan_and_excluded(self):
        cm = np.array([[2, 0, 0], [0, 2, 0], [0, 0, 0]])
        _, iou, miou = analytics.metrics(cm)
        assert np.isnan(iou[2])
        assert miou == pytest.approx(1.0)

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            analytics.metrics(np.zeros((3, 3)))

    def test_matches_per_sample_oracle(self):
        # IoU_k = TP / (TP + FP + FN) counted sample by sample
        rng = np.random.default_rng(0)
        for _ in range(100):
            L = int(rng.integers(2, 6))
            n = int(rng.integers(1, 40))
            truth = rng.integers(0, L, n)
            pred = rng.integers(0, L, n)
            records = [rec(t, p, L) for t, p in zip(truth, pred)]
            oa, iou, miou = analytics.metrics(analytics.confusion(records, L))
            assert oa == pytest.approx(np.mean(truth == pred))
            vals = []
            for k in range(L):
                tp = np.sum((truth == k) & (pred == k))
                fp = np.sum((truth != k) & (pred == k))
                fn = np.sum((truth == k) & (pred != k))
                if tp + fp + fn == 0:
                    assert np.isnan(iou[k])
                else:
                    assert iou[k] == pytest.approx(tp / (tp + fp + fn))
                    vals.append(tp / (tp + fp + fn))
            assert miou == pytest.approx(np.mean(vals))


class TestImprovement:
    def test_delta_and_rho(self):
        report = analytics.improvement([0.8, 0.5], [0.6, 0.5])
        assert report.delta == pytest.approx([0.2, 0.0])
        assert report.rho[0] == pytest.approx(0.2 / 0.4)
        assert report.rho[1] == pytest.approx(0.0)

    def test_saturated_baseline_rho_nan(self):
        report = analytics.improvement([1.0], [1.0])
        assert np.isnan(report.rho[0])

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ContractError):
            analytics.improvement([0.5], [0.5, 0.6])


class TestRotationCoverage:
    def test_hand_case(self):
        # anchored on 0: rotation A x6, B x3, C x1
        seqs = (
            [(0, 1, 1)] * 6 + [(0, 2, 2)] * 3 + [(0, 3, 3)]
            + [(1, 1, 1)] * 5  # other anchor, ignored
        )
        assert analytics.rotation_coverage(seqs, 0, 50) == 1
        assert analytics.rotation_coverage(seqs, 0, 75) == 2
        assert analytics.rotation_coverage(seqs, 0, 90) == 2
        assert analytics.rotation_coverage(seqs, 0, 100) == 3

    def test_exact_percentage_boundary(self):
        # top rotation covers exactly 90% of 10 successions
        seqs = [(0, 0, 0)] * 9 + [(0, 1, 1)]
        assert analytics.rotation_coverage(seqs, 0, 90) == 1

    def test_absent_anchor_is_none(self):
        assert analytics.rotation_coverage([(1, 1, 1)], 0, 50) is None

    def test_invalid_percentage(self):
        with pytest.raises(ContractError):
            analytics.rotation_coverage([(0, 0, 0)], 0, 0)
        with pytest.raises(ContractError):
            analytics.rotation_coverage([(0, 0, 0)], 0, 101)

    def test_matches_exhaustive_oracle(self):
        # smallest subset of rotations reaching the target, found by
        # trying all subset sizes in order
        rng = np.random.default_rng(1)
        for trial in range(50):
            L = int(rng.integers(2, 4))
            n = int(rng.integers(1, 25))
            seqs = [tuple(rng.integers(0, L, 3)) for _ in range(n)]
            anchor = int(rng.integers(0, L))
            p = float(rng.choice([25, 50, 66, 75, 90, 100]))
            got = analytics.rotation_coverage(seqs, anchor, p)
            succ = [s for s in seqs if s[0] == anchor]
            if not succ:
                assert got is None
                continue
            from collections import Counter

            counts = sorted(Counter(succ).values(), reverse=True)
            need = p / 100 * len(succ)
            best = None
            for size in range(1, len(counts) + 1):
                for combo in itertools.combinations(counts, size):
                    if sum(combo) >= need - 1e-9:
                        best = size
                        break
                if best is not None:
                    break
            assert got == best

    def test_observed_and_possible_counts(self):
        seqs = [(0, 1, 2), (0, 1, 2), (1, 1, 1)]
        assert analytics.count_observed_rotations(seqs) == 2
        assert analytics.possible_rotations(20, 3) == 8000


class TestRotationTable:
    def test_rows_and_mean(self):
        seqs = [(0, 0, 0)] * 4 + [(1, 2, 1)] * 2 + [(1, 1, 1)] * 2
        rows, mean = analytics.rotation_table(seqs, 3)
        assert set(rows) == {0, 1}  # class 2 never anchors year 1
        assert rows[0] == [1, 1, 1, 1]
        assert rows[1] == [1, 2, 2, 2]
        assert mean == [1.0, 1.5, 1.5, 1.5]

    def test_csv_export(self, tmp_path):
        seqs = [(0, 0, 0)] * 4 + [(1, 2, 1)] * 2
        rows, mean = analytics.rotation_table(seqs, 3)
        path = tmp_path / "rot.csv"
        analytics.write_rotation_table_csv(path, rows, mean)
        lines = list(csv.reader(open(path)))
        assert lines[0] == ["class", "50", "75", "90", "100"]
        assert lines[-1][0] == "mean"


class TestCategorize:
    def test_three_categories(self):
        seqs = (
            [(0, 0, 0)] * 19 + [(0, 1, 0)]          # 95% constant -> Permanent
            + [(1, 2, 1)] * 16 + [(1, i % 3, (i * 7) % 3) for i in range(4)]
            # one dominant rotation -> Structured
        )
        # class 2: 40 distinct single-occurrence rotations -> Other
        seqs += [(2, i % 11, i // 11) for i in range(40)]
        assignment = analytics.categorize(seqs, 11)
        assert assignment[0] == analytics.PERMANENT
        assert assignment[1] == analytics.STRUCTURED
        assert assignment[2] == analytics.OTHER

    def test_unobserved_class_absent(self):
        assignment = analytics.categorize([(0, 0, 0)], 3)
        assert 1 not in assignment and 2 not in assignment

    def test_group_metrics(self):
        report = analytics.improvement([0.9, 0.5, 0.3], [0.8, 0.4, 0.3])
        assignment = {0: analytics.PERMANENT, 1: analytics.STRUCTURED,
                      2: analytics.STRUCTURED}
        out = analytics.group_metrics(report, assignment)
        assert out[analytics.PERMANENT]["miou"] == pytest.approx(0.9)
        assert out[analytics.STRUCTURED]["miou"] == pytest.approx(0.4)
        assert out[analytics.STRUCTURED]["mean_delta"] == pytest.approx(0.05)
        assert analytics.OTHER not in out


class TestExports:
    def test_confusion_csv(self, tmp_path):
        cm = np.array([[2, 1], [0, 3]])
        path = tmp_path / "cm.csv"
        analytics.write_confusion_csv(path, cm)
        lines = list(csv.reader(open(path)))
        assert lines[0] == ["truth\\pred", "class_00", "class_01"]
        assert lines[1] == ["class_00", "2", "1"]
        assert lines[2] == ["class_01", "0", "3"]

    def test_embedding_export(self, tmp_path, small_dataset):
        ds, cfg = small_dataset
        dims = tiny_dims(num_classes=cfg.num_classes)
        dims.channels = cfg.channels
        model = CropModel(dims, "single", seed=0)
        parcels = ds.parcels[:5]
        path = tmp_path / "emb.csv"
        analytics.export_embeddings(model, parcels, path, seed=3)
        lines = list(csv.reader(open(path)))
        assert lines[0][:3] == ["parcel_id", "year", "label"]
        assert len(lines[0]) == 3 + dims.descriptor
        assert len(lines) == 1 + 3 * len(parcels)
        # deterministic for a fixed seed
        path2 = tmp_path / "emb2.csv"
        analytics.export_embeddings(model, parcels, path2, seed=3)
        assert path.read_text() == path2.read_text()
        path3 = tmp_path / "emb3.csv"
        analytics.export_embeddings(model, parcels, path3, seed=4)
        assert path.read_text() != path3.read_text()
