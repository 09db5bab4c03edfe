import numpy as np
import pytest

from croprot.calibration import (
    DEFAULT_BINS,
    TemperatureScaler,
    _bin_index,
    apply_temperature,
    calibrate_records,
    ece,
    fit_temperature,
    nll,
    reliability,
    write_reliability_csv,
)
from croprot.errors import ContractError
from croprot.training import PredictionRecord


def make_records(logits, labels):
    return [
        PredictionRecord(i, 1, np.asarray(z, dtype=np.float32), int(l))
        for i, (z, l) in enumerate(zip(logits, labels))
    ]


def synthetic_records(tau_true, n=2000, num_classes=6, seed=0):
    """Draw labels from softmax(z / tau_true): the NLL-optimal temperature
    for these records approaches tau_true as n grows."""
    rng = np.random.default_rng(seed)
    logits = rng.normal(0, 2, (n, num_classes))
    labels = [
        rng.choice(num_classes, p=apply_temperature(z, tau_true)) for z in logits
    ]
    return make_records(logits, labels)


class TestTemperature:
    def test_tau_one_is_plain_softmax(self):
        z = np.array([1.0, 2.0, 3.0])
        p = apply_temperature(z, 1.0)
        e = np.exp(z)
        assert np.allclose(p, e / e.sum())

    def test_huge_tau_flattens(self):
        p = apply_temperature(np.array([5.0, -3.0, 1.0]), 1e6)
        assert np.allclose(p, 1 / 3, atol=1e-5)

    def test_argmax_preserved(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            z = rng.normal(0, 3, 5)
            tau = float(rng.uniform(0.05, 20))
            assert apply_temperature(z, tau).argmax() == z.argmax()

    def test_nonpositive_tau_rejected(self):
        with pytest.raises(ContractError):
            apply_temperature(np.zeros(3), 0.0)
        with pytest.raises(ContractError):
            TemperatureScaler(tau=-1.0)


class TestFit:
    def test_recovers_unit_temperature(self):
        scaler = fit_temperature(synthetic_records(1.0))
        assert abs(scaler.tau - 1.0) < 0.05

    def test_recovers_overconfident_scale(self):
        scaler = fit_temperature(synthetic_records(5.0, n=4000, seed=2))
        assert scaler.tau == pytest.approx(5.0, rel=0.10)

    def test_never_worse_than_unit(self):
        for seed in range(3):
            records = synthetic_records(2.0, n=300, seed=seed)
            scaler = fit_temperature(records)
            assert nll(records, scaler.tau) <= nll(records, 1.0) + 1e-12

    def test_single_record(self):
        scaler = fit_temperature(make_records([[3.0, 0.0]], [0]))
        assert scaler.tau > 0

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            fit_temperature([])

    def test_calibrate_records_attaches_posteriors(self):
        records = make_records([[1.0, 0.0], [0.0, 1.0]], [0, 1])
        out = calibrate_records(records, 2.0)
        assert out is records
        for r in records:
            assert r.posterior is not None
            assert r.posterior.sum() == pytest.approx(1.0, abs=1e-6)
            assert np.allclose(r.posterior, apply_temperature(r.logits, 2.0))


class TestBinning:
    def test_edges_go_to_lower_bin(self):
        # bins partition (0, 1]: 0.2 with 5 bins is the top edge of bin 0
        assert _bin_index(0.2, 5) == 0
        assert _bin_index(0.2 + 1e-9, 5) == 1
        assert _bin_index(1.0, 5) == 4
        assert _bin_index(1e-12, 5) == 0

    def test_default_bin_count(self):
        assert DEFAULT_BINS == 15
        records = calibrate_records(make_records([[2.0, 0.0]], [0]), 1.0)
        assert reliability(records).n_bins == 15

    def test_counts_partition_records(self):
        records = calibrate_records(
            synthetic_records(1.0, n=500, seed=3), 1.0
        )
        bins = reliability(records, 10)
        assert bins.counts.sum() == 500

    def test_requires_posteriors(self):
        with pytest.raises(ContractError):
            reliability(make_records([[1.0, 0.0]], [0]))


class TestEce:
    def _record_with(self, confidence, correct):
        # two-class posterior (confidence, 1-confidence); prediction is class 0
        z = np.array([confidence, 1 - confidence], dtype=np.float32)
        r = PredictionRecord(0, 1, z, 0 if correct else 1)
        r.posterior = z.copy()
        return r

    def test_perfectly_calibrated_bin(self):
        # four records at confidence 0.75, three of four correct -> ECE 0
        records = [self._record_with(0.75, i < 3) for i in range(4)]
        assert ece(records, n_bins=2) == pytest.approx(0.0, abs=1e-9)

    def test_fully_overconfident(self):
        # always confidence ~1.0 but never correct -> ECE ~1
        records = [self._record_with(0.999, False) for _ in range(10)]
        assert ece(records, n_bins=5) == pytest.approx(0.999, abs=1e-6)

    def test_hand_computed_mixture(self):
        # bin A: 2 records at conf 0.9, both correct  -> |1.0 - 0.9| = 0.1
        # bin B: 2 records at conf 0.6, one correct   -> |0.5 - 0.6| = 0.1
        records = [
            self._record_with(0.9, True),
            self._record_with(0.9, True),
            self._record_with(0.6, True),
            self._record_with(0.6, False),
        ]
        assert ece(records, n_bins=4) == pytest.approx(0.1, abs=1e-6)

    def test_empty(self):
        assert ece([]) == 0.0


def test_reliability_csv(tmp_path):
    records = calibrate_records(synthetic_records(1.0, n=100, seed=4), 1.0)
    path = tmp_path / "rel.csv"
    write_reliability_csv(path, reliability(records, 10))
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "bin,count,confidence,accuracy"
    assert len(lines) == 11
    total = sum(int(line.split(",")[1]) for line in lines[1:])
    assert total == 100
