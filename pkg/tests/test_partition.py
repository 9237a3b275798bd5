import json

import numpy as np
import pytest

from msseg3d.partition import (
    PartitionResult,
    intensity_histogram,
    partition_sources,
    wasserstein_1d,
)
from msseg3d.volumes import PhantomSpec, SourceTransform, Volume, generate_source

from oracles import histogram_oracle, wasserstein_mc_oracle


def _vol(data, sid, source="src"):
    return Volume(data=np.asarray(data, dtype=np.float32), source_id=source, sample_id=sid)


def _random_hist(rng, bins):
    h = rng.random(bins)
    return h / h.sum()


class TestHistogram:
    def test_constant_volume_single_bin(self):
        h = intensity_histogram(np.full((4, 4, 4), 3.25), bins=16)
        assert h.sum() == pytest.approx(1.0, abs=1e-12)
        assert (h > 0).sum() == 1

    def test_half_min_half_max_two_bins(self):
        data = np.concatenate([np.zeros(32), np.ones(32)]).reshape(4, 4, 4)
        h = intensity_histogram(data, bins=2, value_range=(0.0, 1.0))
        assert np.allclose(h, [0.5, 0.5])

    def test_matches_counting_oracle_exactly(self):
        spec = PhantomSpec(
            source_id="s", num_teeth=2, class_count=2, volume_dims=(12, 12, 12),
            transform=SourceTransform(noise_stddev=0.05), rng_seed=3,
        )
        v = generate_source(spec, 1, labeled=False)[0]
        lo, hi = float(v.data.min()), float(v.data.max())
        ours = intensity_histogram(v.data, bins=32, value_range=(lo, hi))
        oracle = histogram_oracle(v.data, 32, lo, hi)
        assert np.array_equal(ours, oracle)

    def test_out_of_range_clips_to_edge_bins(self):
        data = np.array([[-5.0, 0.5], [0.5, 7.0]]).reshape(1, 2, 2)
        h = intensity_histogram(data, bins=4, value_range=(0.0, 1.0))
        assert h[0] >= 0.25 and h[-1] >= 0.25
        assert h.sum() == pytest.approx(1.0, abs=1e-12)

    def test_empty_volume_rejected(self):
        with pytest.raises(ValueError):
            intensity_histogram(np.zeros((0,)), bins=4)


class TestWasserstein:
    def test_identity(self, rng):
        p = _random_hist(rng, 64)
        assert wasserstein_1d(p, p, 0.1) == 0.0

    def test_point_mass_translation(self):
        bins, width = 8, 1.0
        p = np.zeros(bins); p[0] = 1.0
        q = np.zeros(bins); q[1] = 1.0
        # masses one bin apart with unit bin width -> centers are 1 apart
        assert wasserstein_1d(p, q, width) == pytest.approx(1.0, abs=1e-12)
        q2 = np.zeros(bins); q2[5] = 1.0
        assert wasserstein_1d(p, q2, width) == pytest.approx(5.0, abs=1e-12)

    def test_metric_axioms(self, rng):
        width = 0.25
        for _ in range(100):
            p, q, r = (_random_hist(rng, 48) for _ in range(3))
            dpq = wasserstein_1d(p, q, width)
            dqp = wasserstein_1d(q, p, width)
            assert dpq >= 0.0
            assert abs(dpq - dqp) <= 1e-9
            assert wasserstein_1d(p, p, width) <= 1e-9
            assert dpq <= wasserstein_1d(p, r, width) + wasserstein_1d(r, q, width) + 1e-9

    def test_monte_carlo_oracle_agreement(self, rng):
        bins, width = 32, 0.125
        centers = (np.arange(bins) + 0.5) * width
        for trial in range(8):
            p, q = _random_hist(rng, bins), _random_hist(rng, bins)
            exact = wasserstein_1d(p, q, width)
            mc = wasserstein_mc_oracle(p, q, centers, n_draws=100_000, seed=trial)
            assert abs(exact - mc) < 2e-2

    def test_validation(self):
        ok = np.full(4, 0.25)
        with pytest.raises(ValueError):
            wasserstein_1d(ok, np.full(5, 0.2), 1.0)
        with pytest.raises(ValueError):
            wasserstein_1d(ok, np.array([0.5, 0.5, 0.5, -0.5]), 1.0)
        with pytest.raises(ValueError):
            wasserstein_1d(ok, np.full(4, 0.3), 1.0)
        with pytest.raises(ValueError):
            wasserstein_1d(ok, ok, 0.0)


def _cohort(rng, n_lab=3, n_b=4, n_c=4, offset_c=0.5):
    labeled = [_vol(rng.normal(0.5, 0.05, (6, 6, 6)), f"a-{i:02d}", "a") for i in range(n_lab)]
    near = [_vol(rng.normal(0.5, 0.05, (6, 6, 6)), f"b-{i:02d}", "b") for i in range(n_b)]
    far = [
        _vol(rng.normal(0.5 + offset_c, 0.05, (6, 6, 6)), f"c-{i:02d}", "c") for i in range(n_c)
    ]
    return labeled, near, far


class TestPartition:
    def test_transform_identical_source_lands_in_mixed(self, rng):
        labeled, near, far = _cohort(rng)
        result = partition_sources(labeled, near + far, mixed_fraction=0.5)
        assert set(result.mixed_ids) == {v.sample_id for v in near}
        assert set(result.other_ids) == {v.sample_id for v in far}

    def test_invariants(self, rng):
        labeled, near, far = _cohort(rng)
        unlabeled = near + far
        result = partition_sources(labeled, unlabeled, mixed_fraction=0.4)
        mixed, other = set(result.mixed_ids), set(result.other_ids)
        assert mixed.isdisjoint(other)
        assert mixed | other == {v.sample_id for v in unlabeled}
        assert set(result.main_ids) == {v.sample_id for v in labeled}
        assert len(result.mixed_ids) == int(np.ceil(0.4 * len(unlabeled)))
        worst_mixed = max(result.sample_distances[i] for i in mixed)
        best_other = min(result.sample_distances[i] for i in other)
        assert worst_mixed <= best_other

    def test_single_closest_sample(self, rng):
        labeled, near, far = _cohort(rng, n_b=3, n_c=3)
        unlabeled = near + far
        result = partition_sources(labeled, unlabeled, mixed_fraction=1.0 / len(unlabeled))
        assert len(result.mixed_ids) == 1
        argmin = min(unlabeled, key=lambda v: (result.sample_distances[v.sample_id], v.sample_id))
        assert result.mixed_ids == (argmin.sample_id,)

    def test_all_identical_ties_break_lexicographically(self):
        data = np.full((4, 4, 4), 0.5)
        labeled = [_vol(data, "ref", "a")]
        unlabeled = [_vol(data, sid, "b") for sid in ("u-d", "u-b", "u-c", "u-a")]
        result = partition_sources(labeled, unlabeled, mixed_fraction=0.5)
        assert result.mixed_ids == ("u-a", "u-b")

    def test_mixed_fraction_monotonicity(self, rng):
        labeled, near, far = _cohort(rng)
        unlabeled = near + far
        previous: set = set()
        for frac in (0.1, 0.25, 0.5, 0.75, 0.9, 1.0):
            mixed = set(partition_sources(labeled, unlabeled, frac).mixed_ids)
            assert previous <= mixed
            previous = mixed

    def test_per_source_mode_keeps_sources_whole(self, rng):
        labeled, near, far = _cohort(rng)
        # mixed_fraction below one source's share still pulls the whole nearest source
        result = partition_sources(labeled, near + far, mixed_fraction=0.3, per_source=True)
        assert set(result.mixed_ids) == {v.sample_id for v in near}
        assert result.per_source

    def test_json_round_trip(self, rng):
        labeled, near, far = _cohort(rng)
        result = partition_sources(labeled, near + far, mixed_fraction=0.5)
        blob = json.dumps(result.as_dict(), sort_keys=True)
        restored = PartitionResult.from_dict(json.loads(blob))
        assert restored == result

    def test_validation(self, rng):
        labeled, near, far = _cohort(rng)
        with pytest.raises(ValueError):
            partition_sources([], near, 0.5)
        with pytest.raises(ValueError):
            partition_sources(labeled, [], 0.5)
        with pytest.raises(ValueError):
            partition_sources(labeled, near, 1.5)
        with pytest.raises(ValueError):
            partition_sources(labeled, near + near, 0.5)  # duplicate ids
