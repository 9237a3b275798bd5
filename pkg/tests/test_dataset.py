import json

import numpy as np
import pytest

from msseg3d.dataset import BatchSchedule, build_cohort, load_dataset, load_manifest, write_dataset


class TestCohort:
    def test_counts_and_label_flags(self, tiny_config):
        cohort = build_cohort(tiny_config.data)
        assert len(cohort.labeled) == 4          # site-a train
        assert len(cohort.unlabeled) == 8        # site-b + site-c train
        assert len(cohort.test) == 6             # 2 per source
        assert all(v.labels is not None for v in cohort.labeled)
        assert all(v.labels is None for v in cohort.unlabeled)
        assert all(v.labels is not None for v in cohort.test)

    def test_sample_ids_unique(self, tiny_config):
        cohort = build_cohort(tiny_config.data)
        ids = [v.sample_id for v in cohort.labeled + cohort.unlabeled + cohort.test]
        assert len(ids) == len(set(ids))

    def test_source_ids_recorded(self, tiny_config):
        cohort = build_cohort(tiny_config.data)
        assert {v.source_id for v in cohort.labeled} == {"site-a"}
        assert {v.source_id for v in cohort.unlabeled} == {"site-b", "site-c"}
        assert {v.source_id for v in cohort.test} == {"site-a", "site-b", "site-c"}

    def test_unlabeled_data_matches_labeled_render(self, tiny_config):
        # stripping labels must not touch the intensities
        cohort = build_cohort(tiny_config.data)
        again = build_cohort(tiny_config.data)
        for v, w in zip(cohort.unlabeled, again.unlabeled):
            assert np.array_equal(v.data, w.data)

    def test_regeneration_is_deterministic(self, tiny_config):
        a = build_cohort(tiny_config.data)
        b = build_cohort(tiny_config.data)
        for va, vb in zip(a.labeled + a.test, b.labeled + b.test):
            assert va.sample_id == vb.sample_id
            assert np.array_equal(va.data, vb.data)
            assert np.array_equal(va.labels, vb.labels)

    def test_by_id(self, tiny_config):
        cohort = build_cohort(tiny_config.data)
        index = cohort.by_id()
        v = cohort.labeled[0]
        assert index[v.sample_id] is v
        assert len(index) == 18
        assert "no-such-sample" not in index


class TestDatasetIO:
    def test_round_trip(self, tiny_config, tmp_path):
        cohort = build_cohort(tiny_config.data)
        write_dataset(tiny_config.data, tmp_path / "ds")
        loaded = load_dataset(tmp_path / "ds")
        originals = cohort.by_id()
        for back in loaded.labeled + loaded.unlabeled + loaded.test:
            orig = originals[back.sample_id]
            assert orig.source_id == back.source_id
            assert np.array_equal(orig.data, back.data)
            if orig.labels is None:
                assert back.labels is None
            else:
                assert np.array_equal(orig.labels, back.labels)
        assert len(loaded.labeled) == len(cohort.labeled)
        assert len(loaded.unlabeled) == len(cohort.unlabeled)
        assert len(loaded.test) == len(cohort.test)

    def test_manifest_contents(self, tiny_config, tmp_path):
        cohort = build_cohort(tiny_config.data)
        write_dataset(tiny_config.data, tmp_path / "ds")
        manifest = load_manifest(tmp_path / "ds")
        assert manifest["class_count"] == tiny_config.data.class_count
        assert list(manifest["volume_dims"]) == list(tiny_config.data.volume_dims)
        assert len(manifest["train"]) == 12
        assert len(manifest["test"]) == 6
        labeled_flags = {e["sample_id"]: e["labeled"] for e in manifest["train"]}
        for v in cohort.labeled:
            assert labeled_flags[v.sample_id] is True
        for v in cohort.unlabeled:
            assert labeled_flags[v.sample_id] is False

    def test_manifest_is_valid_json_on_disk(self, tiny_config, tmp_path):
        write_dataset(tiny_config.data, tmp_path / "ds")
        with open(tmp_path / "ds" / "manifest.json") as fh:
            json.load(fh)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_manifest(tmp_path / "absent")


class TestBatchSchedule:
    def test_stateless_reproducibility(self):
        a = BatchSchedule(seed=3, n_labeled=10, n_mixed=7, n_other=5, batch_size=4)
        b = BatchSchedule(seed=3, n_labeled=10, n_mixed=7, n_other=5, batch_size=4)
        # query out of order; results depend only on the step index
        for step in (5, 0, 2, 5, 1):
            ba, bb = a.batches(step), b.batches(step)
            for key in ("labeled", "mixed", "other"):
                assert np.array_equal(ba[key], bb[key])

    def test_steps_per_epoch(self):
        s = BatchSchedule(seed=0, n_labeled=10, n_mixed=0, n_other=0, batch_size=4)
        assert s.steps_per_epoch == 3  # 4 + 4 + 2

    def test_labeled_epoch_covers_every_sample_once(self):
        s = BatchSchedule(seed=1, n_labeled=10, n_mixed=4, n_other=4, batch_size=4)
        seen = []
        for step in range(s.steps_per_epoch):
            seen.extend(s.batches(step)["labeled"].tolist())
        assert sorted(seen) == list(range(10))

    def test_epochs_are_distinct_permutations(self):
        s = BatchSchedule(seed=1, n_labeled=32, n_mixed=0, n_other=0, batch_size=32)
        first = s.batches(0)["labeled"]
        second = s.batches(s.steps_per_epoch)["labeled"]
        assert sorted(first.tolist()) == sorted(second.tolist())
        assert not np.array_equal(first, second)

    def test_unlabeled_batches_always_full(self):
        s = BatchSchedule(seed=2, n_labeled=10, n_mixed=3, n_other=6, batch_size=4)
        for step in range(3 * s.steps_per_epoch):
            batch = s.batches(step)
            assert len(batch["mixed"]) == 4
            assert len(batch["other"]) == 4
            assert np.all(batch["mixed"] < 3)
            assert np.all(batch["other"]) < 6

    def test_empty_pools_yield_empty_batches(self):
        s = BatchSchedule(seed=2, n_labeled=4, n_mixed=0, n_other=0, batch_size=2)
        batch = s.batches(0)
        assert batch["mixed"].size == 0
        assert batch["other"].size == 0

    def test_last_labeled_batch_may_be_short(self):
        s = BatchSchedule(seed=4, n_labeled=5, n_mixed=0, n_other=0, batch_size=4)
        assert len(s.batches(0)["labeled"]) == 4
        assert len(s.batches(1)["labeled"]) == 1

    def test_different_seeds_differ(self):
        a = BatchSchedule(seed=0, n_labeled=64, n_mixed=0, n_other=0, batch_size=64)
        b = BatchSchedule(seed=1, n_labeled=64, n_mixed=0, n_other=0, batch_size=64)
        assert not np.array_equal(a.batches(0)["labeled"], b.batches(0)["labeled"])
