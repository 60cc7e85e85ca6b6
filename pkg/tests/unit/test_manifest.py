""" Unit tests for the run manifest and seeding helpers """

import json

import pytest
import torch

from freezegun import freeze_time

from labelfactory.manifest import (
    MANIFEST_FILE,
    STATUS_COMPLETED,
    STATUS_FAILED,
    STATUS_RESUMED,
    RunManifest,
    StageRecord,
    dataset_checksum,
    seed_everything,
    stage_seed,
    track_stage,
)


def test_stage_seed():
    """Test that stage seeds are stable, non-negative 31-bit and stage specific"""
    assert stage_seed(0, "adapt") == stage_seed(0, "adapt")
    assert stage_seed(0, "adapt") != stage_seed(0, "synthesize")
    assert stage_seed(0, "adapt") != stage_seed(1, "adapt")
    assert 0 <= stage_seed(123, "evaluate") < 2 ** 31


def test_seed_everything():
    seed_everything(5)
    first = torch.rand(3)
    seed_everything(5)

    assert torch.equal(first, torch.rand(3))


def test_dataset_checksum(tmp_path):
    """Test that the checksum covers names and bytes"""
    (tmp_path / "a.txt").write_bytes(b"one")
    (tmp_path / "b.txt").write_bytes(b"two")
    original = dataset_checksum(tmp_path)

    (tmp_path / "b.txt").write_bytes(b"tw0")
    changed_bytes = dataset_checksum(tmp_path)
    (tmp_path / "b.txt").rename(tmp_path / "c.txt")
    changed_name = dataset_checksum(tmp_path)

    assert len({original, changed_bytes, changed_name}) == 3


def test_record_traces():
    record = StageRecord("adapt")

    record.record_traces({"adversarial": [3.0, 2.0], "total": [5.0, 4.0]}, final_key="total")

    assert record.final_loss == 4.0
    assert record.traces["adversarial"] == [3.0, 2.0]


class TestRunManifest:
    """Tests for saving and loading the manifest"""

    def test_round_trip(self, tmp_path):
        manifest = RunManifest(config={"seed": 3})
        manifest.stage("adapt").status = STATUS_RESUMED
        manifest.metrics["target_ap_after"] = 0.5
        path = tmp_path / MANIFEST_FILE

        manifest.save(path)
        loaded = RunManifest.load(path)

        assert loaded.config == {"seed": 3}
        assert loaded.stages["adapt"].status == STATUS_RESUMED
        assert loaded.metrics == {"target_ap_after": 0.5}
        assert not list(tmp_path.glob("*.tmp"))

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="does not exist"):
            RunManifest.load(tmp_path / MANIFEST_FILE)


class TestTrackStage:
    """Tests for the stage bookkeeping context manager"""

    @freeze_time("2026-03-04 05:06:07")
    def test_success(self, tmp_path):
        manifest = RunManifest()
        path = tmp_path / MANIFEST_FILE

        with track_stage(manifest, "adapt", path, seed=17) as record:
            record.metrics["n_fewshot"] = 2

        saved = json.loads(path.read_text())
        assert saved["stages"]["adapt"]["status"] == STATUS_COMPLETED
        assert saved["stages"]["adapt"]["seed"] == 17
        assert saved["stages"]["adapt"]["started_at"] == "2026-03-04T05:06:07+00:00"
        assert saved["stages"]["adapt"]["metrics"] == {"n_fewshot": 2}
        assert saved["updated_at"] == "2026-03-04T05:06:07+00:00"

    def test_failure_is_recorded(self, tmp_path):
        manifest = RunManifest()
        path = tmp_path / MANIFEST_FILE

        with pytest.raises(RuntimeError, match="out of memory"):
            with track_stage(manifest, "synthesize", path):
                raise RuntimeError("out of memory")

        loaded = RunManifest.load(path)
        assert loaded.stages["synthesize"].status == STATUS_FAILED
        assert loaded.stages["synthesize"].error == "out of memory"
        assert loaded.stages["synthesize"].wall_clock_s >= 0.0

    def test_rerun_clears_error(self):
        manifest = RunManifest()
        with pytest.raises(ValueError):
            with track_stage(manifest, "evaluate"):
                raise ValueError("bad")

        with track_stage(manifest, "evaluate"):
            pass

        assert manifest.stages["evaluate"].status == STATUS_COMPLETED
        assert manifest.stages["evaluate"].error is None
