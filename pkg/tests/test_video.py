"""Tests for keyframe re-aging and face-swap propagation."""

import json
import logging

import pytest
import torch

from mytm.adapter import build_adapter
from mytm.backends.toy import make_synthetic_frames
from mytm.errors import DomainError, VideoJobError
from mytm.images import load_image
from mytm.video import VideoJob, identity_jitter, list_frames, paste_back, reage_keyframe, reage_video


@pytest.fixture
def frames_dir(tmp_path):
    make_synthetic_frames(tmp_path / "frames", 5, age_years=60.0, seed=3, blank=[2])
    return tmp_path / "frames"


def _cos(bundle, a, b):
    return float((bundle.embed_identity(a) * bundle.embed_identity(b)).sum())


class TestVideoJob:
    """Job validation."""

    def test_frames_sorted(self, frames_dir, tmp_path):
        job = VideoJob(frames_dir, keyframe=0, target_age=30, out_dir=tmp_path / "out")
        assert [p.name for p in job.frames] == [f"frame_{i:06d}.png" for i in range(5)]

    def test_keyframe_out_of_range(self, frames_dir, tmp_path):
        with pytest.raises(VideoJobError, match="keyframe 5"):
            VideoJob(frames_dir, keyframe=5, target_age=30, out_dir=tmp_path / "out")

    def test_bad_age(self, frames_dir, tmp_path):
        with pytest.raises(DomainError):
            VideoJob(frames_dir, keyframe=0, target_age=120, out_dir=tmp_path / "out")

    def test_missing_directory(self, tmp_path):
        with pytest.raises(VideoJobError, match="not found"):
            list_frames(tmp_path / "nope")

    def test_no_frames(self, tmp_path):
        (tmp_path / "empty").mkdir()
        (tmp_path / "empty" / "clip.png").write_bytes(b"")
        with pytest.raises(VideoJobError, match="no frame_"):
            list_frames(tmp_path / "empty")


class TestReageVideo:
    """End-to-end propagation on synthetic frames."""

    def test_blank_frame_passes_through(self, toy_bundle, frames_dir, tmp_path, caplog):
        """Frames without a face are copied unchanged, warned about once and counted."""
        job = VideoJob(frames_dir, keyframe=0, target_age=30, out_dir=tmp_path / "out")
        with caplog.at_level(logging.WARNING, logger="mytm.video"):
            result = reage_video(toy_bundle, None, job, use_adapter=False)
        assert sum("No face" in r.getMessage() for r in caplog.records) == 1
        assert [f.status for f in result.frames] == ["swapped", "swapped", "passthrough", "swapped", "swapped"]
        assert result.skipped == 1
        original = load_image(frames_dir / "frame_000002.png", dtype=torch.float64)
        assert torch.equal(load_image(tmp_path / "out" / "frame_000002.png", dtype=torch.float64), original)
        summary = json.loads((tmp_path / "out" / "summary.json").read_text(encoding="utf-8"))
        assert summary["frame_count"] == 5
        assert summary["swapped"] == 4
        assert summary["passthrough"] == 1
        assert summary["target_age"] == 30.0

    def test_single_source_identity(self, toy_bundle, frames_dir, tmp_path):
        """Every swapped frame moves toward the one re-aged keyframe face."""
        job = VideoJob(frames_dir, keyframe=1, target_age=30, out_dir=tmp_path / "out")
        result = reage_video(toy_bundle, None, job, use_adapter=False)
        face = result.keyframe_face
        for frame in result.frames:
            if frame.status == "swapped" and frame.index != job.keyframe:
                assert _cos(toy_bundle, frame.swapped_face, face) > _cos(toy_bundle, frame.input_face, face)

    def test_jitter_drops(self, toy_bundle, frames_dir, tmp_path):
        """Swapping in one face reduces frame-to-frame identity variation."""
        job = VideoJob(frames_dir, keyframe=0, target_age=80, out_dir=tmp_path / "out")
        proxy = reage_video(toy_bundle, None, job, use_adapter=False).summary["identity_jitter_proxy"]
        assert proxy["output"] < proxy["input"]

    def test_single_frame(self, toy_bundle, tmp_path):
        """One full-frame face comes back as the swap of itself with its re-aged face."""
        make_synthetic_frames(tmp_path / "frames", 1, seed=4)
        job = VideoJob(tmp_path / "frames", keyframe=0, target_age=40, out_dir=tmp_path / "out")
        result = reage_video(toy_bundle, None, job, use_adapter=False)
        frame = load_image(job.frames[0], dtype=torch.float64)
        expected = toy_bundle.swap_face(result.keyframe_face, frame)
        assert torch.allclose(result.frames[0].frame, expected, atol=1e-12)

    def test_fresh_adapter_keyframe(self, toy_bundle, frames_dir, tmp_path):
        """An untrained adapter re-ages the keyframe exactly like the global path."""
        job = VideoJob(frames_dir, keyframe=0, target_age=30, out_dir=tmp_path / "out")
        net = build_adapter(dtype=torch.float64)
        aligned = toy_bundle.align_face(load_image(job.frames[0], dtype=torch.float64))
        expected = toy_bundle.decode(toy_bundle.encode(aligned, 30))
        assert torch.equal(reage_keyframe(toy_bundle, net, job), expected)

    def test_larger_frames(self, toy_bundle, tmp_path):
        """Frames above decoder resolution keep their size."""
        make_synthetic_frames(tmp_path / "frames", 2, seed=5, size=64)
        job = VideoJob(tmp_path / "frames", keyframe=0, target_age=50, out_dir=tmp_path / "out")
        reage_video(toy_bundle, None, job, use_adapter=False)
        out = load_image(tmp_path / "out" / "frame_000001.png")
        assert tuple(out.shape) == (3, 64, 64)

    def test_workers_do_not_change_output(self, toy_bundle, frames_dir, tmp_path):
        for workers, name in ((1, "one"), (3, "three")):
            job = VideoJob(frames_dir, keyframe=0, target_age=30, out_dir=tmp_path / name, workers=workers)
            reage_video(toy_bundle, None, job, use_adapter=False)
        for index in range(5):
            frame = f"frame_{index:06d}.png"
            assert (tmp_path / "one" / frame).read_bytes() == (tmp_path / "three" / frame).read_bytes()


class TestHelpers:
    """Paste-back and the jitter proxy."""

    def test_paste_back_region(self):
        frame = torch.zeros(3, 8, 12, dtype=torch.float64)
        face = torch.ones(3, 4, 4, dtype=torch.float64)
        out = paste_back(frame, face, (2, 3, 4), alpha=0.5)
        assert torch.all(out[:, 2:6, 3:7] == 0.5)
        assert float(out.sum()) == 0.5 * 3 * 16

    def test_paste_back_resizes(self):
        frame = torch.zeros(3, 16, 16, dtype=torch.float64)
        face = torch.ones(3, 4, 4, dtype=torch.float64)
        out = paste_back(frame, face, (0, 0, 8))
        assert torch.allclose(out[:, :8, :8], torch.ones(3, 8, 8, dtype=torch.float64))
        assert float(out[:, 8:, :].abs().sum()) == 0.0

    def test_jitter_of_identical_faces(self, toy_bundle, frames_dir):
        face = load_image(frames_dir / "frame_000000.png", dtype=torch.float64)
        assert identity_jitter(toy_bundle, [face, face.clone()]) == 0.0
