"""Tests for the synthetic tablet generator and the tag-based labeler."""

import json
import logging

import numpy as np
import pytest

from wedgenet.datagen import (
    LEFT_REGION,
    TABLET_HALF_EXTENTS,
    SyntheticSpec,
    TagQuery,
    build_manifest,
    generate,
    scan_tags,
)
from wedgenet.errors import InputError
from wedgenet.pointcloud import read_ply
from wedgenet.training import load_manifest


class TestSpec:
    def test_rejects_unknown_task(self):
        with pytest.raises(InputError, match="task"):
            SyntheticSpec(task="frieze", per_class=4, points=256)

    def test_rejects_tiny_clouds(self):
        with pytest.raises(InputError):
            SyntheticSpec(task="left_imprint", per_class=4, points=32)

    def test_rejects_single_sample(self):
        with pytest.raises(InputError):
            SyntheticSpec(task="left_imprint", per_class=1, points=256)

    def test_rejects_negative_noise(self):
        with pytest.raises(InputError):
            SyntheticSpec(task="left_imprint", per_class=4, points=256, noise_sigma=-1)


class TestGenerate:
    def test_file_and_split_counts(self, tmp_path):
        spec = SyntheticSpec(task="left_imprint", per_class=10, points=128, seed=1)
        generate(spec, tmp_path)
        assert len(list(tmp_path.glob("*.ply"))) == 20
        ds = load_manifest(tmp_path / "manifest.tsv")
        assert len(ds.split_entries("train")) == 18
        assert len(ds.split_entries("test")) == 2
        assert ds.class_names == ["no_left", "with_left"]

    def test_exact_point_count(self, tmp_path):
        spec = SyntheticSpec(task="left_imprint", per_class=2, points=300, seed=0)
        generate(spec, tmp_path)
        cloud = read_ply(tmp_path / "no_left_000.ply")
        assert cloud.n == 300

    def test_same_seed_byte_identical(self, tmp_path):
        spec = SyntheticSpec(task="left_imprint", per_class=3, points=128, seed=9)
        generate(spec, tmp_path / "a")
        generate(spec, tmp_path / "b")
        files_a = sorted(p.name for p in (tmp_path / "a").iterdir())
        files_b = sorted(p.name for p in (tmp_path / "b").iterdir())
        assert files_a == files_b
        for name in files_a:
            assert (tmp_path / "a" / name).read_bytes() == (
                tmp_path / "b" / name
            ).read_bytes()

    def test_different_seed_differs(self, tmp_path):
        base = dict(task="left_imprint", per_class=2, points=128)
        generate(SyntheticSpec(seed=1, **base), tmp_path / "a")
        generate(SyntheticSpec(seed=2, **base), tmp_path / "b")
        assert (tmp_path / "a" / "no_left_000.ply").read_bytes() != (
            tmp_path / "b" / "no_left_000.ply"
        ).read_bytes()

    def test_left_region_statistical_separation(self, tmp_path):
        spec = SyntheticSpec(task="left_imprint", per_class=6, points=1024, seed=4)
        ds = generate(spec, tmp_path)
        lo = np.array(LEFT_REGION["min"])
        hi = np.array(LEFT_REGION["max"])
        occupancy = {0: [], 1: []}
        for entry in ds.entries:
            cloud = read_ply(ds.resolve(entry))
            inside = ((cloud.points >= lo) & (cloud.points <= hi)).all(axis=1)
            assert inside.sum() > 20
            occupancy[entry.class_index].append(int(inside.sum()))
        # carved walls add surface area, so inscribed tablets hold a solidly
        # larger share of the point budget in the left slab
        assert min(occupancy[1]) > max(occupancy[0])
        assert np.mean(occupancy[1]) > 1.1 * np.mean(occupancy[0])

    def test_regions_sidecar(self, tmp_path):
        spec = SyntheticSpec(task="left_imprint", per_class=2, points=128, seed=0)
        generate(spec, tmp_path)
        regions = json.loads((tmp_path / "regions.json").read_text())
        assert regions["task"] == "left_imprint"
        assert regions["tablet_half_extents"] == list(TABLET_HALF_EXTENTS)
        lo, hi = regions["left_region"]["min"], regions["left_region"]["max"]
        assert all(a < b for a, b in zip(lo, hi))

    def test_seal_task(self, tmp_path):
        spec = SyntheticSpec(task="seal_imprint", per_class=3, points=128, seed=2)
        ds = generate(spec, tmp_path)
        assert ds.class_names == ["no_seal", "with_seal"]
        assert len(list(tmp_path.glob("*.ply"))) == 6

    def test_period_task_imbalanced_counts(self, tmp_path):
        spec = SyntheticSpec(task="period_proxy", per_class=10, points=128, seed=2)
        ds = generate(spec, tmp_path)
        assert ds.class_names == ["period_a", "period_b", "period_c", "period_d"]
        per_class = [
            sum(1 for e in ds.entries if e.class_index == c) for c in range(4)
        ]
        assert per_class == [4, 10, 10, 10]
        for c in range(4):
            assert any(
                e.class_index == c and e.split == "test" for e in ds.entries
            )

    def test_points_stay_near_tablet(self, tmp_path):
        spec = SyntheticSpec(task="left_imprint", per_class=2, points=256, seed=5)
        generate(spec, tmp_path)
        cloud = read_ply(tmp_path / "with_left_001.ply")
        bound = np.array(TABLET_HALF_EXTENTS) + 1.0
        assert (np.abs(cloud.points) < bound).all()


class TestScanTags:
    def test_direct_match(self):
        assert scan_tags("@seal 1\n1. lu2 dumu\n", TagQuery("@seal"))

    def test_absent_tag(self):
        assert not scan_tags("@obverse\n@reverse\n", TagQuery("@left"))

    def test_boundary_rule(self):
        assert not scan_tags("@lefty\n", TagQuery("@left"))

    def test_tag_alone_on_line(self):
        assert scan_tags("@left\n", TagQuery("@left"))

    def test_tag_with_punctuation(self):
        assert scan_tags("@left: two signs\n", TagQuery("@left"))

    def test_tag_followed_by_digit_is_longer_token(self):
        assert not scan_tags("@left2\n", TagQuery("@left"))

    def test_leading_whitespace_trimmed(self):
        assert scan_tags("   @seal impression\n", TagQuery("@seal"))

    def test_mid_line_mention_ignored(self):
        assert not scan_tags("the @seal tag\n", TagQuery("@seal"))

    def test_undecodable_bytes_false_with_warning(self, caplog):
        with caplog.at_level(logging.WARNING, logger="wedgenet.datagen"):
            assert not scan_tags(b"\xff\xfe\xfa\x00", TagQuery("@seal"))
        assert any("undecodable" in r.getMessage() for r in caplog.records)

    def test_decodable_bytes_work(self):
        assert scan_tags("@left\n".encode(), TagQuery("@left"))

    def test_bad_query_rejected(self):
        with pytest.raises(InputError):
            TagQuery("seal")
        with pytest.raises(InputError):
            TagQuery("@")


class TestBuildManifest:
    def _write(self, tmp_path, clouds, texts):
        ply_dir = tmp_path / "ply"
        txt_dir = tmp_path / "txt"
        ply_dir.mkdir()
        txt_dir.mkdir()
        for stem in clouds:
            (ply_dir / f"{stem}.ply").write_bytes(b"placeholder")
        for stem, content in texts.items():
            (txt_dir / f"{stem}.txt").write_text(content)
        return ply_dir, txt_dir

    def test_discards_unmatched_clouds(self, tmp_path, caplog):
        ply_dir, txt_dir = self._write(
            tmp_path,
            ["a", "b", "c"],
            {"a": "@seal 1\n", "b": "@obverse\n"},
        )
        with caplog.at_level(logging.WARNING, logger="wedgenet.datagen"):
            ds = build_manifest(ply_dir, txt_dir, TagQuery("@seal"), seed=0)
        assert len(ds.entries) == 2
        assert any("c.ply" in r.getMessage() for r in caplog.records)
        by_path = {e.path: e.class_index for e in ds.entries}
        assert by_path["a.ply"] == 1
        assert by_path["b.ply"] == 0
        assert ds.class_names == ["no_seal", "with_seal"]

    def test_stratified_split_counts(self, tmp_path):
        clouds = [f"s{i}" for i in range(30)]
        texts = {
            f"s{i}": ("@left\n" if i < 10 else "@obverse\n") for i in range(30)
        }
        ply_dir, txt_dir = self._write(tmp_path, clouds, texts)
        ds = build_manifest(ply_dir, txt_dir, TagQuery("@left"), 0.1, seed=3)
        test = ds.split_entries("test")
        assert len(test) == 3
        assert {e.class_index for e in test} == {0, 1}

    def test_same_seed_same_split(self, tmp_path):
        clouds = [f"s{i}" for i in range(12)]
        texts = {f"s{i}": ("@left\n" if i % 3 == 0 else "x\n") for i in range(12)}
        ply_dir, txt_dir = self._write(tmp_path, clouds, texts)
        a = build_manifest(ply_dir, txt_dir, TagQuery("@left"), 0.25, seed=5)
        b = build_manifest(ply_dir, txt_dir, TagQuery("@left"), 0.25, seed=5)
        assert [(e.path, e.split) for e in a.entries] == [
            (e.path, e.split) for e in b.entries
        ]

    def test_zero_pairs_rejected(self, tmp_path):
        ply_dir, txt_dir = self._write(tmp_path, ["a"], {"zzz": "@left\n"})
        with pytest.raises(InputError, match="pairs"):
            build_manifest(ply_dir, txt_dir, TagQuery("@left"))

    def test_missing_directory_rejected(self, tmp_path):
        with pytest.raises(InputError):
            build_manifest(tmp_path / "nope", tmp_path, TagQuery("@x"))
