"""File formats, manifests, and the synthetic box world."""

import numpy as np
import pytest

from conftest import make_intrinsics, random_pose
from geovos.cli import boxworld_preset
from geovos.geometry import CameraPose, back_project
from geovos.ingest import (BadMagicError, BadMaskError, BadPoseError, Box,
                           FormatVersionError, LengthMismatchError, ManifestError,
                           MissingFileError, generate_boxworld, load_dmap, load_instances,
                           load_mask_pgm, load_pose, load_scene, load_tracks, save_dmap,
                           save_instances, save_mask_pgm, save_pose, save_scene,
                           save_tracks)
from geovos.metrics import MaskTrack


class TestDmap:
    def test_roundtrip_bytes(self, tmp_path):
        rng = np.random.default_rng(0)
        values = rng.uniform(0, 5, size=(7, 11)).astype(np.float32)
        values[0, 0] = 0.0
        values[1, 1] = np.inf
        p1, p2 = tmp_path / "a.dmap", tmp_path / "b.dmap"
        save_dmap(p1, values)
        loaded = load_dmap(p1)
        save_dmap(p2, loaded)
        assert p1.read_bytes() == p2.read_bytes()
        np.testing.assert_array_equal(loaded, values)

    def test_truncated_length_error(self, tmp_path):
        p = tmp_path / "t.dmap"
        save_dmap(p, np.ones((4, 4), np.float32))
        p.write_bytes(p.read_bytes()[:-3])
        with pytest.raises(LengthMismatchError):
            load_dmap(p)

    def test_trailing_garbage_error(self, tmp_path):
        p = tmp_path / "t.dmap"
        save_dmap(p, np.ones((4, 4), np.float32))
        p.write_bytes(p.read_bytes() + b"xx")
        with pytest.raises(LengthMismatchError):
            load_dmap(p)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "t.dmap"
        save_dmap(p, np.ones((2, 2), np.float32))
        blob = p.read_bytes()
        p.write_bytes(b"XMAP" + blob[4:])
        with pytest.raises(BadMagicError):
            load_dmap(p)

    def test_bad_version(self, tmp_path):
        p = tmp_path / "t.dmap"
        save_dmap(p, np.ones((2, 2), np.float32))
        blob = bytearray(p.read_bytes())
        blob[4] = 9
        p.write_bytes(bytes(blob))
        with pytest.raises(FormatVersionError):
            load_dmap(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingFileError):
            load_dmap(tmp_path / "nope.dmap")


class TestMaskPgm:
    def test_roundtrip_bytes(self, tmp_path):
        rng = np.random.default_rng(1)
        mask = rng.random((9, 6)) < 0.4
        p1, p2 = tmp_path / "a.pgm", tmp_path / "b.pgm"
        save_mask_pgm(p1, mask)
        loaded = load_mask_pgm(p1)
        save_mask_pgm(p2, loaded)
        assert p1.read_bytes() == p2.read_bytes()
        np.testing.assert_array_equal(loaded, mask)

    def test_wrong_maxval(self, tmp_path):
        p = tmp_path / "m.pgm"
        p.write_bytes(b"P5\n2 2\n15\n" + bytes(4))
        with pytest.raises(BadMaskError):
            load_mask_pgm(p)

    def test_not_p5(self, tmp_path):
        p = tmp_path / "m.pgm"
        p.write_bytes(b"P2\n2 2\n255\n0 0 0 0")
        with pytest.raises(BadMaskError):
            load_mask_pgm(p)

    def test_short_raster(self, tmp_path):
        p = tmp_path / "m.pgm"
        p.write_bytes(b"P5\n3 3\n255\n" + bytes(5))
        with pytest.raises(LengthMismatchError):
            load_mask_pgm(p)


class TestPoseFile:
    def test_roundtrip_bytes(self, tmp_path):
        rng = np.random.default_rng(2)
        pose = random_pose(rng)
        p1, p2 = tmp_path / "a.txt", tmp_path / "b.txt"
        save_pose(p1, pose)
        loaded = load_pose(p1)
        save_pose(p2, loaded)
        assert p1.read_bytes() == p2.read_bytes()
        np.testing.assert_array_equal(loaded.rotation, pose.rotation)
        np.testing.assert_array_equal(loaded.translation, pose.translation)

    def test_wrong_token_count(self, tmp_path):
        p = tmp_path / "p.txt"
        p.write_text("1 0 0\n")
        with pytest.raises(BadPoseError):
            load_pose(p)

    def test_last_row_must_be_exact(self, tmp_path):
        p = tmp_path / "p.txt"
        p.write_text("1 0 0 0\n0 1 0 0\n0 0 1 0\n0 0 0.1 1\n")
        with pytest.raises(BadPoseError):
            load_pose(p)

    def test_non_orthonormal_rejected(self, tmp_path):
        p = tmp_path / "p.txt"
        p.write_text("1 0.01 0 0\n0 1 0 0\n0 0 1 0\n0 0 0 1\n")
        with pytest.raises(BadPoseError):
            load_pose(p)

    def test_near_miss_snapped_to_rotation(self, tmp_path):
        rng = np.random.default_rng(3)
        rot = random_pose(rng).rotation.copy()
        rot[0, 0] += 3e-5  # inside the 1e-4 file tolerance, outside 1e-6
        p = tmp_path / "p.txt"
        rows = [" ".join(repr(float(x)) for x in rot[i]) + " 0.0" for i in range(3)]
        p.write_text("\n".join(rows) + "\n0 0 0 1\n")
        pose = load_pose(p)  # CameraPose would reject an unsnapped block
        assert np.max(np.abs(pose.rotation.T @ pose.rotation - np.eye(3))) < 1e-9

    def test_non_numeric(self, tmp_path):
        p = tmp_path / "p.txt"
        p.write_text(" ".join(["x"] * 16))
        with pytest.raises(BadPoseError):
            load_pose(p)


class TestSceneRoundtrip:
    def test_save_load_save_identical_tree(self, tmp_path):
        boxes, cams = boxworld_preset("two-cubes", 24)
        world = generate_boxworld(boxes, cams)
        d1, d2 = tmp_path / "one", tmp_path / "two"
        m1 = save_scene(world.scene, d1)
        scene = load_scene(m1)
        m2 = save_scene(scene, d2)
        files1 = sorted(p.relative_to(d1) for p in d1.rglob("*") if p.is_file())
        files2 = sorted(p.relative_to(d2) for p in d2.rglob("*") if p.is_file())
        assert files1 == files2
        for rel in files1:
            assert (d1 / rel).read_bytes() == (d2 / rel).read_bytes(), rel

    def test_loaded_scene_matches(self, tmp_path):
        boxes, cams = boxworld_preset("one-box", 16)
        world = generate_boxworld(boxes, cams)
        manifest = save_scene(world.scene, tmp_path)
        scene = load_scene(manifest)
        assert len(scene.frames) == len(world.scene.frames)
        for a, b in zip(scene.frames, world.scene.frames):
            np.testing.assert_array_equal(a.depth, b.depth)
            np.testing.assert_allclose(a.pose.rotation, b.pose.rotation, atol=1e-14)
            assert sorted(a.masks) == sorted(b.masks)
            for k in a.masks:
                np.testing.assert_array_equal(a.masks[k], b.masks[k])
        np.testing.assert_allclose(scene.scene_points, world.scene.scene_points)
        np.testing.assert_array_equal(scene.superpoints, world.scene.superpoints)
        for a, b in zip(scene.gt_instances.instances, world.gt_instances.instances):
            np.testing.assert_array_equal(a.point_ids, b.point_ids)

    def test_missing_depth_file_named(self, tmp_path):
        boxes, cams = boxworld_preset("one-box", 16)
        world = generate_boxworld(boxes, cams)
        manifest = save_scene(world.scene, tmp_path)
        (tmp_path / "depth" / "0002.dmap").unlink()
        with pytest.raises(MissingFileError, match="0002"):
            load_scene(manifest)

    def test_bad_schema(self, tmp_path):
        p = tmp_path / "manifest.json"
        p.write_text('{"schema": "other/9", "frames": []}')
        with pytest.raises(ManifestError, match="schema"):
            load_scene(p)

    def test_missing_field_named(self, tmp_path):
        p = tmp_path / "manifest.json"
        p.write_text('{"schema": "geovos.scene/1"}')
        with pytest.raises(ManifestError, match="frames"):
            load_scene(p)

    def test_three_frame_fixture_loads(self, tmp_path):
        boxes, cams = boxworld_preset("two-cubes", 16)
        world = generate_boxworld(boxes, cams[:3])
        manifest = save_scene(world.scene, tmp_path)
        scene = load_scene(manifest)
        assert len(scene.frames) == 3
        assert scene.object_ids == ["box0", "box1"]


class TestTracksFile:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(4)
        tracks = {
            "a": MaskTrack([rng.random((5, 5)) < 0.5, None, rng.random((5, 5)) < 0.5]),
            "b": MaskTrack([None, None, np.ones((5, 5), bool)]),
        }
        path = save_tracks(tracks, tmp_path / "tr")
        loaded = load_tracks(path)
        assert sorted(loaded) == ["a", "b"]
        for key in tracks:
            for got, want in zip(loaded[key].masks, tracks[key].masks):
                if want is None or not want.any():
                    assert got is None
                else:
                    np.testing.assert_array_equal(got, want)

    def test_instances_roundtrip(self, tmp_path):
        from geovos.instance3d import Instance, InstanceSet
        inst = InstanceSet([Instance(confidence=0.25,
                                     point_ids=np.array([3, 1, 2], np.int64))])
        p = tmp_path / "inst.json"
        save_instances(p, inst)
        loaded = load_instances(p)
        assert loaded.instances[0].confidence == 0.25
        np.testing.assert_array_equal(loaded.instances[0].point_ids, [3, 1, 2])

    def test_instances_missing_field(self, tmp_path):
        p = tmp_path / "inst.json"
        p.write_text('{"schema": "geovos.instances/1", "instances": [{"confidence": 1}]}')
        with pytest.raises(ManifestError, match="point_ids"):
            load_instances(p)

    def test_pointset_roundtrip(self, tmp_path):
        from geovos.ingest import load_pointset, save_pointset
        rng = np.random.default_rng(5)
        pts = rng.normal(size=(17, 3))
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        save_pointset(p1, pts)
        loaded = load_pointset(p1)
        save_pointset(p2, loaded)
        assert p1.read_bytes() == p2.read_bytes()
        np.testing.assert_array_equal(loaded, pts)

    def test_feature_stack_roundtrip(self, tmp_path):
        from geovos.ingest import load_feature_stack, save_feature_stack
        rng = np.random.default_rng(6)
        feat = rng.normal(size=(5, 7, 3)).astype(np.float32)
        paths = [tmp_path / f"c{i}.dmap" for i in range(3)]
        save_feature_stack(paths, feat)
        loaded = load_feature_stack(paths)
        assert loaded.shape == (5, 7, 3)
        np.testing.assert_array_equal(loaded.astype(np.float32), feat)

    def test_feature_stack_shape_mismatch(self, tmp_path):
        from geovos.ingest import load_feature_stack
        save_dmap(tmp_path / "a.dmap", np.ones((2, 2), np.float32))
        save_dmap(tmp_path / "b.dmap", np.ones((3, 2), np.float32))
        with pytest.raises(LengthMismatchError):
            load_feature_stack([tmp_path / "a.dmap", tmp_path / "b.dmap"])


class TestBoxWorld:
    def test_single_box_projected_rectangle(self):
        intr = make_intrinsics(fx=16.0, fy=16.0, width=16, height=16, cx=7.5, cy=7.5)
        pose = CameraPose.identity()
        box = Box((0.0, 0.0, 1.5), (0.8, 0.8, 1.0))  # front face at z = 1
        world = generate_boxworld([box], [(pose, intr)])
        frame = world.scene.frames[0]
        mask = frame.masks["box0"]
        us = np.arange(16)
        inside = np.abs((us - 7.5) / 16.0) < 0.4
        expected = np.outer(inside, inside)
        np.testing.assert_array_equal(mask, expected)
        np.testing.assert_allclose(frame.depth[mask], 1.0, atol=1e-7)
        assert np.all(frame.depth[~mask] == 0.0)

    def test_camera_facing_away(self):
        intr = make_intrinsics(width=8, height=8)
        flip = CameraPose(np.diag([1.0, -1.0, -1.0]), np.zeros(3))
        box = Box((0.0, 0.0, 2.0), (1.0, 1.0, 1.0))
        world = generate_boxworld([box], [(flip, intr)])
        frame = world.scene.frames[0]
        assert frame.masks == {}
        assert np.all(frame.depth == 0.0)

    def test_occlusion_near_box_owns_contested_pixels(self):
        intr = make_intrinsics(fx=16.0, fy=16.0, width=16, height=16, cx=7.5, cy=7.5)
        pose = CameraPose.identity()
        near = Box((0.0, 0.0, 1.25), (0.4, 0.4, 0.5))
        far = Box((0.0, 0.0, 2.5), (1.0, 1.0, 1.0))
        world = generate_boxworld([far, near], [(pose, intr)])  # far listed first
        frame = world.scene.frames[0]
        owner = world.owners[0]
        center = owner[7, 7]
        assert center == 1  # the near box despite its later index
        assert frame.depth[7, 7] == np.float32(1.0)
        # pixel (4, 4) looks past the near box but into the far one
        assert owner[4, 4] == 0 and frame.depth[4, 4] == np.float32(2.0)

    def test_depth_self_consistency_on_surface(self):
        boxes, cams = boxworld_preset("two-cubes", 32)
        world = generate_boxworld(boxes, cams)
        bounds = [b.bounds() for b in boxes]
        for frame, owner in zip(world.scene.frames, world.owners):
            for b, bb in enumerate(bounds):
                mask = owner == b
                if not mask.any():
                    continue
                pc, _ = back_project(mask, frame.depth, frame.intrinsics)
                pts = frame.pose.to_world(pc.points)
                center = (bb[:3] + bb[3:]) / 2
                half = (bb[3:] - bb[:3]) / 2
                q = np.abs(pts - center) - half
                sdf = (np.linalg.norm(np.maximum(q, 0), axis=1)
                       + np.minimum(q.max(axis=1), 0))
                assert np.max(np.abs(sdf)) < 1e-5

    def test_intersecting_boxes_rejected(self):
        intr = make_intrinsics(width=8, height=8)
        a = Box((0.0, 0.0, 2.0), (1.0, 1.0, 1.0))
        b = Box((0.4, 0.0, 2.0), (1.0, 1.0, 1.0))
        with pytest.raises(ValueError, match="intersect"):
            generate_boxworld([a, b], [(CameraPose.identity(), intr)])

    def test_touching_boxes_allowed(self):
        intr = make_intrinsics(width=8, height=8)
        a = Box((0.0, 0.0, 2.0), (1.0, 1.0, 1.0))
        b = Box((1.0, 0.0, 2.0), (1.0, 1.0, 1.0))
        world = generate_boxworld([a, b], [(CameraPose.identity(), intr)])
        assert len(world.gt_instances.instances) == 2

    def test_camera_inside_box_rejected(self):
        intr = make_intrinsics(width=8, height=8)
        box = Box((0.0, 0.0, 0.0), (2.0, 2.0, 2.0))
        with pytest.raises(ValueError, match="inside"):
            generate_boxworld([box], [(CameraPose.identity(), intr)])

    def test_deterministic(self):
        boxes, cams = boxworld_preset("two-cubes", 16)
        w1 = generate_boxworld(boxes, cams)
        w2 = generate_boxworld(boxes, cams)
        for f1, f2 in zip(w1.scene.frames, w2.scene.frames):
            np.testing.assert_array_equal(f1.depth, f2.depth)
        np.testing.assert_array_equal(w1.scene.scene_points, w2.scene.scene_points)
        np.testing.assert_array_equal(w1.scene.superpoints, w2.scene.superpoints)
