"""Core geometry: viewcell frusta, projection, reprojection, scene I/O."""

import math

import numpy as np
import pytest

from froxelpvs.core import (Camera, Frustum, TriScene, Vec3, ViewCell,
                            build_viewcell_frustum, load_motion_table, load_scene,
                            project_points, project_to_ndc, reproject, save_scene,
                            unproject_ndc)

from conftest import default_cell


def _frustum(fov=90.0, near=1.0, far=21.0):
    return Frustum(Vec3(0, 0, 0), Vec3(0, 0, 1), Vec3(0, 1, 0), Vec3(1, 0, 0),
                   fov, near, far)


class TestViewCell:
    def test_backward_displacement_matches_tangent(self):
        # r=0.3, fov=90: tan(45 deg) = 1 so the offset equals the radius
        cell = ViewCell.from_forward(Vec3(0, 0, 0), 0.3, 90.0, 0.0,
                                     Vec3(0, 0, 1), 0.3, 20.0)
        assert cell.displacement == pytest.approx(0.3, abs=1e-12)

    def test_displacement_60_degrees(self):
        # 0.3 / tan(30 deg) = 0.3 * sqrt(3) = 0.5196152422706632
        cell = default_cell()
        assert cell.displacement == pytest.approx(0.5196152422706632, rel=1e-12)

    def test_enlarged_fov(self):
        frustum = build_viewcell_frustum(default_cell())
        assert frustum.fov_deg == 60.0 + 2 * 15.0

    def test_rejects_oversized_enlarged_fov(self):
        with pytest.raises(ValueError):
            ViewCell.from_forward(Vec3(0, 0, 0), 0.3, 160.0, 15.0,
                                  Vec3(0, 0, 1), 0.3, 20.0)

    def test_displaced_origin_behind_center(self):
        cell = default_cell()
        origin = cell.displaced_origin
        assert origin.z == pytest.approx(-cell.displacement)
        assert origin.x == 0.0 and origin.y == 1.5

    def test_far_plane_shared_with_nominal_camera(self):
        cell = default_cell()
        frustum = build_viewcell_frustum(cell)
        # far plane sits `far` in front of the cell center
        assert frustum.far - cell.displacement == pytest.approx(cell.far)


class TestContainment:
    def test_sample_frustum_corners_inside(self):
        """1000 random member cameras stay inside the enlarged frustum."""
        cell = default_cell()
        frustum = build_viewcell_frustum(cell)
        gen = np.random.Generator(np.random.PCG64(7))
        shared_far = cell.far   # forward depth of the far plane from the cell plane
        forward = cell.forward.as_array()
        for _ in range(1000):
            rad = cell.radius * math.sqrt(gen.random())
            ang = 2.0 * math.pi * gen.random()
            pos = (cell.center + cell.right * (rad * math.cos(ang))
                   + cell.up * (rad * math.sin(ang)))
            yaw = cell.beta_deg * (2.0 * gen.random() - 1.0)
            cam = cell.camera_at(pos, yaw)
            he = cam.half_extent
            corners = []
            for du in (-1, 1):
                for dv in (-1, 1):
                    d = (cam.forward.as_array() + du * he * cam.right.as_array()
                         + dv * he * cam.up.as_array())
                    near_pt = pos.as_array() + cam.near * d
                    far_pt = pos.as_array() + cam.far * d
                    # clip the edge to the shared far plane
                    zn = (near_pt - cell.center.as_array()) @ forward
                    zf = (far_pt - cell.center.as_array()) @ forward
                    if zf > shared_far:
                        t = (shared_far - zn) / (zf - zn)
                        far_pt = near_pt + t * (far_pt - near_pt)
                    corners += [near_pt, far_pt]
            assert frustum.contains(np.array(corners), eps=1e-7).all()


class TestProjection:
    def test_axis_points(self):
        fr = _frustum()
        assert project_to_ndc(fr, Vec3(0, 0, fr.near)) == pytest.approx((0.5, 0.5, 0.0))
        assert project_to_ndc(fr, Vec3(0, 0, fr.far)) == pytest.approx((0.5, 0.5, 1.0))
        mid = 0.5 * (fr.near + fr.far)
        assert project_to_ndc(fr, Vec3(0, 0, mid))[2] == pytest.approx(0.5)

    def test_behind_origin_flagged(self):
        fr = _frustum()
        assert project_to_ndc(fr, Vec3(0, 0, -5.0)) is None

    def test_outside_lateral_flagged(self):
        fr = _frustum()
        assert project_to_ndc(fr, Vec3(100.0, 0, 2.0)) is None

    def test_round_trip(self, rng):
        fr = _frustum(fov=75.0, near=0.5, far=30.0)
        uvw = rng.random((500, 3))
        pts = unproject_ndc(fr, uvw)
        back, inside = project_points(fr, pts)
        assert inside.all()
        assert np.abs(back - uvw).max() < 1e-10

    def test_round_trip_world(self, rng):
        fr = _frustum(fov=75.0, near=0.5, far=30.0)
        pts = unproject_ndc(fr, rng.random((200, 3)))
        uvw, _ = project_points(fr, pts)
        again = unproject_ndc(fr, uvw)
        rel = np.abs(again - pts).max() / np.abs(pts).max()
        assert rel < 1e-10

    def test_log_depth_mode(self):
        fr = _frustum(near=1.0, far=100.0)
        # z = 10 is the geometric midpoint of [1, 100]
        uvw, inside = project_points(fr, np.array([[0.0, 0.0, 10.0]]), "log")
        assert inside[0] and uvw[0, 2] == pytest.approx(0.5)

    def test_plane_test_agrees_with_ndc(self, rng):
        fr = _frustum(fov=80.0, near=0.7, far=25.0)
        pts = rng.uniform(-30, 30, size=(5000, 3))
        _, inside = project_points(fr, pts)
        assert np.array_equal(inside, fr.contains(pts))


class TestReproject:
    def test_identity_camera(self):
        cell = default_cell()
        frustum = build_viewcell_frustum(cell)
        eye = Camera(frustum.origin, frustum.forward, frustum.up, frustum.right,
                     frustum.fov_deg, frustum.near, frustum.far)
        res = (64, 64)
        for px, py, w in ((10, 20, 0.3), (33, 60, 0.8), (0, 0, 0.05)):
            depth = frustum.near + w * (frustum.far - frustum.near)
            got = reproject(eye, frustum, (px, py), depth, res)
            assert got is not None
            assert got[0] == pytest.approx((px + 0.5) / res[0], abs=1e-9)
            assert got[1] == pytest.approx((py + 0.5) / res[1], abs=1e-9)
            assert got[2] == pytest.approx(w, abs=1e-9)

    def test_member_camera_fragments_land_inside(self, rng):
        """Far-plane-limited fragments from member cameras stay in the frustum."""
        cell = default_cell()
        frustum = build_viewcell_frustum(cell)
        for k in range(20):
            rad = cell.radius * math.sqrt(rng.random())
            ang = 2 * math.pi * rng.random()
            pos = (cell.center + cell.right * (rad * math.cos(ang))
                   + cell.up * (rad * math.sin(ang)))
            cam = cell.camera_at(pos, cell.beta_deg * (2 * rng.random() - 1))
            px = rng.integers(0, 64, size=50)
            py = rng.integers(0, 64, size=50)
            depth = rng.uniform(cam.near, cam.far * 0.7, size=50)
            from froxelpvs.core import reproject_fragments
            _, inside = reproject_fragments(cam, frustum, px, py, depth, (64, 64))
            assert inside.all()

    def test_behind_target_flagged(self):
        cell = default_cell()
        frustum = build_viewcell_frustum(cell)
        back = Camera.from_forward(cell.center, Vec3(0, 0, -1), 60.0, 0.3, 20.0)
        assert reproject(back, frustum, (32, 32), 10.0, (64, 64)) is None


class TestTriScene:
    def test_degenerate_triangles_dropped(self):
        verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [2, 0, 0]])
        tris = np.array([[0, 1, 2], [0, 1, 3]])   # second is collinear
        scene = TriScene(verts, tris)
        assert len(scene) == 1
        assert scene.dropped_degenerate == 1

    def test_index_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            TriScene(np.zeros((2, 3)), np.array([[0, 1, 2]]))

    def test_subset_by_primitive_id(self):
        verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]])
        tris = np.array([[0, 1, 2], [1, 3, 2]])
        scene = TriScene(verts, tris, primitive_ids=[7, 9])
        sub = scene.subset({9})
        assert len(sub) == 1 and sub.primitive_ids[0] == 9


class TestSceneIO:
    def test_round_trip(self, tmp_path):
        text = """# demo
v 0 0 0
v 1 0 0
v 0 1 0
v 1 1 0
g left
f 1 2 3
g right
f 2 4 3
"""
        path = tmp_path / "scene.obj"
        path.write_text(text)
        scene = load_scene(path)
        assert len(scene) == 2
        assert [o.name for o in scene.objects] == ["left", "right"]

        out = tmp_path / "copy.obj"
        save_scene(out, scene)
        again = load_scene(out)
        assert np.array_equal(again.triangles, scene.triangles)
        assert np.allclose(again.vertices, scene.vertices)
        assert [o.name for o in again.objects] == ["left", "right"]

    def test_quad_faces_triangulated(self, tmp_path):
        path = tmp_path / "quad.obj"
        path.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
        assert len(load_scene(path)) == 2

    def test_motion_sidecar(self, tmp_path):
        spath = tmp_path / "scene.obj"
        spath.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\ng mover\nf 1 2 3\n")
        mpath = tmp_path / "motion.txt"
        mpath.write_text("# name vx vy vz\nmover 1.0 0 -2.0\n")
        scene = load_scene(spath, mpath)
        assert scene.objects[0].velocity == Vec3(1.0, 0.0, -2.0)
        table = load_motion_table(mpath)
        assert table["mover"].x == 1.0

    def test_bad_motion_record_rejected(self, tmp_path):
        mpath = tmp_path / "motion.txt"
        mpath.write_text("mover 1.0 0\n")
        with pytest.raises(ValueError):
            load_motion_table(mpath)


class TestCameraValidation:
    def test_rejects_non_orthonormal_basis(self):
        with pytest.raises(ValueError):
            Camera(Vec3(0, 0, 0), Vec3(0, 0, 1), Vec3(0, 1, 0.1), Vec3(1, 0, 0),
                   60.0, 0.3, 20.0)

    def test_rejects_bad_near_far(self):
        with pytest.raises(ValueError):
            Camera.from_forward(Vec3(0, 0, 0), Vec3(0, 0, 1), 60.0, 5.0, 2.0)

    def test_yawed_keeps_orthonormality(self):
        cam = Camera.from_forward(Vec3(0, 0, 0), Vec3(0, 0, 1), 60.0, 0.3, 20.0)
        y = cam.yawed(14.0)
        assert abs(y.forward.dot(y.right)) < 1e-12
        assert y.forward.norm() == pytest.approx(1.0)
