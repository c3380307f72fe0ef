import numpy as np
import pytest

from meshsplat.camera import Camera, CameraError, default_intrinsics, load_cameras, look_at, save_cameras
from meshsplat.convert import convert_mesh
from meshsplat.mesh import TriangleMesh, make_icosphere
from meshsplat.render import (
    ALPHA_CLAMP,
    DILATION,
    RenderOutput,
    Splat2D,
    SplatBatch,
    project_backward,
    project_cloud,
    project_cloud_backward,
    project_gaussian,
    rasterize,
    rasterize_backward,
    render_backward,
    render_mesh,
)

from fd_utils import relative_error


def identity_camera(width=32, height=32, f=40.0):
    return Camera(
        rotation=np.eye(3), translation=np.zeros(3),
        fx=f, fy=f, cx=(width - 1) / 2, cy=(height - 1) / 2,
        width=width, height=height,
    )


def octahedron():
    verts = np.array([
        (1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1),
    ], dtype=float)
    facets = [
        (0, 2, 4), (2, 1, 4), (1, 3, 4), (3, 0, 4),
        (2, 0, 5), (1, 2, 5), (3, 1, 5), (0, 3, 5),
    ]
    rng = np.random.default_rng(0)
    colors = rng.random((6, 3)) * 0.8 + 0.1
    return TriangleMesh(verts, facets, colors)


class TestCamera:
    def test_rejects_nonorthonormal(self):
        rot = np.eye(3)
        rot = rot + 1e-6
        with pytest.raises(CameraError):
            Camera(rotation=rot, translation=np.zeros(3), fx=1, fy=1, cx=0, cy=0, width=4, height=4)

    def test_rejects_bad_depth_window(self):
        with pytest.raises(CameraError):
            Camera(rotation=np.eye(3), translation=np.zeros(3), fx=1, fy=1,
                   cx=0, cy=0, width=4, height=4, near=2.0, far=1.0)

    def test_look_at_top_down(self):
        cam = look_at((0, 0, 3), (0, 0, 0), **default_intrinsics(64, 64))
        assert np.allclose(cam.position, (0, 0, 3), atol=1e-12)
        p = cam.world_to_camera(np.zeros(3))
        assert p[2] == pytest.approx(3.0)
        assert np.allclose(p[:2], 0.0, atol=1e-12)
        assert np.linalg.det(cam.rotation) == pytest.approx(1.0)

    def test_look_at_general_points_forward(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            pos = rng.normal(size=3) * 3
            if np.linalg.norm(pos) < 0.5:
                continue
            cam = look_at(pos, (0, 0, 0), **default_intrinsics(32, 32))
            assert cam.world_to_camera(np.zeros(3))[2] == pytest.approx(np.linalg.norm(pos))

    def test_camera_file_roundtrip(self, tmp_path):
        rng = np.random.default_rng(2)
        cams = [
            look_at(rng.normal(size=3) * 4, rng.normal(size=3) * 0.1,
                    **default_intrinsics(48, 36))
            for _ in range(5)
        ]
        save_cameras(cams, tmp_path / "cams.txt")
        back = load_cameras(tmp_path / "cams.txt")
        assert len(back) == 5
        for a, b in zip(cams, back):
            assert np.array_equal(a.rotation, b.rotation)
            assert np.array_equal(a.translation, b.translation)
            assert (a.fx, a.fy, a.cx, a.cy) == (b.fx, b.fy, b.cx, b.cy)
            assert (a.width, a.height) == (b.width, b.height)

    def test_camera_file_errors(self, tmp_path):
        bad = tmp_path / "bad.txt"
        bad.write_text("1 2 3\n")
        with pytest.raises(CameraError):
            load_cameras(bad)


def on_axis_gaussian(z, sigma2=0.01):
    from meshsplat.convert import FacetGaussian
    return FacetGaussian(
        mean=np.array([0.0, 0.0, z]), cov3d=sigma2 * np.eye(3),
        rotation=np.eye(3), scales=np.full(3, np.sqrt(sigma2)),
        opacity=1.0, color_dc=np.full(3, 0.5),
    )


class TestProjection:
    def test_on_axis_center(self):
        cam = identity_camera()
        s = project_gaussian(on_axis_gaussian(z=2.0), cam)
        assert s is not None
        assert np.allclose(s.mean2d, (cam.cx, cam.cy), atol=1e-12)
        assert s.depth == pytest.approx(2.0)

    def test_isotropic_covariance_projection(self):
        cam = identity_camera(f=40.0)
        sigma2 = 0.01
        z = 2.0
        s = project_gaussian(on_axis_gaussian(z=z, sigma2=sigma2), cam)
        expected = sigma2 * cam.fx**2 / z**2
        assert s.cov2d_screen[0, 0] == pytest.approx(expected + DILATION, rel=1e-12)
        assert s.cov2d_screen[1, 1] == pytest.approx(expected + DILATION, rel=1e-12)
        assert abs(s.cov2d_screen[0, 1]) < 1e-12

    def test_behind_camera_culled(self):
        cam = identity_camera()
        assert project_gaussian(on_axis_gaussian(z=-2.0), cam) is None

    def test_beyond_far_culled(self):
        cam = identity_camera()
        assert project_gaussian(on_axis_gaussian(z=500.0), cam) is None

    def test_offscreen_culled(self):
        from meshsplat.convert import FacetGaussian
        cam = identity_camera()
        g = FacetGaussian(
            mean=np.array([50.0, 0.0, 2.0]), cov3d=0.0001 * np.eye(3),
            rotation=np.eye(3), scales=np.full(3, 0.01),
            opacity=1.0, color_dc=np.full(3, 0.5),
        )
        assert project_gaussian(g, cam) is None

    def test_cloud_projection_matches_scalar(self):
        mesh = make_icosphere(80)
        cam = look_at((0, 0, 3), (0, 0, 0), **default_intrinsics(64, 64))
        cloud = convert_mesh(mesh)
        batch = project_cloud(cloud, cam)
        assert len(batch) > 0
        for row in range(0, len(batch), 17):
            src = batch.source[row]
            s = project_gaussian(cloud[src], cam)
            assert np.allclose(s.mean2d, batch.mean2d[row], atol=1e-12)
            assert np.allclose(s.cov2d_screen, batch.cov2d[row], atol=1e-12)


def splat(mean2d, color, depth=1.0, opacity=1.0, cov=((2.0, 0.0), (0.0, 2.0)), source=-1):
    return Splat2D(
        mean2d=np.asarray(mean2d, dtype=float),
        cov2d_screen=np.asarray(cov, dtype=float),
        depth=depth, color=np.asarray(color, dtype=float), opacity=opacity,
        source=source,
    )


class TestRasterize:
    def test_empty_scene(self):
        cam = identity_camera()
        out = rasterize([], cam, background=(0.2, 0.4, 0.6))
        assert np.allclose(out.rgb, (0.2, 0.4, 0.6))
        assert np.all(out.alpha == 0)

    def test_single_opaque_splat_clamp(self):
        cam = identity_camera()
        px = (16, 16)
        out = rasterize([splat(px, (1, 1, 1))], cam, background=(0, 0, 0))
        assert np.allclose(out.rgb[px[1], px[0]], 0.99, atol=1e-12)
        assert out.alpha[px[1], px[0]] == pytest.approx(0.99)

    def test_two_splats_front_to_back(self):
        cam = identity_camera()
        px = (16, 16)
        red = splat(px, (1, 0, 0), depth=1.0, source=0)
        blue = splat(px, (0, 0, 1), depth=2.0, source=1)
        out = rasterize([blue, red], cam, background=(0, 0, 0))
        value = out.rgb[px[1], px[0]]
        assert value[0] == pytest.approx(0.99, abs=1e-12)
        assert value[2] == pytest.approx(0.01 * 0.99, abs=1e-12)
        assert out.alpha[px[1], px[0]] == pytest.approx(1 - 1e-4)

    def test_depth_tie_broken_by_source(self):
        cam = identity_camera()
        px = (16, 16)
        a = splat(px, (1, 0, 0), depth=1.0, source=0)
        b = splat(px, (0, 0, 1), depth=1.0, source=1)
        out1 = rasterize([a, b], cam)
        out2 = rasterize([b, a], cam)
        assert np.array_equal(out1.rgb, out2.rgb)
        assert out1.rgb[px[1], px[0], 0] > out1.rgb[px[1], px[0], 2]

    def test_conservation_and_background_consistency(self):
        rng = np.random.default_rng(3)
        cam = identity_camera()
        splats = [
            splat(rng.uniform(4, 28, size=2), rng.random(3), depth=rng.uniform(1, 4),
                  opacity=rng.uniform(0.2, 0.8), source=i)
            for i in range(12)
        ]
        bg1 = np.array([0.0, 0.0, 0.0])
        bg2 = np.array([0.3, 0.7, 0.2])
        out1 = rasterize(splats, cam, bg1)
        out2 = rasterize(splats, cam, bg2)
        fg1 = out1.rgb - (1 - out1.alpha[..., None]) * bg1
        fg2 = out2.rgb - (1 - out2.alpha[..., None]) * bg2
        assert np.abs(fg1 - fg2).max() < 1e-6
        assert np.array_equal(out1.alpha, out2.alpha)

    def test_occlusion_monotonicity(self):
        cam = identity_camera()
        px = (16, 16)
        blues = []
        for o_front in (0.3, 0.5, 0.7, 0.9):
            out = rasterize([
                splat(px, (1, 0, 0), depth=1.0, opacity=o_front, source=0),
                splat(px, (0, 0, 1), depth=2.0, opacity=0.6, source=1),
            ], cam)
            blues.append(out.rgb[px[1], px[0], 2])
        assert all(b1 >= b2 - 1e-12 for b1, b2 in zip(blues, blues[1:]))

    def test_nonfinite_rejected(self):
        cam = identity_camera()
        bad = splat((16, np.nan), (1, 1, 1))
        with pytest.raises(ValueError):
            rasterize([bad], cam)

    def test_bit_determinism(self):
        rng = np.random.default_rng(4)
        mesh = make_icosphere(320)
        cam = look_at((0.5, -2.5, 1.5), (0, 0, 0), **default_intrinsics(64, 48))
        out1 = render_mesh(mesh, cam)
        out2 = render_mesh(mesh, cam)
        assert np.array_equal(out1.rgb, out2.rgb)
        assert np.array_equal(out1.alpha, out2.alpha)

    def test_float32_close_to_float64(self):
        mesh = make_icosphere(320)
        cam = look_at((0, 2.8, 1.2), (0, 0, 0), **default_intrinsics(48, 48))
        o64 = render_mesh(mesh, cam, dtype=np.float64)
        o32 = render_mesh(mesh, cam, dtype=np.float32)
        assert o32.rgb.dtype == np.float32
        assert np.abs(o64.rgb - o32.rgb).max() < 1e-3


def scene_loss(splats, cam, bg, g_rgb, g_alpha):
    out = rasterize(splats, cam, bg)
    return float(np.sum(g_rgb * out.rgb) + np.sum(g_alpha * out.alpha))


def perturbed(splats, i, field, delta):
    out = []
    for j, s in enumerate(splats):
        if j != i:
            out.append(s)
            continue
        mean2d = s.mean2d.copy()
        cov = s.cov2d_screen.copy()
        opacity = s.opacity
        color = s.color.copy()
        if field[0] == "mean":
            mean2d[field[1]] += delta
        elif field[0] == "cov":
            a, b = field[1]
            cov[a, b] += delta
            if a != b:
                cov[b, a] += delta
        elif field[0] == "opacity":
            opacity += delta
        else:
            color[field[1]] += delta
        out.append(Splat2D(mean2d=mean2d, cov2d_screen=cov, depth=s.depth,
                           color=color, opacity=opacity, source=s.source))
    return out


class TestRasterizeBackward:
    def test_zero_upstream(self):
        cam = identity_camera()
        splats = [splat((10, 10), (1, 0, 0), opacity=0.5)]
        out = rasterize(splats, cam)
        g = rasterize_backward(splats, cam, out, np.zeros((32, 32, 3)), np.zeros((32, 32)))
        assert all(np.all(x == 0) for x in g)

    def test_single_splat_mean_fd(self):
        cam = identity_camera()
        splats = [splat((15.3, 16.2), (0.8, 0.4, 0.2), opacity=0.5)]
        bg = np.zeros(3)
        out = rasterize(splats, cam, bg)
        g_rgb = np.zeros((32, 32, 3))
        g_rgb[16, 15] = (1.0, 1.0, 1.0)  # grad on the near-center pixel color
        g_alpha = np.zeros((32, 32))
        gm, _, _, _ = rasterize_backward(splats, cam, out, g_rgb, g_alpha)
        eps = 1e-4
        for axis in range(2):
            hi = scene_loss(perturbed(splats, 0, ("mean", axis), eps), cam, bg, g_rgb, g_alpha)
            lo = scene_loss(perturbed(splats, 0, ("mean", axis), -eps), cam, bg, g_rgb, g_alpha)
            fd = (hi - lo) / (2 * eps)
            assert gm[0, axis] == pytest.approx(fd, rel=1e-4)

    def test_opacity_gradient_at_center(self):
        # alpha image at the splat center changes 1:1 with opacity while
        # unclamped: d(alpha)/d(opacity) = exp(0) = 1
        cam = identity_camera()
        splats = [splat((16, 16), (1, 1, 1), opacity=0.5)]
        out = rasterize(splats, cam)
        g_alpha = np.zeros((32, 32))
        g_alpha[16, 16] = 1.0
        _, _, _, go = rasterize_backward(splats, cam, out, np.zeros((32, 32, 3)), g_alpha)
        assert go[0] == pytest.approx(1.0, abs=1e-12)
        eps = 1e-5
        hi = scene_loss(perturbed(splats, 0, ("opacity", None), eps), cam, np.zeros(3),
                        np.zeros((32, 32, 3)), g_alpha)
        lo = scene_loss(perturbed(splats, 0, ("opacity", None), -eps), cam, np.zeros(3),
                        np.zeros((32, 32, 3)), g_alpha)
        assert go[0] == pytest.approx((hi - lo) / (2 * eps), rel=1e-6)

    def test_random_scene_full_fd(self):
        # all parameter gradients vs central differences; off-diagonal
        # covariance entries are perturbed symmetrically, so the expected
        # derivative is the sum of both off-diagonal gradient entries
        rng = np.random.default_rng(5)
        cam = identity_camera()
        bg = rng.random(3)
        for scene in range(3):
            splats = []
            for i in range(7):
                a = rng.normal(size=(2, 2))
                cov = a @ a.T + 1.5 * np.eye(2)
                splats.append(Splat2D(
                    mean2d=rng.uniform(6, 26, size=2),
                    cov2d_screen=cov,
                    depth=float(rng.uniform(1, 5)),
                    color=rng.random(3),
                    opacity=float(rng.uniform(0.25, 0.65)),
                    source=i,
                ))
            g_rgb = rng.normal(size=(32, 32, 3))
            g_alpha = rng.normal(size=(32, 32))
            out = rasterize(splats, cam, bg)
            gm, gc, gcol, go = rasterize_backward(splats, cam, out, g_rgb, g_alpha)
            eps = 1e-5

            def fd(i, field):
                hi = scene_loss(perturbed(splats, i, field, eps), cam, bg, g_rgb, g_alpha)
                lo = scene_loss(perturbed(splats, i, field, -eps), cam, bg, g_rgb, g_alpha)
                return (hi - lo) / (2 * eps)

            for i in range(len(splats)):
                for axis in range(2):
                    assert relative_error(gm[i, axis], fd(i, ("mean", axis))) < 1e-4
                assert relative_error(gc[i, 0, 0], fd(i, ("cov", (0, 0)))) < 1e-4
                assert relative_error(gc[i, 1, 1], fd(i, ("cov", (1, 1)))) < 1e-4
                assert relative_error(gc[i, 0, 1] + gc[i, 1, 0], fd(i, ("cov", (0, 1)))) < 1e-4
                assert relative_error(go[i], fd(i, ("opacity", None))) < 1e-4
                for ch in range(3):
                    assert relative_error(gcol[i, ch], fd(i, ("color", ch))) < 1e-4


class TestProjectBackward:
    def test_zero_upstream(self):
        cam = identity_camera()
        g3, gc3 = project_backward(on_axis_gaussian(2.0), cam, np.zeros(2), np.zeros((2, 2)))
        assert np.all(g3 == 0) and np.all(gc3 == 0)

    def test_on_axis_mean_jacobian(self):
        cam = identity_camera(f=40.0)
        g3, _ = project_backward(on_axis_gaussian(z=2.0), cam, np.array([1.0, 0.0]), np.zeros((2, 2)))
        # d(mean2d_x)/d(mean3d) = fx/z along the camera x axis (world x here)
        assert np.allclose(g3, (cam.fx / 2.0, 0.0, 0.0), atol=1e-12)

    def test_random_pose_fd(self):
        from meshsplat.convert import FacetGaussian
        rng = np.random.default_rng(6)
        for _ in range(10):
            cam = look_at(rng.normal(size=3) * 3 + (0, 0, 4), rng.normal(size=3) * 0.2,
                          **default_intrinsics(32, 32))
            mean = rng.normal(size=3) * 0.3
            a = rng.normal(size=(3, 3)) * 0.1
            cov = a @ a.T + 0.01 * np.eye(3)
            g_m2 = rng.normal(size=2)
            g_c2 = rng.normal(size=(2, 2))
            g_c2 = g_c2 + g_c2.T  # symmetric upstream, as the rasterizer emits

            def scalar(mean_, cov_):
                gg = FacetGaussian(mean=mean_, cov3d=cov_, rotation=np.eye(3),
                                   scales=np.full(3, 0.1), opacity=1.0,
                                   color_dc=np.full(3, 0.5))
                s = project_gaussian(gg, cam)
                assert s is not None
                return float(g_m2 @ s.mean2d + np.sum(g_c2 * s.cov2d_screen))

            g = FacetGaussian(mean=mean, cov3d=cov, rotation=np.eye(3),
                              scales=np.full(3, 0.1), opacity=1.0, color_dc=np.full(3, 0.5))
            gm3, gc3 = project_backward(g, cam, g_m2, g_c2)
            eps = 1e-6
            for axis in range(3):
                d = np.zeros(3)
                d[axis] = eps
                fd = (scalar(mean + d, cov) - scalar(mean - d, cov)) / (2 * eps)
                assert relative_error(gm3[axis], fd) < 1e-4
            # symmetric perturbations only: both off-diagonal entries move
            # together, so the directional derivative is the entry sum
            for a_ in range(3):
                for b_ in range(a_, 3):
                    d = np.zeros((3, 3))
                    d[a_, b_] += eps
                    d[b_, a_] += eps
                    fd = (scalar(mean, cov + d) - scalar(mean, cov - d)) / (2 * eps)
                    expected = gc3[a_, b_] + gc3[b_, a_]
                    assert relative_error(expected, fd) < 1e-4


class TestRenderMesh:
    def test_sphere_fills_center(self):
        mesh = make_icosphere(1280)
        cam = look_at((0, 0, 3), (0, 0, 0), **default_intrinsics(64, 64))
        out = render_mesh(mesh, cam)
        h, w = 64, 64
        yy, xx = np.mgrid[0:h, 0:w]
        rad = np.hypot(xx - cam.cx, yy - cam.cy)
        inside = rad < 0.5 * cam.fx / 3.0  # well inside the projected disk
        assert out.alpha[inside].min() > 0.9

    def test_behind_camera_background(self):
        mesh = make_icosphere(80)
        cam = Camera(rotation=np.eye(3), translation=np.zeros(3),
                     fx=40, fy=40, cx=15.5, cy=15.5, width=32, height=32)
        behind = mesh.with_vertices(mesh.vertices + np.array([0, 0, -10.0]))
        out = render_mesh(behind, cam, background=(0.1, 0.2, 0.3))
        assert np.allclose(out.rgb, (0.1, 0.2, 0.3))
        assert np.all(out.alpha == 0)

    def test_end_to_end_vertex_gradient_fd(self):
        mesh = octahedron()
        cam = look_at((1.7, -2.2, 1.4), (0, 0, 0), **default_intrinsics(32, 32))
        rng = np.random.default_rng(7)
        g_rgb = rng.normal(size=(32, 32, 3))
        g_alpha = rng.normal(size=(32, 32))
        bg = np.array([0.1, 0.1, 0.1])
        out, ctx = render_mesh(mesh, cam, background=bg, return_ctx=True)
        gv, gcol = render_backward(ctx, g_rgb, g_alpha)

        def loss(verts):
            o = render_mesh(mesh.with_vertices(verts), cam, background=bg)
            return float(np.sum(g_rgb * o.rgb) + np.sum(g_alpha * o.alpha))

        # a tiny step keeps the probe on one side of tile and cull
        # boundaries, where the renderer is smooth
        eps = 1e-6
        num = np.zeros_like(mesh.vertices)
        v0 = mesh.vertices.copy()
        for r in range(6):
            for c in range(3):
                vp = v0.copy(); vp[r, c] += eps
                vm = v0.copy(); vm[r, c] -= eps
                num[r, c] = (loss(vp) - loss(vm)) / (2 * eps)
        assert relative_error(gv, num) < 1e-3

    def test_end_to_end_color_gradient_fd(self):
        mesh = octahedron()
        cam = look_at((0, -2.5, 1.0), (0, 0, 0), **default_intrinsics(32, 32))
        rng = np.random.default_rng(8)
        g_rgb = rng.normal(size=(32, 32, 3))
        g_alpha = np.zeros((32, 32))
        out, ctx = render_mesh(mesh, cam, return_ctx=True)
        _, gcol = render_backward(ctx, g_rgb, g_alpha)

        def loss(colors):
            o = render_mesh(TriangleMesh(mesh.vertices, mesh.facets, colors), cam)
            return float(np.sum(g_rgb * o.rgb))

        eps = 1e-5
        num = np.zeros_like(mesh.colors)
        c0 = mesh.colors.copy()
        for r in range(6):
            for c in range(3):
                cp = c0.copy(); cp[r, c] += eps
                cm = c0.copy(); cm[r, c] -= eps
                num[r, c] = (loss(cp) - loss(cm)) / (2 * eps)
        assert relative_error(gcol, num) < 1e-3
