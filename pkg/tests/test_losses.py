import numpy as np
import pytest

from meshsplat.camera import default_intrinsics, look_at
from meshsplat.losses import (
    LossWeights,
    color_loss,
    edge_length_loss,
    laplacian_loss,
    silhouette_loss,
    total_loss,
)
from meshsplat.mesh import TriangleMesh, make_icosphere
from meshsplat.render import render_mesh

from fd_utils import finite_difference_gradient, relative_error


class TestColorLoss:
    def test_zero_at_match(self):
        img = np.random.default_rng(0).random((8, 8, 3))
        value, grad = color_loss(img, img)
        assert value == 0.0
        assert np.all(grad == 0)

    def test_constant_offset(self):
        t = np.zeros((4, 4, 3))
        r = np.full((4, 4, 3), 0.25)
        value, grad = color_loss(r, t)
        assert value == pytest.approx(0.0625)
        assert np.allclose(grad, 2 * 0.25 / t.size)

    def test_fd(self):
        rng = np.random.default_rng(1)
        r = rng.random((6, 5, 3))
        t = rng.random((6, 5, 3))
        _, grad = color_loss(r, t)
        num = finite_difference_gradient(lambda x: color_loss(x, t)[0], r)
        assert relative_error(grad, num) < 1e-5

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            color_loss(np.zeros((2, 2, 3)), np.zeros((3, 2, 3)))


class TestSilhouetteLoss:
    def test_perfect_prediction_near_zero(self):
        mask = np.array([[0.0, 1.0], [1.0, 0.0]])
        value, grad = silhouette_loss(mask, mask)
        assert value < 1e-4
        assert np.all(grad == 0)  # clamped at both rails

    def test_fd_interior(self):
        rng = np.random.default_rng(2)
        alpha = rng.uniform(0.05, 0.95, size=(7, 6))
        mask = (rng.random((7, 6)) > 0.5).astype(float)
        _, grad = silhouette_loss(alpha, mask)
        num = finite_difference_gradient(lambda x: silhouette_loss(x, mask)[0], alpha)
        assert relative_error(grad, num) < 1e-5

    def test_clamp_zeroes_gradient(self):
        alpha = np.array([[0.0, 1.0, 0.5]])
        mask = np.array([[1.0, 0.0, 1.0]])
        _, grad = silhouette_loss(alpha, mask)
        assert grad[0, 0] == 0.0
        assert grad[0, 1] == 0.0
        assert grad[0, 2] != 0.0

    def test_worst_case_is_finite(self):
        alpha = np.array([[0.0, 1.0]])
        mask = np.array([[1.0, 0.0]])
        value, _ = silhouette_loss(alpha, mask)
        assert np.isfinite(value)
        assert value == pytest.approx(-np.log(1e-6), rel=1e-6)


class TestEdgeLengthLoss:
    def test_uniform_edges_zero(self):
        # icosahedron: all 30 edges share one length
        mesh = make_icosphere(20)
        value, grad = edge_length_loss(mesh)
        assert value < 1e-24
        assert np.abs(grad).max() < 1e-11

    def test_known_triangle(self):
        # 3-4-5 right triangle: lengths (3, 4, 5), mean 4, variance 2/3
        mesh = TriangleMesh(
            np.array([(0, 0, 0), (3.0, 0, 0), (0, 4.0, 0)]),
            np.array([[0, 1, 2]]),
        )
        value, _ = edge_length_loss(mesh)
        assert value == pytest.approx(2.0 / 3.0, rel=1e-12)

    def test_fd(self, unit_cube):
        _, grad = edge_length_loss(unit_cube)

        def f(v):
            return edge_length_loss(unit_cube, vertices=v)[0]

        num = finite_difference_gradient(f, unit_cube.vertices.copy())
        assert relative_error(grad, num) < 1e-5

    def test_translation_invariance(self, small_sphere):
        v1, _ = edge_length_loss(small_sphere)
        shifted = small_sphere.with_vertices(small_sphere.vertices + np.array([1.0, -2.0, 0.5]))
        v2, g2 = edge_length_loss(shifted)
        assert v1 == pytest.approx(v2, rel=1e-12)
        assert np.allclose(g2.sum(axis=0), 0.0, atol=1e-12)


class TestLaplacianLoss:
    def test_fd_sphere(self, small_sphere):
        _, grad = laplacian_loss(small_sphere)

        def f(v):
            return laplacian_loss(small_sphere, vertices=v)[0]

        num = finite_difference_gradient(f, small_sphere.vertices.copy())
        assert relative_error(grad, num) < 1e-5

    def test_fd_cube(self, unit_cube):
        _, grad = laplacian_loss(unit_cube)

        def f(v):
            return laplacian_loss(unit_cube, vertices=v)[0]

        num = finite_difference_gradient(f, unit_cube.vertices.copy())
        assert relative_error(grad, num) < 1e-5

    def test_translation_invariance(self, small_sphere):
        v1, g1 = laplacian_loss(small_sphere)
        shifted = small_sphere.with_vertices(small_sphere.vertices + 3.0)
        v2, g2 = laplacian_loss(shifted)
        assert v1 == pytest.approx(v2, rel=1e-12)
        assert np.allclose(g1, g2, atol=1e-12)
        assert np.allclose(g1.sum(axis=0), 0.0, atol=1e-12)

    def test_regular_tetrahedron_value(self):
        # each vertex sits at distance ||v - centroid of the others||
        # from its neighbor mean; with unit circumradius that offset is
        # 4/3 of the circumradius
        verts = np.array([
            (1, 1, 1), (1, -1, -1), (-1, 1, -1), (-1, -1, 1)
        ]) / np.sqrt(3.0)
        mesh = TriangleMesh(verts, np.array([(0, 1, 2), (0, 3, 1), (0, 2, 3), (1, 3, 2)]))
        value, _ = laplacian_loss(mesh)
        assert value == pytest.approx((4.0 / 3.0) ** 2, rel=1e-12)


def octa_mesh():
    verts = np.array([(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)], float)
    facets = [(0, 2, 4), (2, 1, 4), (1, 3, 4), (3, 0, 4),
              (2, 0, 5), (1, 2, 5), (3, 1, 5), (0, 3, 5)]
    colors = np.random.default_rng(3).random((6, 3)) * 0.8 + 0.1
    return TriangleMesh(verts, facets, colors)


class TestTotalLoss:
    def make_batch(self, n=2, res=24):
        mesh = octa_mesh()
        rng = np.random.default_rng(4)
        cams, rgbs, masks = [], [], []
        for i in range(n):
            pos = rng.normal(size=3)
            pos = pos / np.linalg.norm(pos) * 2.6
            cam = look_at(pos, (0, 0, 0), **default_intrinsics(res, res))
            cams.append(cam)
            rgbs.append(rng.random((res, res, 3)))
            masks.append((rng.random((res, res)) > 0.4).astype(float))
        return mesh, cams, rgbs, masks

    def test_report_total_consistency(self):
        mesh, cams, rgbs, masks = self.make_batch()
        w = LossWeights(color=0.7, silhouette=1.3, edge=0.2, laplacian=0.05)
        report, _, _ = total_loss(mesh, cams, rgbs, masks, weights=w)
        manual = (w.color * report.color + w.silhouette * report.silhouette
                  + w.edge * report.edge + w.laplacian * report.laplacian)
        assert report.total == pytest.approx(manual, abs=1e-9)
        assert report.n_views == 2

    def test_batch_averages_image_terms(self):
        mesh, cams, rgbs, masks = self.make_batch(n=2)
        r_both, _, _ = total_loss(mesh, cams, rgbs, masks)
        r0, _, _ = total_loss(mesh, cams[:1], rgbs[:1], masks[:1])
        r1, _, _ = total_loss(mesh, cams[1:], rgbs[1:], masks[1:])
        assert r_both.color == pytest.approx((r0.color + r1.color) / 2, rel=1e-12)
        assert r_both.silhouette == pytest.approx((r0.silhouette + r1.silhouette) / 2, rel=1e-12)
        assert r_both.edge == pytest.approx(r0.edge, rel=1e-12)
        assert r_both.laplacian == pytest.approx(r0.laplacian, rel=1e-12)

    def test_matches_component_sum(self):
        mesh, cams, rgbs, masks = self.make_batch(n=1)
        from meshsplat.losses import edge_length_loss, laplacian_loss
        report, _, _ = total_loss(mesh, cams, rgbs, masks)
        out = render_mesh(mesh, cams[0])
        cv, _ = color_loss(out.rgb, rgbs[0])
        sv, _ = silhouette_loss(out.alpha, masks[0])
        ev, _ = edge_length_loss(mesh)
        lv, _ = laplacian_loss(mesh)
        assert report.color == pytest.approx(cv, rel=1e-12)
        assert report.silhouette == pytest.approx(sv, rel=1e-12)
        assert report.edge == pytest.approx(ev, rel=1e-12)
        assert report.laplacian == pytest.approx(lv, rel=1e-12)

    def test_vertex_gradient_fd(self):
        mesh, cams, rgbs, masks = self.make_batch(n=2, res=16)
        report, grad_v, grad_c = total_loss(mesh, cams, rgbs, masks)

        def f(verts):
            m = mesh.with_vertices(verts)
            return total_loss(m, cams, rgbs, masks)[0].total

        eps = 1e-6
        num = np.zeros_like(mesh.vertices)
        base = mesh.vertices.copy()
        for r in range(len(base)):
            for c in range(3):
                vp = base.copy(); vp[r, c] += eps
                vm = base.copy(); vm[r, c] -= eps
                num[r, c] = (f(vp) - f(vm)) / (2 * eps)
        assert relative_error(grad_v, num) < 1e-3

    def test_color_gradient_fd(self):
        mesh, cams, rgbs, masks = self.make_batch(n=1, res=16)
        _, _, grad_c = total_loss(mesh, cams, rgbs, masks)

        def f(colors):
            m = TriangleMesh(mesh.vertices, mesh.facets, colors)
            return total_loss(m, cams, rgbs, masks)[0].total

        eps = 1e-6
        num = np.zeros_like(mesh.colors)
        base = mesh.colors.copy()
        for r in range(len(base)):
            for c in range(3):
                cp = base.copy(); cp[r, c] += eps
                cm = base.copy(); cm[r, c] -= eps
                num[r, c] = (f(cp) - f(cm)) / (2 * eps)
        assert relative_error(grad_c, num) < 1e-4

    def test_input_validation(self):
        mesh, cams, rgbs, masks = self.make_batch(n=2)
        with pytest.raises(ValueError):
            total_loss(mesh, cams, rgbs[:1], masks)
        with pytest.raises(ValueError):
            total_loss(mesh, [], [], [])

    def test_zero_weights_zero_everything(self):
        mesh, cams, rgbs, masks = self.make_batch(n=1)
        w = LossWeights(color=0.0, silhouette=0.0, edge=0.0, laplacian=0.0)
        report, gv, gc = total_loss(mesh, cams, rgbs, masks, weights=w)
        assert report.total == 0.0
        assert np.all(gv == 0)
        assert np.all(gc == 0)

    def test_duplicated_view_matches_single(self):
        mesh, cams, rgbs, masks = self.make_batch(n=1)
        r1, gv1, gc1 = total_loss(mesh, cams, rgbs, masks)
        r2, gv2, gc2 = total_loss(mesh, cams * 2, rgbs * 2, masks * 2)
        assert abs(r1.total - r2.total) < 1e-12
        assert np.abs(gv1 - gv2).max() < 1e-12
        assert np.abs(gc1 - gc2).max() < 1e-12

    def test_batch_gradient_is_mean_of_views(self):
        mesh, cams, rgbs, masks = self.make_batch(n=4, res=16)
        w = LossWeights()
        _, gv_batch, gc_batch = total_loss(mesh, cams, rgbs, masks, weights=w)
        img_only = LossWeights(edge=0.0, laplacian=0.0)
        acc_v = np.zeros_like(gv_batch)
        acc_c = np.zeros_like(gc_batch)
        for i in range(4):
            _, gv, gc = total_loss(mesh, cams[i:i + 1], rgbs[i:i + 1],
                                   masks[i:i + 1], weights=img_only)
            acc_v += gv / 4
            acc_c += gc / 4
        _, g_edge = edge_length_loss(mesh)
        _, g_lap = laplacian_loss(mesh)
        acc_v += w.edge * g_edge + w.laplacian * g_lap
        assert np.abs(gv_batch - acc_v).max() < 1e-9
        assert np.abs(gc_batch - acc_c).max() < 1e-9

    def test_view_permutation_invariance(self):
        mesh, cams, rgbs, masks = self.make_batch(n=3, res=16)
        r1, gv1, _ = total_loss(mesh, cams, rgbs, masks)
        order = [2, 0, 1]
        r2, gv2, _ = total_loss(mesh, [cams[i] for i in order],
                                [rgbs[i] for i in order], [masks[i] for i in order])
        assert r1.total == pytest.approx(r2.total, abs=1e-12)
        assert np.abs(gv1 - gv2).max() < 1e-12
