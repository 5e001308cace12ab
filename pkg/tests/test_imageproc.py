import numpy as np
import pytest
from scipy import ndimage

from edgevo.imageproc import (
    EdgeMap,
    ImageError,
    bilinear,
    box_downsample,
    build_nnf,
    build_pyramid,
    canny_edges,
    compute_gradients,
    gaussian_blur,
    non_maximum_suppression,
    read_pgm,
    write_pgm,
    _direction_bins,
    _NMS_OFFSETS,
)

from .helpers import brute_force_nnf, sobel_reference


def white_square(size=64, lo=8, hi=40):
    img = np.zeros((size, size))
    img[lo:hi, lo:hi] = 1.0
    return img


class TestGradients:
    def test_constant_image(self):
        g = compute_gradients(np.full((16, 16), 0.37))
        assert np.abs(g.gx).max() == 0
        assert np.abs(g.gy).max() == 0
        assert np.abs(g.magnitude).max() == 0

    def test_horizontal_ramp_matches_reference(self):
        w = 24
        img = np.tile(np.arange(w) / w, (16, 1))
        g = compute_gradients(img)
        gx_ref, gy_ref = sobel_reference(img)
        assert np.abs(g.gx - gx_ref).max() < 1e-12
        assert np.abs(g.gy - gy_ref).max() < 1e-12
        # interior: constant slope 1/w, zero vertical response
        assert np.allclose(g.gx[2:-2, 2:-2], 1.0 / w)
        assert np.abs(g.gy[2:-2, 2:-2]).max() < 1e-12

    def test_vertical_step(self):
        img = np.zeros((12, 20))
        c = 10
        img[:, c:] = 1.0
        g = compute_gradients(img)
        gx_ref, _ = sobel_reference(img)
        assert np.abs(g.gx - gx_ref).max() < 1e-12
        interior = g.magnitude[3:-3]
        peaks = np.argsort(interior[0])[-2:]
        assert set(peaks) == {c - 1, c}
        # direction is (+-1, 0) on the step columns
        assert np.allclose(np.abs(g.gx[3:-3, c - 1 : c + 1]), interior[:, c - 1 : c + 1])
        assert np.abs(g.gy[3:-3, c - 1 : c + 1]).max() < 1e-12

    def test_magnitude_identity(self):
        rng = np.random.default_rng(0)
        g = compute_gradients(rng.uniform(size=(20, 20)))
        assert np.abs(g.magnitude**2 - (g.gx**2 + g.gy**2)).max() < 1e-9

    def test_undersized_image_raises(self):
        with pytest.raises(ImageError):
            compute_gradients(np.zeros((2, 5)))


class TestCanny:
    def test_constant_image_empty_mask(self):
        em = canny_edges(np.full((32, 32), 0.5))
        assert em.edge_count() == 0
        assert np.isinf(em.dist).all()

    def test_invalid_thresholds(self):
        img = white_square()
        with pytest.raises(ImageError):
            canny_edges(img, 0.3, 0.2)
        with pytest.raises(ImageError):
            canny_edges(img, 0.0, 0.2)

    def test_square_contour_closed(self):
        em = canny_edges(white_square())
        mask = em.mask
        assert mask.sum() > 0
        # one connected component
        _, n = ndimage.label(mask, structure=np.ones((3, 3), int))
        assert n == 1
        # the contour encloses the square center: the background component
        # containing the center must not reach the image border
        inv_labels, _ = ndimage.label(~mask)
        center_label = inv_labels[24, 24]
        border = np.concatenate(
            [inv_labels[0], inv_labels[-1], inv_labels[:, 0], inv_labels[:, -1]]
        )
        assert center_label not in border
        # all edge pixels near the square boundary (within smoothing blur)
        vv, uu = np.nonzero(mask)
        d_out = np.maximum(
            np.maximum(8 - 1 - uu, uu - 40), np.maximum(8 - 1 - vv, vv - 40)
        )
        inner = np.minimum(np.minimum(uu - 8, 39 - uu), np.minimum(vv - 8, 39 - vv))
        assert (np.minimum(np.abs(d_out), np.abs(inner)) <= 2).all()

    def test_vertical_step_single_line(self):
        img = np.zeros((32, 32))
        img[:, 16:] = 1.0
        em = canny_edges(img)
        vv, uu = np.nonzero(em.mask)
        assert len(np.unique(uu)) == 1  # one single-pixel-wide vertical line
        dirs = em.gradient_dir[em.mask]
        assert np.abs(np.abs(dirs[:, 0]) - 1.0).max() < 1e-9
        assert np.abs(dirs[:, 1]).max() < 1e-9

    def test_gradient_dir_unit_norm(self):
        em = canny_edges(white_square())
        norms = np.linalg.norm(em.gradient_dir[em.mask], axis=1)
        assert np.abs(norms - 1.0).max() < 1e-9

    def test_nms_idempotence(self):
        # no edge pixel has a strictly larger same-direction neighbor
        img = white_square() + np.random.default_rng(1).normal(0, 0.02, (64, 64))
        em = canny_edges(np.clip(img, 0, 1))
        from edgevo.imageproc import compute_gradients as cg

        grad = cg(gaussian_blur(np.clip(img, 0, 1)))
        bins = _direction_bins(grad.gx, grad.gy)
        m = grad.magnitude
        h, w = m.shape
        for v, u in zip(*np.nonzero(em.mask)):
            du, dv = _NMS_OFFSETS[bins[v, u]]
            for sgn in (1, -1):
                uu, vv = u + sgn * du, v + sgn * dv
                if 0 <= uu < w and 0 <= vv < h and bins[vv, uu] == bins[v, u]:
                    assert not (m[vv, uu] > m[v, u])

    def test_determinism(self):
        img = np.clip(white_square() + np.random.default_rng(2).normal(0, 0.05, (64, 64)), 0, 1)
        a = canny_edges(img)
        b = canny_edges(img)
        assert np.array_equal(a.mask, b.mask)
        assert np.array_equal(a.gradient_dir, b.gradient_dir)
        assert np.array_equal(a.nnf, b.nnf)


class TestNnf:
    def test_single_edge_pixel(self):
        mask = np.zeros((32, 32), bool)
        mask[10, 10] = True
        nnf, dist = build_nnf(mask)
        vv, uu = np.mgrid[0:32, 0:32]
        expected = np.hypot(uu - 10, vv - 10)
        assert np.abs(dist - expected).max() < 1e-9
        assert (nnf == [10, 10]).all()

    def test_all_edges(self):
        mask = np.ones((8, 8), bool)
        nnf, dist = build_nnf(mask)
        assert dist.max() == 0
        vv, uu = np.mgrid[0:8, 0:8]
        assert np.array_equal(nnf[..., 0], uu)
        assert np.array_equal(nnf[..., 1], vv)

    def test_two_pixel_voronoi_matches_brute_force(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            mask = np.zeros((64, 64), bool)
            pts = rng.integers(0, 64, size=(2, 2))
            mask[pts[:, 0], pts[:, 1]] = True
            nnf, dist = build_nnf(mask)
            nnf_ref, d2_ref = brute_force_nnf(mask)
            assert np.array_equal(nnf, nnf_ref)
            assert np.abs(dist**2 - d2_ref).max() < 1e-6

    def test_random_masks_match_brute_force(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            mask = rng.uniform(size=(48, 48)) < 0.03
            if not mask.any():
                mask[0, 0] = True
            nnf, dist = build_nnf(mask)
            nnf_ref, d2_ref = brute_force_nnf(mask)
            assert np.array_equal(nnf, nnf_ref)
            assert np.abs(dist**2 - d2_ref).max() < 1e-6

    def test_empty_mask_raises(self):
        with pytest.raises(ImageError):
            build_nnf(np.zeros((8, 8), bool))

    def test_edgemap_invariants(self):
        em = canny_edges(white_square())
        on_mask = em.dist[em.mask]
        assert np.abs(on_mask).max() == 0
        # nnf targets are edge pixels and dist matches the label
        vv, uu = np.mgrid[0 : em.mask.shape[0], 0 : em.mask.shape[1]]
        nu, nv = em.nnf[..., 0], em.nnf[..., 1]
        assert em.mask[nv, nu].all()
        assert np.abs(em.dist - np.hypot(uu - nu, vv - nv)).max() < 1e-6


class TestPyramid:
    def test_single_level_identity(self):
        img = white_square(32, 4, 20)
        pyr = build_pyramid(img, 1)
        assert len(pyr) == 1
        assert np.array_equal(pyr.levels[0].image, img)

    def test_level_dimensions(self):
        pyr = build_pyramid(np.full((64, 64), 0.5), 3)
        dims = [lvl.image.shape for lvl in pyr.levels]
        assert dims == [(64, 64), (32, 32), (16, 16)]

    def test_too_many_levels(self):
        with pytest.raises(ImageError):
            build_pyramid(np.zeros((64, 64)), 4)

    def test_downsampled_ramp_gradients(self):
        w = 64
        img = np.tile(np.arange(w, dtype=float) / w, (w, 1))
        pyr = build_pyramid(img, 3)
        for lvl in range(3):
            level_img = pyr.levels[lvl].image
            gx_ref, _ = sobel_reference(level_img)
            assert np.abs(pyr.levels[lvl].gradients.gx - gx_ref).max() < 1e-12
            # ramp slope doubles per level in level-pixel units
            assert np.allclose(gx_ref[4:-4, 4:-4], 2**lvl / w)

    def test_odd_dimension_downsample(self):
        img = np.arange(15.0 * 9).reshape(9, 15) / (15 * 9)
        out = box_downsample(img)
        assert out.shape == (5, 8)

    def test_external_edge_source(self):
        img = white_square(32, 4, 20)
        calls = []

        def src(image, level):
            calls.append(level)
            m = np.zeros(image.shape, bool)
            m[image.shape[0] // 2] = True
            return m

        pyr = build_pyramid(img, 2, edge_source=src)
        assert calls == [0, 1]
        assert pyr.levels[0].edges.mask[16].all()


class TestBilinear:
    def test_exact_on_grid(self):
        f = np.arange(12.0).reshape(3, 4)
        pts = [[1, 2], [0, 0], [3, 2]]
        vals = bilinear(f, pts)
        assert np.allclose(vals, [9.0, 0.0, 11.0])

    def test_interpolation_midpoint(self):
        f = np.array([[0.0, 1.0], [2.0, 3.0]])
        assert abs(bilinear(f, [[0.5, 0.5]])[0] - 1.5) < 1e-12

    def test_out_of_bounds_nan(self):
        f = np.zeros((4, 4))
        vals = bilinear(f, [[-0.1, 0], [0, 3.1], [3.0, 3.0]])
        assert np.isnan(vals[0]) and np.isnan(vals[1]) and vals[2] == 0.0


class TestPgm:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        img = rng.uniform(size=(13, 17))
        path = tmp_path / "x.pgm"
        write_pgm(path, img)
        back = read_pgm(path)
        assert back.shape == img.shape
        assert np.abs(back - img).max() <= 0.5 / 255 + 1e-9

    def test_comment_header(self, tmp_path):
        path = tmp_path / "c.pgm"
        payload = bytes(range(6))
        path.write_bytes(b"P5\n# a comment\n3 2\n255\n" + payload)
        img = read_pgm(path)
        assert img.shape == (2, 3)
        assert abs(img[1, 2] - 5 / 255) < 1e-12

    def test_rejects_non_p5(self, tmp_path):
        path = tmp_path / "bad.pgm"
        path.write_bytes(b"P2\n1 1\n255\n0")
        with pytest.raises(ImageError):
            read_pgm(path)
