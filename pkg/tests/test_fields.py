"""
波场模块测试：Hankel 函数、波速模型、参考场与边界数据
"""

import numpy as np
import pytest

from modules.errors import FieldError
from modules.fields import (ClampedSpeed, ConstantSpeed, GaussianLensSpeed, GriddedSpeed, HankelSum, PlaneWaveSum,
                            eval_reference, eval_speed, gaussian_source, hankel0_first_kind, hankel1_first_kind,
                            impedance_data, load_speed_grid, make_source_term, save_speed_grid)
from modules.pipeline import resolve_path


def _fd_gradient(field, point, step=1e-6):
    grad = []
    for a in range(len(point)):
        e = np.zeros(len(point))
        e[a] = step
        grad.append((eval_reference(field, point + e) - eval_reference(field, point - e)) / (2 * step))
    return np.array(grad)


class TestHankel:
    def test_value_at_one(self):
        np.testing.assert_allclose(hankel0_first_kind(1.0), 0.7651976865579666 + 0.08825696421567696j, rtol=1e-12)
        np.testing.assert_allclose(hankel1_first_kind(1.0), 0.44005058574493355 - 0.7812128213002887j, rtol=1e-12)

    def test_scalar_and_array(self):
        assert isinstance(hankel0_first_kind(2.0), complex)
        values = hankel0_first_kind(np.array([0.5, 2.0, 30.0]))
        assert values.shape == (3,)

    def test_wronskian(self):
        """Im(conj(H0)·H1) = -2/(πz) 在级数区与渐近区都成立"""
        z = np.concatenate([np.linspace(0.2, 11.9, 40), np.linspace(12.1, 60.0, 40)])
        h0 = hankel0_first_kind(z)
        h1 = hankel1_first_kind(z)
        np.testing.assert_allclose(np.imag(np.conj(h0) * h1), -2.0 / (np.pi * z), rtol=1e-8)

    def test_continuous_across_switch(self):
        below = hankel0_first_kind(12.0 - 1e-9)
        above = hankel0_first_kind(12.0 + 1e-9)
        assert abs(below - above) < 1e-8

    def test_large_argument_magnitude(self):
        assert abs(hankel0_first_kind(50.0)) == pytest.approx(np.sqrt(2 / (np.pi * 50)), rel=0.01)

    def test_bessel_equation_residual(self):
        """z²w'' + zw' + z²w ≈ 0（四阶中心差分）"""
        step = 1e-2
        for z in (0.7, 3.0, 9.5, 20.0):
            w = {s: hankel0_first_kind(z + s * step) for s in (-2, -1, 0, 1, 2)}
            second = (-w[2] + 16 * w[1] - 30 * w[0] + 16 * w[-1] - w[-2]) / (12 * step ** 2)
            first = (-w[2] + 8 * w[1] - 8 * w[-1] + w[-2]) / (12 * step)
            residual = z * z * second + z * first + z * z * w[0]
            assert abs(residual) <= 1e-6 * abs(z * z * w[0])

    @pytest.mark.parametrize("z", [0.0, -1.0])
    def test_non_positive_argument(self, z):
        with pytest.raises(FieldError):
            hankel0_first_kind(z)


class TestWaveSpeed:
    def test_constant(self):
        ws = ConstantSpeed(2.0)
        assert eval_speed(ws, [0.3, 0.4]) == 2.0
        assert ws(np.zeros((3, 4, 2))).shape == (3, 4)
        with pytest.raises(FieldError):
            ConstantSpeed(0.0)

    def test_lens(self):
        ws = GaussianLensSpeed()
        assert eval_speed(ws, [0.5, 0.4]) == pytest.approx(0.5)
        assert eval_speed(ws, [0.0, 0.0]) == pytest.approx(1.0, abs=1e-6)
        values = ws(np.random.default_rng(42).uniform(0, 1, size=(200, 2)))
        assert np.all(values >= ws.c_min - 1e-15) and np.all(values <= ws.c_max)

    def test_lens_is_lipschitz(self, rng):
        ws = GaussianLensSpeed()
        x = rng.uniform(0, 1, size=(500, 2))
        y = x + rng.normal(scale=1e-3, size=x.shape)
        ratio = np.abs(ws(x) - ws(y)) / np.linalg.norm(x - y, axis=1)
        # |∇c| 的解析上界约为 7
        assert ratio.max() < 15.0

    def test_gridded_linear_is_exact(self):
        x = np.linspace(0, 1, 5)
        samples = np.repeat((1.0 + x)[:, None], 3, axis=1)
        ws = GriddedSpeed([0, 0], [1, 1], samples)
        assert eval_speed(ws, [0.3, 0.7]) == pytest.approx(1.3)
        assert (ws.c_min, ws.c_max) == (1.0, 2.0)
        with pytest.raises(FieldError):
            eval_speed(ws, [1.2, 0.5])

    def test_gridded_rejects_bad_samples(self):
        with pytest.raises(FieldError):
            GriddedSpeed([0, 0], [1, 1], np.array([[1.0, -1.0], [1.0, 1.0]]))
        with pytest.raises(FieldError):
            GriddedSpeed([0, 0], [1, 1], np.ones((1, 4)))

    def test_clamped(self):
        ws = ClampedSpeed(GaussianLensSpeed(), [0, 0], [1, 1])
        assert eval_speed(ws, [-0.3, 0.4]) == pytest.approx(eval_speed(GaussianLensSpeed(), [0.0, 0.4]))

    def test_speed_file_round_trip(self, tmp_path):
        samples = np.arange(1.0, 13.0).reshape(4, 3)
        path = str(tmp_path / 'speed.txt')
        save_speed_grid(path, GriddedSpeed([0, 0], [1, 2], samples))
        loaded = load_speed_grid(path)
        np.testing.assert_allclose(loaded.samples, samples)
        np.testing.assert_allclose(loaded.upper, [1, 2])

    def test_bundled_layered_model(self):
        ws = load_speed_grid(resolve_path('data/layered_speed.txt'))
        assert ws.samples.shape == (41, 41)
        assert 1.0 <= ws.c_min < ws.c_max <= 1.5

    def test_speed_file_errors(self, tmp_path):
        missing = tmp_path / 'missing.txt'
        with pytest.raises(FieldError):
            load_speed_grid(str(missing))
        short = tmp_path / 'short.txt'
        short.write_text('2 3 3 0 0 1 1\n1 1 1 1\n')
        with pytest.raises(FieldError):
            load_speed_grid(str(short))
        garbage = tmp_path / 'garbage.txt'
        garbage.write_text('2 x\n')
        with pytest.raises(FieldError):
            load_speed_grid(str(garbage))


class TestPlaneWave:
    def test_value(self):
        field = PlaneWaveSum([(1.0, [1.0, 0.0])], omega=10.0)
        assert eval_reference(field, [0.3, 0.9]) == pytest.approx(np.exp(3j))

    def test_requires_unit_directions(self):
        with pytest.raises(FieldError):
            PlaneWaveSum([(1.0, [1.0, 1.0])], omega=10.0)

    def test_gradient_matches_finite_difference(self, rng):
        d = np.array([0.6, 0.8])
        field = PlaneWaveSum([(1.0, [1.0, 0.0]), (0.5j, d)], omega=20.0)
        for point in rng.uniform(0, 1, size=(5, 2)):
            expected = _fd_gradient(field, point)
            np.testing.assert_allclose(field.gradient(point[None, :])[0], expected, rtol=1e-6,
                                       atol=1e-6 * np.linalg.norm(expected))

    def test_helmholtz_residual(self):
        """离散 Laplacian 残差 O(h²)"""
        omega = 15.0
        field = PlaneWaveSum([(1.0, [0.6, 0.8])], omega=omega)
        x = np.array([0.4, 0.3])
        step = 1e-3
        lap = sum(eval_reference(field, x + s * e) for e in np.eye(2) for s in (step, -step)) \
            - 4 * eval_reference(field, x)
        residual = lap / step ** 2 + omega ** 2 * eval_reference(field, x)
        assert abs(residual) < omega ** 4 * step ** 2

    def test_impedance_data(self):
        """u = e^{ikx}：出射面 g = 2iku，入射面 g = 0"""
        field = PlaneWaveSum([(1.0, [1.0, 0.0])], omega=7.0)
        ws = ConstantSpeed(1.0)
        u = eval_reference(field, [1.0, 0.5])
        assert impedance_data(field, ws, [1.0, 0.5], [1.0, 0.0]) == pytest.approx(14j * u)
        assert abs(impedance_data(field, ws, [0.0, 0.5], [-1.0, 0.0])) < 1e-12

    def test_with_frequency(self):
        field = PlaneWaveSum([(1.0, [0.0, 1.0])], omega=7.0).with_frequency(3.0)
        assert field.wavenumber == 3.0
        np.testing.assert_allclose(field.ray_directions(np.zeros(2)), [[0.0, 1.0]])


class TestHankelField:
    def test_two_source_value(self):
        omega = 80 * np.pi
        field = HankelSum([(1.0, [2.0, 2.0]), (0.5, [-0.5, 2.0])], omega=omega)
        r1 = np.hypot(1.5, 1.5)
        r2 = np.hypot(1.0, 1.5)
        expected = np.sqrt(omega) * (hankel0_first_kind(omega * r1) + 0.5 * hankel0_first_kind(omega * r2))
        assert eval_reference(field, [0.5, 0.5]) == pytest.approx(expected, rel=1e-12)

    def test_gradient_matches_finite_difference(self, rng):
        field = HankelSum([(1.0, [2.0, 2.0])], omega=40.0)
        for point in rng.uniform(0, 1, size=(5, 2)):
            expected = _fd_gradient(field, point)
            np.testing.assert_allclose(field.gradient(point[None, :])[0], expected, rtol=1e-6,
                                       atol=1e-6 * np.linalg.norm(expected))

    def test_source_free_in_2d(self):
        omega = 30.0
        field = HankelSum([(1.0, [2.0, 2.0])], omega=omega)
        points = np.array([[0.2, 0.3], [0.8, 0.6]])
        f = field.source(points, ConstantSpeed(1.0))
        assert np.all(np.abs(f) <= 1e-8 * omega ** 2 * np.abs(field.value(points)))
        assert make_source_term(field, ConstantSpeed(1.0)) is None

    def test_laplacian_3d(self):
        omega = 10.0
        field = HankelSum([(1.0, [2.0, 2.0, 2.0])], omega=omega)
        x = np.array([0.3, 0.4, 0.5])
        step = 1e-3
        lap = sum(eval_reference(field, x + s * e) for e in np.eye(3) for s in (step, -step)) \
            - 6 * eval_reference(field, x)
        lap /= step ** 2
        assert field.laplacian(x[None, :])[0] == pytest.approx(lap, rel=1e-4)
        assert make_source_term(field, ConstantSpeed(1.0)) is not None

    def test_rays_point_away_from_source(self):
        field = HankelSum([(1.0, [2.0, 2.0])], omega=10.0)
        np.testing.assert_allclose(field.ray_directions(np.array([1.0, 1.0])), [[-np.sqrt(0.5), -np.sqrt(0.5)]])

    def test_point_on_source(self):
        field = HankelSum([(1.0, [0.5, 0.5])], omega=10.0)
        with pytest.raises(FieldError):
            eval_reference(field, [0.5, 0.5])


class TestSources:
    def test_gaussian_source(self):
        assert gaussian_source(np.array([0.5, 0.1]), [0.5, 0.1]) == pytest.approx(1e4)
        assert gaussian_source(np.array([0.9, 0.9]), [0.5, 0.1]) == 0.0

    def test_plane_wave_needs_no_source(self):
        field = PlaneWaveSum([(1.0, [1.0, 0.0])], omega=10.0)
        assert make_source_term(field, ConstantSpeed(1.0)) is None
        assert make_source_term(field, GaussianLensSpeed()) is not None

    def test_gaussian_plus_reference(self):
        field = PlaneWaveSum([(1.0, [1.0, 0.0])], omega=10.0)
        term = make_source_term(field, GaussianLensSpeed(), gaussian_center=[0.5, 0.1])
        points = np.array([[0.5, 0.1]])
        expected = field.source(points, GaussianLensSpeed()) + 1e4
        np.testing.assert_allclose(term(points), expected)
