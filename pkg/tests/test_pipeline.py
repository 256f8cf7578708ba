"""
流水线测试：问题构建、两种求解器、误差、报告与结果文件
"""

import json

import numpy as np
import pytest

from modules.config import apply_overrides, preset
from modules.errors import NonFiniteError, PipelineStageError, RayIPDGError, SingularSystemError
from modules.neural_net import Dense, Network
from modules.pipeline import (RunReport, build_problem, exact_direction_error, l2_relative_error, obtain_network,
                              pipeline_stage, plot_grid, ray_ipdg_solve, read_field_dump, run_pipeline,
                              standard_ipdg_solve, write_artifacts, write_field_dump, write_plot_csv)
from modules.ray_basis import DirectionSet


def with_backend(cfg, backend, *overrides):
    return apply_overrides(cfg, [f'nn.backend={backend}', *overrides])


class TestBuildProblem:
    def test_plane_wave_problem(self, small_plane_config):
        problem = build_problem(small_plane_config)
        assert problem.mode == 'impedance'
        assert problem.mesh.n_elements == 16
        assert problem.omega_tilde == pytest.approx(15.0)
        np.testing.assert_allclose(problem.window_lower, [0.0, 0.0])
        np.testing.assert_allclose(problem.window_upper, [1.0, 1.0])
        assert problem.boundary_data(15.0)['g'] is not None

    def test_pml_problem_extends_mesh(self):
        cfg = apply_overrides(preset('example6'), ['mesh.cells=4,4'])
        problem = build_problem(cfg)
        assert problem.mode == 'pml'
        assert problem.pml_delta == pytest.approx(0.25)
        assert problem.mesh.n_elements == 36
        assert problem.reference is None
        np.testing.assert_allclose(problem.gaussian_center, [0.5, 0.1])
        assert problem.boundary_data(problem.omega) == {'g': None, 'g1': None, 'g2': None}

    def test_cauchy_problem_tags_sides(self, small_plane_config):
        cfg = apply_overrides(small_plane_config, ['problem.boundary=cauchy', 'problem.dirichlet_sides=x-,y-'])
        problem = build_problem(cfg)
        assert problem.mode == 'cauchy'
        assert problem.assembly_config(problem.omega).mode == 'cauchy'


class TestSolvers:
    def test_ray_ipdg_with_exact_direction(self, small_plane_config):
        problem = build_problem(small_plane_config)
        directions = DirectionSet.uniform(problem.mesh, [[1.0, 0.0]], problem.ws)
        result = ray_ipdg_solve(problem, directions)
        assert result.n_dof == 16 * 4
        assert result.info.residual < 1e-10
        error = l2_relative_error(result.solution, problem.reference.value, problem.mesh, omega=problem.omega)
        assert error < 1e-6

    def test_standard_ipdg_converges_under_refinement(self, small_plane_config):
        problem = build_problem(small_plane_config)
        low = problem.reference_at(15.0)
        errors = []
        for refinement in (4, 8):
            result = standard_ipdg_solve(problem, 15.0, refinement=refinement)
            assert result.n_dof == (4 * refinement) ** 2 * 4
            errors.append(l2_relative_error(result.solution, low.value, result.mesh, omega=15.0))
        assert errors[1] < errors[0]
        assert errors[1] < 0.15


class TestL2RelativeError:
    def test_callable_numeric(self, small_plane_config):
        problem = build_problem(small_plane_config)
        ref = problem.reference.value
        assert l2_relative_error(ref, ref, problem.mesh, omega=problem.omega) == pytest.approx(0.0, abs=1e-14)
        doubled = l2_relative_error(lambda p: 2.0 * ref(p), ref, problem.mesh, omega=problem.omega)
        assert doubled == pytest.approx(1.0)

    def test_empty_window(self, small_plane_config):
        problem = build_problem(small_plane_config)
        ref = problem.reference.value
        with pytest.raises(RayIPDGError):
            l2_relative_error(ref, ref, problem.mesh, window=(np.array([2.0, 2.0]), np.array([3.0, 3.0])))

    def test_zero_reference(self, small_plane_config):
        problem = build_problem(small_plane_config)
        zero = lambda points: np.zeros(points.shape[:-1], dtype=complex)
        with pytest.raises(RayIPDGError):
            l2_relative_error(zero, zero, problem.mesh)


class TestRunPipeline:
    def test_exact_backend(self, small_plane_config):
        result = run_pipeline(with_backend(small_plane_config, 'exact'))
        report = result.report
        assert result.reduced is None
        assert report.metrics['l2_relative_error'] < 1e-6
        assert report.metrics['direction_rmse'] == pytest.approx(0.0, abs=1e-12)
        assert report.metrics['reduced_l2_relative_error'] is None
        assert report.dofs['ray'] == 64
        assert report.dofs['reduced'] == 0
        assert report.directions['backend'] == 'exact'
        assert {'setup', 'learning', 'high_frequency', 'metrics'} <= set(report.timings)

    def test_oracle_backend(self, small_plane_config):
        result = run_pipeline(with_backend(small_plane_config, 'oracle'))
        metrics = result.report.metrics
        assert result.reduced is not None
        assert metrics['direction_rmse'] < 0.2
        assert metrics['reduced_l2_relative_error'] < 0.15
        assert metrics['l2_relative_error'] < 0.5
        assert result.report.dofs['reduced'] == 32 * 32 * 4

    def test_cauchy_with_exact_directions(self, small_plane_config):
        cfg = with_backend(small_plane_config, 'exact', 'problem.boundary=cauchy', 'problem.dirichlet_sides=x-,y-')
        result = run_pipeline(cfg)
        assert result.report.metrics['l2_relative_error'] < 1e-6

    def test_direction_perturbation_increases_error(self, small_plane_config):
        exact = exact_direction_error(small_plane_config, 0.0)
        perturbed = exact_direction_error(small_plane_config, 0.05)
        assert exact < 1e-6
        assert perturbed > 10 * exact

    def test_stage_failure_is_labelled(self, small_plane_config, monkeypatch):
        def broken(*args, **kwargs):
            raise SingularSystemError("矩阵奇异")

        monkeypatch.setattr('modules.pipeline.ray_ipdg_solve', broken)
        with pytest.raises(PipelineStageError) as excinfo:
            run_pipeline(with_backend(small_plane_config, 'exact'))
        assert excinfo.value.stage == 'high_frequency'
        assert excinfo.value.exit_code == 2

    def test_non_finite_network_output_is_numerical_failure(self, small_plane_config):
        net = Network.build(dim=2, n_fine=8, n_directions=1, channels=(2,), hidden=4)
        [layer for layer in net.layers if isinstance(layer, Dense)][0].params['b'][:] = np.nan
        with pytest.raises(PipelineStageError) as excinfo:
            run_pipeline(with_backend(small_plane_config, 'nn'), net=net)
        assert excinfo.value.stage == 'learning'
        assert isinstance(excinfo.value.cause, NonFiniteError)
        assert excinfo.value.exit_code == 2


class TestPipelineStage:
    def test_records_timing(self):
        timings = {}
        with pipeline_stage(timings, 'setup'):
            pass
        assert timings['setup'] >= 0.0

    def test_wraps_errors(self):
        with pytest.raises(PipelineStageError) as excinfo:
            with pipeline_stage({}, 'reduced'):
                raise ValueError("bad")
        assert excinfo.value.stage == 'reduced'
        assert excinfo.value.exit_code == 1
        assert '[reduced]' in str(excinfo.value)

    def test_does_not_double_wrap(self):
        inner = PipelineStageError('setup', SingularSystemError("x"))
        with pytest.raises(PipelineStageError) as excinfo:
            with pipeline_stage({}, 'metrics'):
                raise inner
        assert excinfo.value is inner


class TestRunReport:
    def _report(self):
        return RunReport(name='t', metrics={'l2_relative_error': 0.01, 'dg_norm_error': None},
                         dofs={'ray': 64}, timings={'setup': 0.5}, resources={'workers': 1})

    def test_save_and_load(self, tmp_path):
        path = str(tmp_path / 'out' / 'report.json')
        report = self._report()
        report.save(path)
        assert RunReport.load(path).to_dict() == report.to_dict()

    def test_numpy_values_are_serialized(self, tmp_path):
        report = RunReport(name='t', metrics={'residual': np.float64(1e-12)}, dofs={'ray': np.int64(4)})
        data = json.loads(report.to_json())
        assert data['dofs']['ray'] == 4

    def test_deterministic_dict_ignores_timings(self):
        a = self._report()
        b = self._report()
        b.timings = {'setup': 9.0}
        b.resources = {'workers': 8}
        assert a.deterministic_dict() == b.deterministic_dict()
        assert 'timings' not in a.deterministic_dict()

    def test_load_invalid(self, tmp_path):
        path = tmp_path / 'report.json'
        path.write_text('{not json')
        with pytest.raises(RayIPDGError):
            RunReport.load(str(path))


class TestArtifacts:
    def test_field_dump_round_trip(self, tmp_path, rng):
        values = rng.normal(size=6) + 1j * rng.normal(size=6)
        path = str(tmp_path / 'f.hrfd')
        write_field_dump(path, [3, 2], np.array([0.0, 0.0]), np.array([1.0, 0.5]), 12.5, values)
        data = read_field_dump(path)
        assert data['counts'] == [3, 2]
        assert data['omega'] == 12.5
        np.testing.assert_array_equal(data['upper'], [1.0, 0.5])
        np.testing.assert_array_equal(data['values'], values)

    def test_field_dump_bad_magic(self, tmp_path):
        path = tmp_path / 'f.hrfd'
        path.write_bytes(b'XXXXX' + bytes(16))
        with pytest.raises(RayIPDGError):
            read_field_dump(str(path))

    def test_plot_csv(self, tmp_path):
        path = tmp_path / 'f.csv'
        points = np.array([[0.0, 0.0], [1.0, 0.0]])
        write_plot_csv(str(path), points, np.array([1.0 + 0j, 3.0 + 4.0j]))
        lines = path.read_text().splitlines()
        assert lines[0] == 'x,y,re,im,abs'
        assert len(lines) == 3
        assert float(lines[2].split(',')[4]) == pytest.approx(5.0)

    def test_plot_grid(self, small_plane_config):
        points, counts = plot_grid(build_problem(small_plane_config))
        assert counts == [9, 9]
        assert points.shape == (81, 2)
        np.testing.assert_allclose(points[1], [0.125, 0.0])

    def test_write_artifacts(self, small_plane_config, tmp_path):
        result = run_pipeline(with_backend(small_plane_config, 'exact'))
        paths = write_artifacts(result, str(tmp_path / 'run'))
        assert set(paths) == {'report', 'directions', 'solution_field', 'solution_csv', 'exact_field', 'exact_csv'}
        for path in paths.values():
            assert (tmp_path / 'run' / path.split('/')[-1]).exists()
        solution = read_field_dump(paths['solution_field'])
        exact = read_field_dump(paths['exact_field'])
        np.testing.assert_allclose(solution['values'], exact['values'], atol=1e-5)


class TestObtainNetwork:
    def test_trains_saves_then_loads(self, small_plane_config, tmp_path):
        weights = str(tmp_path / 'net' / 'weights.hrnn')
        cfg = apply_overrides(small_plane_config, [
            'nn.samples=16', 'nn.epochs=1', 'nn.batch_size=8', 'nn.channels=2', 'nn.hidden=4',
            f'nn.weights={weights}',
        ])
        net, history = obtain_network(cfg)
        assert history is not None
        assert (tmp_path / 'net' / 'weights.hrnn').exists()
        loaded, again = obtain_network(cfg)
        assert again is None
        x = np.zeros((1,) + net.input_shape)
        np.testing.assert_allclose(loaded.predict(x), net.predict(x))

    def test_mismatched_weights(self, small_plane_config, tmp_path):
        weights = str(tmp_path / 'weights.hrnn')
        small = ['nn.samples=8', 'nn.epochs=1', 'nn.batch_size=8', 'nn.channels=2', 'nn.hidden=4',
                 f'nn.weights={weights}']
        obtain_network(apply_overrides(small_plane_config, small))
        with pytest.raises(RayIPDGError):
            obtain_network(apply_overrides(small_plane_config, small + ['nn.max_directions=2']))
