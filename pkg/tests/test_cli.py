"""
命令行入口测试：退出码、子命令输出
"""

import json

import pytest

import ray_ipdg
from modules.errors import SingularSystemError
from modules.pipeline import RunReport


SMALL = ['--preset', 'example1', '--set', 'mesh.cells=4,4', '--set', 'problem.omega=62.83185307179586',
         '--set', 'problem.omega_tilde=15', '--set', 'mesh.fine_cells=8', '--workers', '1']


class TestUsage:
    def test_help(self, isolated_env):
        assert ray_ipdg.parse_and_run(['--help']) == 0

    def test_no_command(self, isolated_env):
        assert ray_ipdg.parse_and_run([]) == 1

    @pytest.mark.parametrize("argv", [
        ['pipeline', '--no-such-flag'],
        ['pipeline', '--backend', 'magic'],
        ['frobnicate'],
        ['pipeline', '--workers', 'many'],
    ])
    def test_bad_arguments(self, isolated_env, argv):
        assert ray_ipdg.parse_and_run(argv) == 1

    def test_unknown_preset(self, isolated_env):
        assert ray_ipdg.parse_and_run(['dump-config', '--preset', 'example99']) == 1

    def test_bad_override(self, isolated_env):
        assert ray_ipdg.parse_and_run(['dump-config', '--set', 'mesh.cells=a,b']) == 1

    def test_missing_config_file(self, isolated_env):
        assert ray_ipdg.parse_and_run(['dump-config', '--config', 'absent.conf']) == 1


class TestDumpConfig:
    def test_prints_merged_config(self, isolated_env, capsys):
        assert ray_ipdg.parse_and_run(['dump-config', '--preset', 'example6', '--seed', '5']) == 0
        out = capsys.readouterr().out
        assert '[problem]' in out
        assert 'boundary=pml' in out
        assert 'seed=5' in out


class TestPipelineCommand:
    def test_exact_run_writes_artifacts(self, isolated_env):
        out = isolated_env / 'run'
        assert ray_ipdg.parse_and_run(['pipeline', '--backend', 'exact', '--out', str(out)] + SMALL) == 0
        for name in ('report.json', 'directions.txt', 'solution.hrfd', 'solution.csv', 'config.conf'):
            assert (out / name).exists()
        report = json.loads((out / 'report.json').read_text(encoding='utf-8'))
        assert report['metrics']['l2_relative_error'] < 1e-6

    def test_default_output_directory(self, isolated_env):
        assert ray_ipdg.parse_and_run(['pipeline', '--backend', 'exact'] + SMALL) == 0
        assert (isolated_env / 'runs' / 'example1' / 'report.json').exists()

    def test_numerical_failure_exit_code(self, isolated_env, monkeypatch):
        def broken(*args, **kwargs):
            raise SingularSystemError("矩阵奇异")

        monkeypatch.setattr(ray_ipdg, 'run_pipeline', broken)
        assert ray_ipdg.parse_and_run(['pipeline', '--backend', 'exact', '--out', str(isolated_env / 'r')]
                                      + SMALL) == 2


class TestSolveCommands:
    def test_solve_ray_exact(self, isolated_env):
        out = isolated_env / 'ray'
        assert ray_ipdg.parse_and_run(['solve-ray', '--backend', 'exact', '--out', str(out)] + SMALL) == 0
        report = RunReport.load(str(out / 'report.json'))
        assert report.metrics['l2_relative_error'] < 1e-6
        assert report.dofs['ray'] == 64

    def test_solve_ray_from_directions_file(self, isolated_env):
        first = isolated_env / 'first'
        assert ray_ipdg.parse_and_run(['solve-ray', '--backend', 'exact', '--out', str(first)] + SMALL) == 0
        second = isolated_env / 'second'
        argv = ['solve-ray', '--directions', str(first / 'directions.txt'), '--out', str(second)] + SMALL
        assert ray_ipdg.parse_and_run(argv) == 0
        a = RunReport.load(str(first / 'report.json'))
        b = RunReport.load(str(second / 'report.json'))
        assert b.metrics['l2_relative_error'] == pytest.approx(a.metrics['l2_relative_error'], abs=1e-9)

    def test_solve_ray_nn_without_directions(self, isolated_env):
        argv = ['solve-ray', '--backend', 'nn', '--out', str(isolated_env / 'x')] + SMALL
        assert ray_ipdg.parse_and_run(argv) == 1

    def test_solve_standard(self, isolated_env):
        out = isolated_env / 'std'
        argv = ['solve-standard', '--refinement', '4', '--out', str(out)] + SMALL
        assert ray_ipdg.parse_and_run(argv) == 0
        report = RunReport.load(str(out / 'report.json'))
        assert report.dofs['standard'] == 16 * 16 * 4
        assert report.metrics['l2_relative_error'] < 0.5
        assert (out / 'standard.csv').exists()


class TestReportCommand:
    def _write(self, path, **changes):
        report = RunReport(name='t', metrics={'l2_relative_error': 0.01}, dofs={'ray': 64},
                           timings={'setup': 1.0})
        for key, value in changes.items():
            setattr(report, key, value)
        report.save(str(path))

    def test_show(self, isolated_env):
        path = isolated_env / 'a.json'
        self._write(path)
        assert ray_ipdg.parse_and_run(['report', str(path)]) == 0

    def test_compare_ignores_timings(self, isolated_env):
        a, b = isolated_env / 'a.json', isolated_env / 'b.json'
        self._write(a)
        self._write(b, timings={'setup': 7.0})
        assert ray_ipdg.parse_and_run(['report', str(a), '--compare', str(b)]) == 0

    def test_compare_detects_difference(self, isolated_env):
        a, b = isolated_env / 'a.json', isolated_env / 'b.json'
        self._write(a)
        self._write(b, metrics={'l2_relative_error': 0.02})
        assert ray_ipdg.parse_and_run(['report', str(a), '--compare', str(b)]) == 1

    def test_missing_report(self, isolated_env):
        assert ray_ipdg.parse_and_run(['report', str(isolated_env / 'none.json')]) == 1
