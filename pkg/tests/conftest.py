"""
测试公共设置：项目根目录入路径、慢测试开关、小规模配置
"""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from modules import Logger, apply_overrides, preset  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="运行完整规模的验收测试")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="需要 --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def quiet_logger():
    Logger().setup("WARNING")
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def small_plane_config():
    """4×4 粗网格上的 example1，ω = 20π，ω̃ = 15"""
    return apply_overrides(preset('example1'), [
        'mesh.cells=4,4',
        f'problem.omega={20 * np.pi!r}',
        'problem.omega_tilde=15',
        'mesh.fine_cells=8',
    ])


@pytest.fixture
def isolated_env(tmp_path, monkeypatch):
    """运行结果写到临时目录，不读项目 .env"""
    monkeypatch.setenv('RAYIPDG_OUTPUT_DIR', str(tmp_path / 'runs'))
    monkeypatch.setenv('RAYIPDG_LOG_LEVEL', 'WARNING')
    monkeypatch.setenv('RAYIPDG_WORKERS', '1')
    monkeypatch.chdir(tmp_path)
    return tmp_path
