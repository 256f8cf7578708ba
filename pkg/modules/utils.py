"""
工具函数模块
提供日志、环境配置加载、并行执行、计时等通用功能
"""

import os
import time
import logging
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from datetime import datetime
from typing import Any, Callable, Dict, Iterable, List, Optional

import colorlog
import psutil
from dotenv import load_dotenv


class Logger:
    """日志管理器"""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super(Logger, cls).__new__(cls)
            cls._instance._initialized = False
        return cls._instance

    def __init__(self):
        if self._initialized:
            return
        self._initialized = True
        self.logger = None

    def setup(self, log_level: str = "INFO", log_file: Optional[str] = None):
        """
        设置日志

        Args:
            log_level: 级别名，未知名称按 INFO 处理
            log_file: 日志文件，None 时只输出到控制台
        """
        level = logging.getLevelName(str(log_level).upper())
        if not isinstance(level, int):
            level = logging.INFO
        self.logger = logging.getLogger("RayIPDG")
        self.logger.setLevel(level)
        self.logger.handlers.clear()

        console_handler = logging.StreamHandler()
        console_handler.setLevel(level)

        color_formatter = colorlog.ColoredFormatter(
            '%(log_color)s[%(asctime)s] [%(levelname)s]%(reset)s %(message)s',
            datefmt='%Y-%m-%d %H:%M:%S',
            log_colors={
                'DEBUG': 'cyan',
                'INFO': 'green',
                'WARNING': 'yellow',
                'ERROR': 'red',
                'CRITICAL': 'red,bg_white',
            }
        )
        console_handler.setFormatter(color_formatter)
        self.logger.addHandler(console_handler)

        if log_file:
            directory = os.path.dirname(log_file)
            if directory:
                os.makedirs(directory, exist_ok=True)
            file_handler = logging.FileHandler(log_file, encoding='utf-8')
            file_handler.setLevel(level)
            file_formatter = logging.Formatter(
                '[%(asctime)s] [%(levelname)s] %(message)s',
                datefmt='%Y-%m-%d %H:%M:%S'
            )
            file_handler.setFormatter(file_formatter)
            self.logger.addHandler(file_handler)

    def get_logger(self):
        """获取logger实例"""
        if self.logger is None:
            self.setup()
        return self.logger


def load_env(env_path: Optional[str] = None) -> bool:
    """
    加载 .env 环境变量文件

    Args:
        env_path: .env 文件路径，默认依次尝试当前目录、项目根目录、安装目录

    Returns:
        是否加载成功
    """
    if env_path is None:
        possible_paths = [
            ".env",
            os.path.join(os.path.dirname(os.path.dirname(__file__)), ".env"),
        ]
        install_path = os.getenv("RAYIPDG_INSTALL_PATH")
        if install_path:
            possible_paths.append(os.path.join(install_path, ".env"))

        for path in possible_paths:
            if os.path.exists(path):
                env_path = path
                break

    if env_path and os.path.exists(env_path):
        load_dotenv(env_path)
        return True
    return False


def default_workers() -> int:
    """物理核数（取不到时退回逻辑核数）"""
    count = psutil.cpu_count(logical=False) or psutil.cpu_count() or 1
    return max(1, int(count))


def get_config() -> Dict[str, Any]:
    """
    从环境变量加载运行环境配置

    求解参数不在这里，见 modules/config.py 的 PipelineConfig

    Returns:
        配置字典
    """
    load_env()

    def get_env(key: str, default=None):
        return os.getenv(key) or default

    def get_env_int(key: str, default=0) -> int:
        try:
            return int(os.getenv(key) or default)
        except (TypeError, ValueError):
            return default

    install_path = get_env('RAYIPDG_INSTALL_PATH', os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

    return {
        'base': {
            'install_path': install_path,
            'log_level': get_env('RAYIPDG_LOG_LEVEL', 'INFO').upper(),
            'log_file': get_env('RAYIPDG_LOG_FILE', ''),
            'output_dir': get_env('RAYIPDG_OUTPUT_DIR', os.path.join(install_path, 'runs')),
        },
        'runtime': {
            'workers': get_env_int('RAYIPDG_WORKERS', default_workers()),
        },
    }


def format_datetime(date_obj: datetime = None) -> str:
    """
    格式化日期时间为ISO格式

    Args:
        date_obj: datetime对象，默认为当前时间

    Returns:
        格式化的日期时间字符串
    """
    if date_obj is None:
        date_obj = datetime.now()
    return date_obj.strftime("%Y-%m-%dT%H:%M:%SZ")


def memory_usage_mb() -> float:
    """当前进程常驻内存（MB）"""
    return psutil.Process(os.getpid()).memory_info().rss / (1024.0 * 1024.0)


def chunk_ranges(total: int, chunk_size: int) -> List[range]:
    """
    把 [0, total) 切成固定大小的块

    块的划分与 worker 数无关，保证结果按块顺序合并后逐位一致
    """
    chunk_size = max(1, int(chunk_size))
    return [range(start, min(start + chunk_size, total)) for start in range(0, total, chunk_size)]


def parallel_map(func: Callable, items: Iterable, workers: int = 1) -> List:
    """
    按输入顺序返回结果的并行 map

    Args:
        func: 作用于每个元素的函数
        items: 输入序列
        workers: 线程数，<=1 时串行执行

    Returns:
        结果列表（顺序与输入一致）
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(func, items))


@contextmanager
def stage_timer(timings: Dict[str, float], name: str):
    """记录一个阶段的耗时（秒）"""
    logger = Logger().get_logger()
    start = time.perf_counter()
    logger.debug(f"阶段开始: {name}")
    try:
        yield
    finally:
        elapsed = time.perf_counter() - start
        timings[name] = timings.get(name, 0.0) + elapsed
        logger.debug(f"阶段结束: {name} ({elapsed:.3f}s)")
