#!/usr/bin/env python3
"""
Ray IPDG - 深度射线 IPDG 高频 Helmholtz 求解器主程序
"""

import os
import sys
import json
import argparse
from typing import List, Optional

# 添加模块路径
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from modules import (
    Logger, get_config, exit_code_for, RayIPDGError, ConfigError, UsageError,
    PipelineConfig, load_config, dump_config, apply_overrides, preset,
    build_problem, standard_ipdg_solve, ray_ipdg_solve, run_pipeline, write_artifacts, RunReport,
    load_directions, save_directions, save_weights, l2_relative_error,
)
from modules.config import preset_names, save_config
from modules.fields import ClampedSpeed
from modules.pipeline import obtain_network, plot_grid, train_network, write_field_dump, write_plot_csv
from modules.ray_learning import DirectionExtractor, save_samples, generate_samples


class CliArgumentParser(argparse.ArgumentParser):
    """用法错误抛出 UsageError，由 parse_and_run 映射为退出码 1"""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


class RayIPDGRunner:
    """Ray IPDG 主控制器"""

    def __init__(self, workers: Optional[int] = None):
        """
        初始化

        运行环境配置从环境变量（.env 文件）读取
        """
        self.env = get_config()
        logger_instance = Logger()
        logger_instance.setup(
            log_level=self.env['base']['log_level'],
            log_file=self.env['base']['log_file'] or None,
        )
        self.logger = logger_instance.get_logger()
        self.workers = workers or self.env['runtime']['workers']

    # ------------------------------------------------------------------
    def resolve_config(self, args) -> PipelineConfig:
        """预设 → 配置文件 → 命令行参数 → --set 覆盖"""
        cfg = preset(args.preset) if args.preset else preset('example1')
        if args.config:
            cfg = load_config(args.config, cfg)
        overrides = []
        if args.backend:
            overrides.append(f"nn.backend={args.backend}")
        if args.weights:
            overrides.append(f"nn.weights={args.weights}")
        if args.seed is not None:
            overrides.append(f"problem.seed={args.seed}")
        return apply_overrides(cfg, overrides + list(args.set or []))

    def output_dir(self, args, cfg: PipelineConfig) -> str:
        out = args.out or os.path.join(self.env['base']['output_dir'], cfg.problem.name)
        os.makedirs(out, exist_ok=True)
        save_config(os.path.join(out, 'config.conf'), cfg)
        return out

    def _banner(self, title: str):
        self.logger.info("=" * 60)
        self.logger.info(title)
        self.logger.info("=" * 60)

    # ------------------------------------------------------------------
    def cmd_train(self, args):
        """生成样本并训练网络，保存权重"""
        cfg = self.resolve_config(args)
        out = self.output_dir(args, cfg)
        self._banner(f"训练方向网络: {cfg.problem.name} (N={cfg.nn.max_directions}, n_f={cfg.mesh.fine_cells})")
        if args.samples_out:
            samples = generate_samples(cfg.problem.seed, cfg.nn.samples, cfg.nn.max_directions, cfg.omega_tilde,
                                       cfg.delta_freq, cfg.H, cfg.mesh.fine_cells, cfg.problem.dim,
                                       cfg.nn.min_distinct)
            save_samples(args.samples_out, samples)
            self.logger.info(f"✅ 样本已保存: {args.samples_out}")
        net, history = train_network(cfg)
        weights = cfg.nn.weights or os.path.join(out, 'weights.hrnn')
        save_weights(weights, net)
        with open(os.path.join(out, 'training.json'), 'w', encoding='utf-8') as f:
            json.dump(history.to_dict(), f, indent=2)
        self.logger.info(f"✅ 训练完成，最优损失 {history.best[-1] if history.best else float('nan'):.4e}")

    def cmd_extract(self, args):
        """低频求解 + 方向提取，输出方向文件"""
        cfg = self.resolve_config(args)
        out = self.output_dir(args, cfg)
        self._banner(f"方向提取: {cfg.problem.name} (后端 {cfg.nn.backend})")
        problem = build_problem(cfg)
        net = obtain_network(cfg)[0] if cfg.nn.backend == 'nn' else None
        reduced = None
        if cfg.nn.backend != 'exact':
            reduced = standard_ipdg_solve(problem, problem.omega_tilde, workers=self.workers)
        extractor = DirectionExtractor(cfg.nn.backend, cfg.nn.max_directions, problem.ws, problem.omega_tilde,
                                       cfg.mesh.fine_cells, net=net, reference=problem.reference,
                                       svd_threshold=cfg.nn.svd_threshold, prune=cfg.nn.prune,
                                       oracle_resolution=cfg.nn.oracle_resolution, workers=self.workers)
        extraction = extractor.extract(problem.mesh, reduced.solution if reduced else None)
        path = os.path.join(out, 'directions.txt')
        save_directions(path, extraction.to_direction_set(problem.mesh, problem.ws))
        with open(os.path.join(out, 'extraction.json'), 'w', encoding='utf-8') as f:
            json.dump(extraction.summary(), f, indent=2, ensure_ascii=False)
        self.logger.info(f"✅ 方向文件: {path}")

    def cmd_solve_standard(self, args):
        """标准 IPDG 求解（默认在低频 ω̃）"""
        cfg = self.resolve_config(args)
        out = self.output_dir(args, cfg)
        problem = build_problem(cfg)
        omega = problem.omega if args.full_frequency else problem.omega_tilde
        self._banner(f"标准 IPDG: {cfg.problem.name} (ω={omega:.6g})")
        result = standard_ipdg_solve(problem, omega, args.refinement, workers=self.workers)
        metrics = {'residual': result.info.residual, 'l2_relative_error': None}
        reference = problem.reference_at(omega)
        if reference is not None:
            metrics['l2_relative_error'] = l2_relative_error(
                result.solution, reference.value, result.mesh,
                window=(problem.window_lower, problem.window_upper), omega=omega)
        self._write_solution(out, 'standard', problem, result.solution, omega, metrics,
                             {'standard': result.n_dof})

    def cmd_solve_ray(self, args):
        """射线 IPDG 求解（方向来自文件或 exact / oracle 后端）"""
        cfg = self.resolve_config(args)
        out = self.output_dir(args, cfg)
        problem = build_problem(cfg)
        self._banner(f"射线 IPDG: {cfg.problem.name} (ω={problem.omega:.6g})")
        if args.directions:
            speed = ClampedSpeed(problem.ws, problem.mesh.physical_lower, problem.mesh.physical_upper)
            directions = load_directions(args.directions, problem.mesh, speed)
        elif cfg.nn.backend in ('exact', 'oracle'):
            reduced = None
            if cfg.nn.backend == 'oracle':
                reduced = standard_ipdg_solve(problem, problem.omega_tilde, workers=self.workers)
            extractor = DirectionExtractor(cfg.nn.backend, cfg.nn.max_directions, problem.ws, problem.omega_tilde,
                                           cfg.mesh.fine_cells, reference=problem.reference,
                                           svd_threshold=cfg.nn.svd_threshold, prune=cfg.nn.prune,
                                           oracle_resolution=cfg.nn.oracle_resolution, workers=self.workers)
            extraction = extractor.extract(problem.mesh, reduced.solution if reduced else None)
            directions = extraction.to_direction_set(problem.mesh, problem.ws)
        else:
            raise UsageError("solve-ray 需要 --directions，或使用 --backend exact / oracle")
        result = ray_ipdg_solve(problem, directions, self.workers)
        metrics = {'residual': result.info.residual, 'condition': result.info.condition, 'l2_relative_error': None}
        if problem.reference is not None:
            metrics['l2_relative_error'] = l2_relative_error(
                result.solution, problem.reference.value, problem.mesh,
                window=(problem.window_lower, problem.window_upper), omega=problem.omega)
        save_directions(os.path.join(out, 'directions.txt'), directions)
        self._write_solution(out, 'solution', problem, result.solution, problem.omega, metrics,
                             {'ray': result.n_dof, 'ray_system': result.n_system})

    def _write_solution(self, out: str, name: str, problem, solution, omega: float, metrics, dofs):
        points, counts = plot_grid(problem)
        values = solution.evaluate(points)
        write_field_dump(os.path.join(out, f'{name}.hrfd'), counts, problem.window_lower, problem.window_upper,
                         omega, values)
        write_plot_csv(os.path.join(out, f'{name}.csv'), points, values)
        report = RunReport(name=problem.cfg.problem.name, metrics=metrics, dofs=dofs,
                           config=problem.cfg.to_dict())
        report.save(os.path.join(out, 'report.json'))
        for key, value in metrics.items():
            if value is not None:
                self.logger.info(f"  {key}: {value:.6g}")
        self.logger.info(f"✅ 结果已写入 {out}")

    def cmd_pipeline(self, args):
        """完整流程：低频求解 → 方向学习 → 高频求解"""
        cfg = self.resolve_config(args)
        out = self.output_dir(args, cfg)
        result = run_pipeline(cfg, workers=self.workers)
        write_artifacts(result, out)

    def cmd_report(self, args):
        """显示报告，可与另一份报告做确定性比较"""
        report = RunReport.load(args.report)
        self._banner(f"运行报告: {report.name}")
        for section in ('metrics', 'dofs', 'directions', 'timings'):
            values = getattr(report, section)
            if not values:
                continue
            self.logger.info(f"[{section}]")
            for key, value in values.items():
                self.logger.info(f"  {key}: {value}")
        if args.compare:
            other = RunReport.load(args.compare)
            if report.deterministic_dict() == other.deterministic_dict():
                self.logger.info(f"✅ 与 {args.compare} 一致（不含耗时）")
            else:
                differing = [k for k, v in report.deterministic_dict().items() if other.deterministic_dict().get(k) != v]
                raise RayIPDGError(f"报告不一致: {', '.join(differing)}")

    def cmd_dump_config(self, args):
        """输出合并后的配置"""
        print(dump_config(self.resolve_config(args)))


def build_parser() -> CliArgumentParser:
    parser = CliArgumentParser(
        prog='ray-ipdg',
        description='Ray IPDG - 深度射线 IPDG 高频 Helmholtz 求解器',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=f"内置预设: {', '.join(preset_names())}",
    )
    subparsers = parser.add_subparsers(dest='command', help='可用命令', parser_class=CliArgumentParser)

    common = CliArgumentParser(add_help=False)
    common.add_argument('--config', help='配置文件路径（[problem]/[mesh]/[nn]/[pml] 分节）')
    common.add_argument('--preset', help='内置算例预设，如 example1')
    common.add_argument('--backend', choices=['nn', 'oracle', 'exact'], help='方向后端')
    common.add_argument('--weights', help='网络权重文件')
    common.add_argument('--out', help='输出目录')
    common.add_argument('--seed', type=int, help='随机种子')
    common.add_argument('--workers', type=int, help='线程数（默认 RAYIPDG_WORKERS 或物理核数）')
    common.add_argument('--set', action='append', metavar='SECTION.KEY=VALUE', help='覆盖配置项，可重复')

    train_parser = subparsers.add_parser('train', parents=[common], help='生成样本并训练方向网络')
    train_parser.add_argument('--samples-out', help='同时保存训练样本到该文件')

    subparsers.add_parser('extract', parents=[common], help='低频求解并提取射线方向')

    standard_parser = subparsers.add_parser('solve-standard', parents=[common], help='标准 IPDG 求解')
    standard_parser.add_argument('--full-frequency', action='store_true', help='在 ω 而不是 ω̃ 上求解')
    standard_parser.add_argument('--refinement', type=int, help='每个粗单元每轴细分数')

    ray_parser = subparsers.add_parser('solve-ray', parents=[common], help='射线 IPDG 求解')
    ray_parser.add_argument('--directions', help='方向文件（每行 "单元 节点 d_1 ... d_d"）')

    subparsers.add_parser('pipeline', parents=[common], help='完整深度射线 IPDG 流程')

    report_parser = subparsers.add_parser('report', help='显示运行报告')
    report_parser.add_argument('report', help='report.json 路径')
    report_parser.add_argument('--compare', help='另一份 report.json，做确定性比较')

    subparsers.add_parser('dump-config', parents=[common], help='输出合并后的配置')
    return parser


COMMANDS = {
    'train': 'cmd_train',
    'extract': 'cmd_extract',
    'solve-standard': 'cmd_solve_standard',
    'solve-ray': 'cmd_solve_ray',
    'pipeline': 'cmd_pipeline',
    'report': 'cmd_report',
    'dump-config': 'cmd_dump_config',
}


def parse_and_run(argv: Optional[List[str]] = None) -> int:
    """
    解析命令行并执行

    Returns:
        退出码：0 成功，1 用法/配置错误，2 数值失败
    """
    parser = build_parser()
    logger = Logger().get_logger()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    except UsageError as e:
        logger.error(f"❌ {e}")
        parser.print_usage(sys.stderr)
        return exit_code_for(e)

    if not args.command:
        parser.print_help()
        return 1

    try:
        runner = RayIPDGRunner(getattr(args, 'workers', None))
        getattr(runner, COMMANDS[args.command])(args)
    except RayIPDGError as e:
        Logger().get_logger().error(f"❌ 执行命令失败: {e}")
        return exit_code_for(e)
    except Exception as e:
        Logger().get_logger().error(f"❌ 执行命令失败: {e}")
        return 1
    return 0


def main():
    sys.exit(parse_and_run(sys.argv[1:]))


if __name__ == '__main__':
    main()
