# markerforge/cli.py
"""
命令行入口
子命令: generate | match | losses | bench | report
退出码: 0 成功，1 参数/配置错误，2 数据错误，3 内部不变量被破坏
"""
import os
import sys
import logging
import argparse
from logging.handlers import RotatingFileHandler
from typing import Dict, List, Any, Optional

from .config_manager import ConfigManager
from .config_utils import VERSION, REPORT_FORMATS, save_settings
from .errors import (EXIT_OK, EXIT_USAGE, EXIT_INTERNAL, MarkerForgeError, ConfigError, DataError,
                     InvariantViolation)
from .monitoring import RunMonitor
from .utils import dumps_json, list_image_files, read_json

logger = logging.getLogger(__name__)

CONSOLE_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
FILE_FORMAT = '%(asctime)s %(levelname)s: %(message)s [in %(pathname)s:%(lineno)d]'
LOG_FILE_NAME = 'markerforge.log'


def setup_logging(level: str = 'INFO', log_dir: Optional[str] = None) -> None:
    """
    配置根日志：控制台输出到 stderr，指定目录时额外写入轮转日志文件

    Args:
        level: 日志级别
        log_dir: 日志目录，为空时不写文件
    """
    root = logging.getLogger()
    for handler in list(root.handlers):
        if getattr(handler, '_markerforge', False):
            root.removeHandler(handler)
            handler.close()

    console = logging.StreamHandler(sys.stderr)
    console.setFormatter(logging.Formatter(CONSOLE_FORMAT))
    console._markerforge = True
    root.addHandler(console)

    if log_dir:
        os.makedirs(log_dir, exist_ok=True)
        file_handler = RotatingFileHandler(os.path.join(log_dir, LOG_FILE_NAME),
                                           maxBytes=5 * 1024 * 1024, backupCount=5, encoding='utf-8')
        file_handler.setFormatter(logging.Formatter(FILE_FORMAT))
        file_handler._markerforge = True
        root.addHandler(file_handler)

    numeric = getattr(logging, str(level).upper(), None)
    if not isinstance(numeric, int):
        raise ConfigError(f"未知的日志级别: {level}")
    root.setLevel(numeric)


class _ArgumentParser(argparse.ArgumentParser):
    """参数错误统一使用退出码1"""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _existing_dir(path: Optional[str], label: str) -> Optional[str]:
    if path is not None and not os.path.isdir(path):
        raise ConfigError(f"{label}目录不存在: {path}")
    return path


def _existing_file(path: Optional[str], label: str) -> Optional[str]:
    if path is not None and not os.path.isfile(path):
        raise ConfigError(f"{label}文件不存在: {path}")
    return path


def _config_manager(args, **overrides) -> ConfigManager:
    overrides.setdefault('seed', getattr(args, 'seed', None))
    overrides.setdefault('workers', getattr(args, 'workers', None))
    config = ConfigManager(args.config, overrides)
    if args.dump_config:
        save_settings(config.get_settings(), args.dump_config)
        logger.info(f"已写出解析后的配置: {args.dump_config}")
    return config


def _print_json(data: Any) -> None:
    sys.stdout.write(dumps_json(data) + '\n')


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    """生成 FlyingMarkers 数据集或 DVL 替代基准"""
    config = _config_manager(args, sample_count=args.count)
    _existing_dir(args.markers, '标记图')
    _existing_dir(args.backgrounds, '背景图')
    workers = config.get_setting('workers')
    monitor = RunMonitor('generate')

    if args.dvl_standin:
        from .dvl_standin import StandinConfig, generate_standin
        standin = StandinConfig.from_settings(config.get_settings())
        with monitor.phase('standin'):
            entries = generate_standin(standin, args.out, args.markers, args.backgrounds, workers, monitor)
        _print_json({'records': len(entries), 'out': args.out})
    else:
        if not args.markers or not args.backgrounds:
            raise ConfigError("generate 需要 --markers 和 --backgrounds（或使用 --dvl-standin）")
        from .flyingmarkers import generate_dataset
        sampler = config.get_sampler_config()
        markers = list_image_files(args.markers)
        backgrounds = list_image_files(args.backgrounds)
        with monitor.phase('generate'):
            manifest = generate_dataset(sampler, markers, backgrounds, args.out, workers,
                                        config.get_setting('image_cache_size'), monitor)
        _print_json({'samples': manifest.sample_count, 'out': args.out})
    print(monitor.summary_line(), file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# match
# ---------------------------------------------------------------------------

def cmd_match(args) -> int:
    """运行单个估计器，写出光流文件或失败记录"""
    from .flow_io import read_flo, write_flo, write_failed_record
    from .imaging import load_image
    from .matcher import EstimatorContext, get_estimator

    config = _config_manager(args)
    estimator = get_estimator(args.method)
    gt_flow = None
    marker_path, ref_path = args.marker, args.ref
    if args.sample:
        _existing_dir(args.sample, '样本')
        marker_path = marker_path or os.path.join(args.sample, 'marker.png')
        ref_path = ref_path or os.path.join(args.sample, 'reference.png')
        gt_flow = read_flo(_existing_file(os.path.join(args.sample, 'flow.flo'), '真值光流'))
    if not marker_path or not ref_path:
        raise ConfigError("match 需要 --marker 和 --ref，或 --sample")
    _existing_file(marker_path, '标记图')
    _existing_file(ref_path, '参考图')
    _existing_dir(args.flow_dir, '光流')

    marker = load_image(marker_path)
    reference = load_image(ref_path)
    sample_id = os.path.splitext(os.path.basename(args.out))[0]
    ctx = EstimatorContext(sample_id=sample_id, gt_flow=gt_flow, flow_dir=args.flow_dir,
                           seed=config.get_setting('seed'), settings=config.get_matcher_settings())
    outcome = estimator(marker, reference, ctx)
    if outcome.failed:
        path = write_failed_record(args.out, outcome.reason)
        logger.info(f"估计器 {args.method} 失败: {outcome.reason}，已写出 {path}")
        _print_json({'outcome': 'failed', 'reason': outcome.reason, 'out': path})
    else:
        write_flo(args.out, outcome.flow)
        _print_json({'outcome': 'flow', 'valid_pixels': outcome.flow.valid_count,
                     'inliers': outcome.inliers, 'out': args.out})
    return EXIT_OK


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def load_pose_file(path: str):
    """
    读取位姿文件 {"K_a": [fx,fy,cx,cy], "K_b": [...], "R": 9个行优先元素, "t": 3个元素}

    Returns:
        FundamentalMatrix对象
    """
    from .geometry import CameraIntrinsics, RelativePose, fundamental_from_pose

    data = read_json(path)
    missing = [k for k in ('K_a', 'K_b', 'R', 't') if not isinstance(data, dict) or k not in data]
    if missing:
        raise DataError(f"位姿文件缺少字段 {missing}: {path}")
    if len(data['R']) != 9 or len(data['t']) != 3:
        raise DataError(f"位姿文件中 R 需要9个元素、t 需要3个元素: {path}")
    pose = RelativePose.from_raw(data['R'], data['t'])
    return fundamental_from_pose(CameraIntrinsics.from_list(data['K_a']),
                                 CameraIntrinsics.from_list(data['K_b']), pose)


def cmd_losses(args) -> int:
    """计算 L_Syn / L_SED / L_all，可选运行梯度校验"""
    from .flow_io import read_flo, write_loss_map
    from .geometry import GeometricTransform
    from .gradcheck import GradientChecker
    from .losses import l_all, l_sed, l_syn

    config = _config_manager(args, sed_weight=args.sed_weight, sed_clip=args.sed_clip)
    loss_settings = config.get_loss_settings()
    if not (args.transform or args.pose or args.gradcheck):
        raise ConfigError("losses 需要 --transform 和/或 --pose，或 --gradcheck")
    if (args.transform or args.pose) and not args.flow:
        raise ConfigError("计算损失需要 --flow")
    for path, label in ((args.flow, '光流'), (args.flow_real, '光流'), (args.transform, '变换'),
                        (args.pose, '位姿')):
        _existing_file(path, label)

    result: Dict[str, Any] = {}
    report = None
    if args.transform or args.pose:
        flow = read_flo(args.flow)
        t = GeometricTransform.from_dict(read_json(args.transform)) if args.transform else None
        f = load_pose_file(args.pose) if args.pose else None
        flow_real = read_flo(args.flow_real) if args.flow_real else flow
        if t is not None and f is not None:
            report = l_all(flow, t, flow_real, f, loss_settings['sed_weight'], loss_settings['sed_clip'])
            result['l_all'] = report.to_dict()
            syn = l_syn(flow, t)
            result['l_syn'] = syn.to_dict()
            report = syn
        elif t is not None:
            report = l_syn(flow, t)
            result['l_syn'] = report.to_dict()
        else:
            report = l_sed(flow_real, f, loss_settings['sed_clip'])
            result['l_sed'] = report.to_dict()
        if args.loss_map:
            write_loss_map(args.loss_map, report.per_pixel)
            logger.info(f"已写出逐像素损失图: {args.loss_map}")

    if args.gradcheck:
        checks = GradientChecker(seed=config.get_setting('seed')).run_all_checks()
        checks['max_abs_error'] = max(checks['l_syn']['max_abs_error'], checks['l_sed']['max_abs_error'])
        result['gradcheck'] = checks
        if not checks['passed']:
            _print_json(result)
            raise InvariantViolation(f"梯度校验未通过，最大绝对误差 {checks['max_abs_error']:.3e}")
    _print_json(result)
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench / report
# ---------------------------------------------------------------------------

def cmd_bench(args) -> int:
    """在基准清单或 FlyingMarkers 数据集上评估估计器"""
    from .benchmark import format_table, load_benchmark, run_benchmark, write_report

    config = _config_manager(args, report_format=args.report)
    if not os.path.exists(args.manifest):
        raise ConfigError(f"清单不存在: {args.manifest}")
    _existing_dir(args.flow_dir, '光流')
    if args.estimator == 'flow-dir' and not args.flow_dir:
        raise ConfigError("flow-dir 估计器需要 --flow-dir")
    entries = load_benchmark(args.manifest)
    monitor = RunMonitor('bench')
    with monitor.phase('evaluate'):
        report = run_benchmark(entries, args.estimator, config.get_metric_settings(),
                               workers=config.get_setting('workers'), seed=config.get_setting('seed'),
                               flow_dir=args.flow_dir, matcher_settings=config.get_matcher_settings(),
                               cache_size=config.get_setting('image_cache_size'), monitor=monitor)
    report_format = config.get_setting('report_format')
    write_report(report, args.out, report_format, charts=not args.no_charts)
    if report_format in ('table', 'all'):
        sys.stdout.write(format_table([report]))
    print(monitor.summary_line(), file=sys.stderr)
    return EXIT_OK


def cmd_report(args) -> int:
    """合并多个报告，输出对比表格与难度曲线"""
    from .benchmark import BenchmarkReport, format_table, write_report

    config = _config_manager(args, report_format=args.report)
    for path in args.reports:
        _existing_file(path, '报告')
    reports = [BenchmarkReport.load(path) for path in args.reports]
    names = [r.estimator for r in reports]
    if len(set(names)) != len(names):
        raise DataError(f"报告中的估计器名称重复: {names}")
    report_format = config.get_setting('report_format')
    write_report(reports, args.out, report_format, charts=not args.no_charts)
    if report_format in ('table', 'all'):
        sys.stdout.write(format_table(reports))
    return EXIT_OK


# ---------------------------------------------------------------------------
# 参数解析
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    """构建命令行解析器"""
    from .matcher import ESTIMATORS

    common = _ArgumentParser(add_help=False)
    common.add_argument('--config', default=None, help='YAML 配置文件')
    common.add_argument('--seed', type=int, default=None, help='随机种子（覆盖配置）')
    common.add_argument('--workers', type=int, default=None, help='线程数（覆盖配置）')
    common.add_argument('--verbose', action='store_true', help='输出调试日志')
    common.add_argument('--log-dir', default=None, help='日志文件目录')
    common.add_argument('--dump-config', default=None, help='把解析后的配置写入该 YAML 文件')

    parser = _ArgumentParser(prog='markerforge', description='标记图稠密对应的数据、损失与基准工具',
                             formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    parser.add_argument('--version', action='version', version=f'%(prog)s {VERSION}')
    sub = parser.add_subparsers(dest='command', metavar='COMMAND')
    sub.required = True
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser('generate', parents=[common], formatter_class=fmt, help='生成 FlyingMarkers 数据集')
    p.add_argument('--markers', default=None, help='标记图目录')
    p.add_argument('--backgrounds', default=None, help='背景图目录')
    p.add_argument('--count', type=int, default=None, help='样本数量（覆盖配置）')
    p.add_argument('--out', required=True, help='输出目录')
    p.add_argument('--dvl-standin', action='store_true', help='生成形变/视角/光照替代基准')
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser('match', parents=[common], formatter_class=fmt, help='运行估计器并写出光流')
    p.add_argument('--method', default='homography', choices=sorted(ESTIMATORS), help='估计器')
    p.add_argument('--marker', default=None, help='标记图')
    p.add_argument('--ref', default=None, help='参考图')
    p.add_argument('--sample', default=None, help='数据集样本目录（提供标记图、参考图与真值）')
    p.add_argument('--flow-dir', default=None, help='flow-dir 估计器读取的目录')
    p.add_argument('--out', required=True, help='输出光流文件 (.flo)')
    p.set_defaults(func=cmd_match)

    p = sub.add_parser('losses', parents=[common], formatter_class=fmt, help='计算训练损失')
    p.add_argument('--flow', default=None, help='预测光流 (.flo)')
    p.add_argument('--flow-real', default=None, help='真实图像对上的预测光流，默认与 --flow 相同')
    p.add_argument('--transform', default=None, help='真值变换 JSON')
    p.add_argument('--pose', default=None, help='位姿与内参 JSON')
    p.add_argument('--sed-weight', type=float, default=None, help='L_SED 权重（覆盖配置）')
    p.add_argument('--sed-clip', type=float, default=None, help='SED 逐像素截断（覆盖配置）')
    p.add_argument('--loss-map', default=None, help='逐像素损失图输出路径 (.tif)')
    p.add_argument('--gradcheck', action='store_true', help='运行有限差分梯度校验')
    p.set_defaults(func=cmd_losses)

    p = sub.add_parser('bench', parents=[common], formatter_class=fmt, help='运行基准测试')
    p.add_argument('--manifest', required=True, help='基准清单或数据集目录')
    p.add_argument('--estimator', default='homography', choices=sorted(ESTIMATORS), help='估计器')
    p.add_argument('--flow-dir', default=None, help='flow-dir 估计器读取的目录')
    p.add_argument('--report', default=None, choices=REPORT_FORMATS, help='报告格式（覆盖配置）')
    p.add_argument('--out', required=True, help='报告输出目录')
    p.add_argument('--no-charts', action='store_true', help='不输出 SVG 曲线')
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser('report', parents=[common], formatter_class=fmt, help='合并多个基准报告')
    p.add_argument('reports', nargs='+', help='report.json 文件')
    p.add_argument('--report', default=None, choices=REPORT_FORMATS, help='报告格式（覆盖配置）')
    p.add_argument('--out', required=True, help='输出目录')
    p.add_argument('--no-charts', action='store_true', help='不输出 SVG 曲线')
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """
    命令行主函数，库函数抛出的异常在这里转换为退出码

    Args:
        argv: 参数列表，默认为 sys.argv[1:]

    Returns:
        退出码
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        base = ConfigManager(args.config)
        level = 'DEBUG' if args.verbose else base.get_log_level()
        setup_logging(level, args.log_dir or base.get_setting('log_dir'))
        logger.debug(f"markerforge v{VERSION}: {args.command}")
        return args.func(args)
    except MarkerForgeError as e:
        logger.error(f"{args.command} 失败: {e}", exc_info=logger.isEnabledFor(logging.DEBUG))
        return e.exit_code
    except Exception as e:
        logger.error(f"{args.command} 发生内部错误: {e}", exc_info=True)
        return EXIT_INTERNAL
