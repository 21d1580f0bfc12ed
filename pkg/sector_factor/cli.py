"""命令行入口：fit / simulate / report"""
from datetime import date, datetime
from pathlib import Path
from typing import Dict, Optional, Sequence
import argparse
import logging
import os
import time

from . import config
from .data_pipeline import ON_MISSING_CHOICES, IngestOptions, load_dataset, load_sectors
from .diagnostics import COHERENCE_SCOPES, full_report, write_reports
from .em_engine import EMEngine, FitConfig
from .exceptions import DataFormatError, ModelValidationError, NumericalError, SectorFactorError
from .models import LoadingMask, Sector, build_mask
from .storage import RunManifest, load_model, save_model, write_trace
from .synthgen import SynthSpec, simulate, write_simulation_files

logger = logging.getLogger('sector_factor')

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


def _iso_date(text: str) -> date:
    try:
        return datetime.strptime(text, config.PIPELINE['date_format']).date()
    except ValueError:
        raise argparse.ArgumentTypeError(f'日期格式应为 YYYY-MM-DD: {text!r}')


def _factor_count(text: str) -> int:
    value = int(text)
    minimum = config.MODEL['n_sector_factors'] + 1
    if value < minimum:
        raise argparse.ArgumentTypeError(f'--m 必须 >= {minimum}: {value}')
    return value


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f'必须为正整数: {value}')
    return value


def _positive_float(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f'必须为正数: {value}')
    return value


def _threshold(text: str) -> float:
    value = float(text)
    if not 0 < value <= 1:
        raise argparse.ArgumentTypeError(f'阈值必须在 (0, 1] 内: {value}')
    return value


def _sector_counts(text: str) -> Dict[int, int]:
    """解析 '1:10,6:10,8:10' 形式的行业股票数"""
    counts = {}
    for item in filter(None, (part.strip() for part in text.split(','))):
        try:
            code, count = item.split(':')
            sector = Sector.parse(code)
            count = int(count)
        except ValueError:
            raise argparse.ArgumentTypeError(f'行业股票数格式应为 CODE:COUNT: {item!r}')
        if sector is Sector.UNCLASSIFIED or count < 0:
            raise argparse.ArgumentTypeError(f'无效的行业股票数: {item!r}')
        counts[int(sector)] = count
    return counts


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='sector_factor',
        description='带行业结构约束的高斯因子模型（EM 拟合、合成数据与可解释性报告）',
    )
    parser.add_argument('--log-level', default=None, help='日志级别（默认 INFO，可由环境变量覆盖）')
    sub = parser.add_subparsers(dest='command', required=True)

    fit = sub.add_parser('fit', help='用 EM 拟合因子模型')
    fit.add_argument('prices', type=Path, help='价格 CSV（date,SYM1,SYM2,...）')
    fit.add_argument('sectors', type=Path, help='行业 CSV（symbol,sector_code）')
    fit.add_argument('--out', type=Path, default=Path('fit_output'), help='输出目录')
    fit.add_argument('--m', type=_factor_count, default=config.MODEL['default_m'], help='因子总数（>= 12）')
    fit.add_argument('--iters', type=_positive_int, default=config.EM['max_iterations'], help='EM 迭代次数')
    fit.add_argument('--tol', type=_positive_float, default=config.EM['rel_tol'], help='相对变化提前停止阈值')
    fit.add_argument('--seed', type=int, default=config.EM['seed'], help='初始化随机种子')
    fit.add_argument('--init-scale', type=_positive_float, default=config.EM['init_scale'], help='载荷初始化扰动的标准差')
    fit.add_argument('--standard', action='store_true', help='拟合无行业约束的标准因子模型')
    fit.add_argument('--on-missing', choices=ON_MISSING_CHOICES, default=config.PIPELINE['on_missing'])
    fit.add_argument('--demean', choices=('on', 'off'), default='on' if config.PIPELINE['demean'] else 'off')
    fit.add_argument('--drop-unclassified', action='store_true', help='剔除无行业分类的股票')
    fit.add_argument('--start', type=_iso_date, default=None, help='起始日期（含）')
    fit.add_argument('--end', type=_iso_date, default=None, help='结束日期（含）')
    fit.set_defaults(handler=cmd_fit)

    synth = sub.add_parser('simulate', help='生成合成价格与行业文件')
    synth.add_argument('--out', type=Path, default=Path('simulated'), help='输出目录')
    synth.add_argument('--seed', type=int, default=config.SYNTH['seed'])
    synth.add_argument('--m', type=_factor_count, default=config.SYNTH['m'])
    synth.add_argument('--p', type=int, default=config.SYNTH['p'], help='交易日数')
    synth.add_argument('--sector-counts', type=_sector_counts, default={1: 10, 6: 10, 8: 10},
                       help="各行业股票数，如 '1:10,6:10,8:10'")
    synth.add_argument('--n-unclassified', type=int, default=0)
    synth.add_argument('--sector-loading-range', type=_positive_float, nargs=2,
                       default=config.SYNTH['sector_loading_range'], metavar=('LO', 'HI'))
    synth.add_argument('--market-scale', type=_positive_float, default=config.SYNTH['market_loading_scale'])
    synth.add_argument('--psi-range', type=_positive_float, nargs=2,
                       default=config.SYNTH['psi_range'], metavar=('LO', 'HI'))
    synth.add_argument('--incoherent', action='store_true', help='行业载荷符号逐只随机')
    synth.add_argument('--start-price', type=_positive_float, default=config.SYNTH['start_price'])
    synth.set_defaults(handler=cmd_simulate)

    report = sub.add_parser('report', help='生成因子可解释性报告')
    report.add_argument('model', type=Path, help='模型 JSON')
    report.add_argument('sectors', type=Path, help='行业 CSV')
    report.add_argument('--out', type=Path, default=Path('report_output'), help='输出目录')
    report.add_argument('--threshold', type=_threshold, default=config.REPORT['threshold'])
    report.add_argument('--coherence-scope', choices=COHERENCE_SCOPES, default=config.REPORT['coherence_scope'])
    report.set_defaults(handler=cmd_report)
    return parser


def configure_logging(level: Optional[str] = None):
    """配置日志：命令行参数 > 环境变量 > 默认值"""
    level = level or os.environ.get(config.RUNTIME['log_level_env']) or config.RUNTIME['log_level']
    if not isinstance(logging.getLevelName(level.upper()), int):
        raise ModelValidationError(f'无效的日志级别: {level!r}')
    logging.basicConfig(level=level.upper(), format=config.RUNTIME['log_format'])


def _flags(args: argparse.Namespace) -> Dict:
    """参数回显（可 JSON 序列化）"""
    flags = {}
    for key, value in sorted(vars(args).items()):
        if key == 'handler':
            continue
        if isinstance(value, (Path, date)):
            value = str(value)
        elif isinstance(value, tuple):
            value = list(value)
        elif isinstance(value, dict):
            value = {str(k): v for k, v in value.items()}
        flags[key] = value
    return flags


def cmd_fit(args: argparse.Namespace) -> int:
    """读取数据、拟合模型，写出模型、轨迹与清单"""
    started = time.perf_counter()
    options = IngestOptions(on_missing=args.on_missing, start_date=args.start, end_date=args.end)
    panel, sectors, ingest = load_dataset(
        args.prices, args.sectors, options,
        demean_returns=args.demean == 'on',
        exclude_unclassified=args.drop_unclassified,
    )
    if args.standard:
        mask = LoadingMask.full(panel.n, args.m)
    else:
        mask = build_mask(sectors, panel.stock_ids, args.m)

    fit_config = FitConfig(
        max_iterations=args.iters,
        rel_tol=args.tol,
        seed=args.seed,
        init_scale=args.init_scale,
    )
    model, trace = EMEngine(fit_config).fit(panel, mask)

    out_dir = args.out
    out_dir.mkdir(parents=True, exist_ok=True)
    model_path = save_model(model, out_dir / config.RUNTIME['model_filename'])
    trace_path = write_trace(trace, out_dir / config.RUNTIME['trace_filename'])

    manifest = RunManifest(
        command='fit',
        flags=dict(_flags(args), fit_config=fit_config.to_dict()),
        seed=args.seed,
        final_loglik=trace.final_loglik,
        final_expected_loglik_q=trace.q_per_iter[-1] if trace.q_per_iter else None,
        iterations_run=trace.iterations_run,
        converged_by_tol=trace.converged_by_tol,
        ingest=ingest.to_dict(),
        outputs=[model_path.name, trace_path.name],
    )
    manifest.add_input(args.prices)
    manifest.add_input(args.sectors)
    manifest.duration_seconds = time.perf_counter() - started
    manifest.save(out_dir / config.RUNTIME['manifest_filename'])
    logger.info(f'拟合完成，输出目录: {out_dir}')
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    """生成合成模型与数据文件"""
    started = time.perf_counter()
    spec = SynthSpec.with_sectors(
        args.sector_counts,
        n_unclassified=args.n_unclassified,
        m=args.m,
        p=args.p,
        sector_loading_range=tuple(args.sector_loading_range),
        market_loading_scale=args.market_scale,
        psi_range=tuple(args.psi_range),
        sector_sign_coherent=not args.incoherent,
        seed=args.seed,
    )
    model, panel, sectors = simulate(spec)
    price_path, sector_path = write_simulation_files(panel, sectors, args.out, start_price=args.start_price)
    truth_path = save_model(model, args.out / config.RUNTIME['truth_filename'])

    manifest = RunManifest(
        command='simulate',
        flags=dict(_flags(args), spec=spec.to_dict()),
        seed=args.seed,
        outputs=[price_path.name, sector_path.name, truth_path.name],
    )
    manifest.duration_seconds = time.perf_counter() - started
    manifest.save(args.out / config.RUNTIME['manifest_filename'])
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    """对模型文件生成 JSON / 文本报告与绘图数据"""
    started = time.perf_counter()
    model = load_model(args.model)
    if model.stock_ids is None:
        raise DataFormatError('模型文件缺少 stock_ids，无法生成报告')
    sectors, ingest = load_sectors(args.sectors, model.stock_ids)
    reports = full_report(model, sectors, threshold=args.threshold, scope=args.coherence_scope)
    written = write_reports(reports, model, sectors, args.out, args.threshold)

    manifest = RunManifest(
        command='report',
        flags=_flags(args),
        ingest=ingest.to_dict(),
        outputs=[str(p.relative_to(args.out)) for p in written],
    )
    manifest.add_input(args.model)
    manifest.add_input(args.sectors)
    manifest.duration_seconds = time.perf_counter() - started
    manifest.save(args.out / config.RUNTIME['manifest_filename'])
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    """主程序入口，返回退出码"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE

    try:
        configure_logging(args.log_level)
        return args.handler(args)
    except ModelValidationError as e:
        logger.error(f'参数无效: {e}')
        return EXIT_USAGE
    except DataFormatError as e:
        logger.error(f'数据错误: {e}')
        return EXIT_DATA
    except NumericalError as e:
        logger.error(f'数值计算失败: {e}')
        return EXIT_NUMERICAL
    except SectorFactorError as e:
        logger.error(f'运行失败: {e}')
        return EXIT_ERROR
    except Exception as e:
        logger.exception(f'未预期的错误: {e}')
        return EXIT_ERROR
