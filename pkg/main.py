import argparse
import signal
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional

from core.config import ConfigError, Settings, parse_config
from core.harness.drivers import DRIVERS, run_driver
from core.utils.logger import attach_run_log, detach_run_log, get_logger, set_level

log = get_logger("🚀 main")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="smm-rad2d",
        description="Second moment method radiation transport studies on curved quadrilateral meshes",
    )
    parser.add_argument("driver", choices=sorted(DRIVERS), help="Study to run")
    parser.add_argument("--config", required=True, help="Run configuration file (key = value)")
    parser.add_argument("--out", help="Output directory (defaults to the config's output key, then SMM_OUTPUT_DIR)")
    parser.add_argument("--method", choices=["ip", "cg", "rt", "hrt"], help="Moment discretization")
    parser.add_argument("--fixup", choices=["on", "off"], help="Zero-and-scale fixup in the sweep")
    parser.add_argument("--anderson", type=int, metavar="N", help="Anderson space size (0 for Picard)")
    parser.add_argument(
        "--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"], type=str.upper, help="Overrides LOG_LEVEL"
    )
    return parser


def cli_overrides(args: argparse.Namespace) -> Dict[str, object]:
    overrides: Dict[str, object] = {"driver": args.driver}
    if args.method:
        overrides["method"] = args.method
    if args.fixup:
        overrides["fixup"] = args.fixup == "on"
    if args.anderson is not None:
        overrides["anderson_size"] = args.anderson
        overrides["outer_solver"] = "anderson" if args.anderson > 0 else "picard"
    if args.out:
        overrides["output"] = args.out
    return overrides


def shutdown(signum=None, frame=None):
    log.info("📴 Interrupted, stopping")
    detach_run_log()
    sys.exit(EXIT_FAILED)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        settings = Settings()
        set_level(args.log_level or settings.LOG_LEVEL)
        for key, value in settings.summary().items():
            log.debug(f"⚙️ {key}: {value}")
        config = parse_config(args.config, cli_overrides(args), settings.run_defaults())
    except ConfigError as e:
        print(f"smm-rad2d: configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    out_dir = Path(config.output)
    attach_run_log(out_dir)
    start = time.perf_counter()
    try:
        report = run_driver(config)
        report.write(out_dir)
    except ConfigError as e:
        print(f"smm-rad2d: configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:
        log.critical(f"🔥 Fatal error in {config.driver}: {e}", exc_info=True)
        return EXIT_FAILED
    finally:
        detach_run_log()

    elapsed = time.perf_counter() - start
    failed = [name for name, ok in report.checks.items() if not ok]
    if failed:
        log.error(f"❌ {len(failed)} check(s) failed after {elapsed:.1f}s: {', '.join(failed)}")
        return EXIT_FAILED
    log.info(f"✅ {config.driver} passed {len(report.checks)} checks in {elapsed:.1f}s")
    return EXIT_OK


if __name__ == "__main__":
    signal.signal(signal.SIGINT, shutdown)
    signal.signal(signal.SIGTERM, shutdown)
    sys.exit(main())
