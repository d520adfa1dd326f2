import argparse
import json
import os
import sys
import time
from typing import Dict, List, Optional

import requests
import uvicorn
import yaml
from pydantic import BaseModel, ValidationError

from cost_model import (
    TABLE2_EPSILONS, breakeven_epsilon, cost_curve, cost_table, epsilon_grid, validate_epsilon_grid,
)
from errors import CrowdGaugeError, DegenerateCostModel, InfeasibleScenario, InvalidEpsilonGrid
from estimation import utility_privacy_rows
from logger import set_level, setup_logger
from models.cost import CostParams
from owners import HttpBinding, RespondSettings, run_respondents
from reports import (
    COST_CURVE_HEADER, TABLE1_HEADER, TABLE2_HEADER, format_aligned, safe_replace, table1_rows,
    write_cost_curve, write_simulation, write_table1, write_table2,
)
from service import EpochCloser, ServeSettings, build_aggregator, create_app
from simulator import check_feasible, load_scenario, run_simulation
from utils.random_source import MAX_SEED

logger = setup_logger()

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

class UsageError(CrowdGaugeError):
    """Bad flags or configuration: exit code 2."""


class CliConfig(BaseModel):
    subcommand: str
    config_path: str = "config.yaml"
    output_dir: str = "out"
    seed_override: Optional[int] = None
    runs_override: Optional[int] = None
    listen_address: Optional[str] = None
    server_address: Optional[str] = None


def load_config(path: str = "config.yaml") -> Dict:
    if not os.path.exists(path):
        raise UsageError(f"Config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise UsageError(f"Config file {path} must hold a mapping")
    return data


def parse_address(value: str):
    host, sep, port = (value or "").rpartition(":")
    if not sep or not host or not port.isdigit():
        raise UsageError(f"Expected host:port, got {value!r}")
    return host, int(port)


def _u64(value: str) -> int:
    try:
        seed = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {value}")
    if not 0 <= seed <= MAX_SEED:
        raise argparse.ArgumentTypeError(f"seed must be a 64-bit unsigned integer: {value}")
    return seed


def _positive(value: str) -> int:
    try:
        n = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {value}")
    if n < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1: {value}")
    return n


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crowd-gauge",
        description="Private crowd-level estimation: tables, cost curves, simulation, aggregator service.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def add(name: str, help_text: str, default_config: str = "config.yaml", out: bool = True):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", dest="config_path", default=default_config)
        if out:
            p.add_argument("--out", dest="output_dir", default="out")
        p.add_argument("--seed", dest="seed_override", type=_u64)
        return p

    tables = add("tables", "Utility/privacy table and cost-vs-epsilon table")
    tables.add_argument("--runs", dest="runs_override", type=_positive)
    add("cost-curve", "Private vs non-private cost over an epsilon grid")
    simulate = add("simulate", "Campus simulation through the protocol")
    simulate.add_argument("--server", dest="server_address")
    serve = add("serve", "Run the aggregator HTTP service", out=False)
    serve.add_argument("--listen", dest="listen_address")
    respond = add("respond", "Simulated data owners answering a running service", out=False)
    respond.add_argument("--server", dest="server_address")
    return parser


def _seed(cli: CliConfig, section: Dict, default: int = 0) -> int:
    return cli.seed_override if cli.seed_override is not None else int(section.get("seed", default))


def cmd_tables(cli: CliConfig) -> int:
    section = load_config(cli.config_path).get("tables", {}) or {}
    runs = cli.runs_override or int(section.get("runs", 100))
    rows = utility_privacy_rows(
        n=int(section.get("n", 1000)),
        true_yes=int(section.get("true_yes", 800)),
        runs=runs,
        seed=_seed(cli, section),
        workers=int(section.get("workers", 1)),
    )
    costs = cost_table(TABLE2_EPSILONS, CostParams())
    write_table1(rows, cli.output_dir)
    write_table2(costs, cli.output_dir)

    print(f"Relative error and privacy level ({runs} runs per pair)")
    print(format_aligned(TABLE1_HEADER, table1_rows(rows)))
    print()
    print("Private cost by epsilon (E=30, N=5000)")
    print(format_aligned(TABLE2_HEADER, [[eps, round(cost)] for eps, cost in costs]))
    return EXIT_OK


def _epsilons(section: Dict) -> List[float]:
    if "epsilons" in section:
        return validate_epsilon_grid(section.get("epsilons") or [])
    grid = section.get("grid")
    if not grid:
        raise InvalidEpsilonGrid("cost_curve needs 'epsilons' or 'grid'")
    return epsilon_grid(float(grid["start"]), float(grid["stop"]), float(grid["step"]))


def cmd_cost_curve(cli: CliConfig) -> int:
    section = load_config(cli.config_path).get("cost_curve", {}) or {}
    params = CostParams(**(section.get("cost_params") or {}))
    points = cost_curve(_epsilons(section), params)
    try:
        breakeven = breakeven_epsilon(params)
    except DegenerateCostModel as e:
        logger.warning(f"No breakeven: {e}")
        breakeven = None
    path = write_cost_curve(points, breakeven, cli.output_dir)

    print(f"breakeven_epsilon={breakeven if breakeven is None else round(breakeven, 4)}")
    print(format_aligned(COST_CURVE_HEADER, [
        [p.epsilon, round(p.private_cost), round(p.nonprivate_cost), p.participation_favored] for p in points
    ]))
    logger.info(f"DONE: cost_curve=\"{path}\" points={len(points)}")
    return EXIT_OK


def _scenario_path(cli: CliConfig) -> str:
    data = load_config(cli.config_path)
    if "simulate" in data:
        return (data.get("simulate") or {}).get("scenario", "scenarios/campus.json")
    return cli.config_path


def cmd_simulate(cli: CliConfig) -> int:
    scenario = load_scenario(_scenario_path(cli))
    if cli.seed_override is not None:
        scenario = check_feasible(scenario.model_copy(update={"seed": cli.seed_override}))

    binding_factory = None
    if cli.server_address:
        host, port = parse_address(cli.server_address)
        # the service needs the study analyst key (serve.seeded_analysts with the scenario seed),
        # auto_close off, grace_epochs 0 and virtual_time on: the simulation drives virtual time
        binding_factory = lambda keyring: HttpBinding(f"http://{host}:{port}")

    start = time.time()
    report = run_simulation(scenario, binding_factory=binding_factory)
    csv_path, json_path = write_simulation(report, cli.output_dir)
    logger.info(f"DONE: report=\"{csv_path}\" summary=\"{json_path}\" time={int(time.time() - start)}s")
    print(json.dumps({
        "coverage_fraction": report.coverage_fraction,
        "cost_comparison": report.cost_comparison.model_dump(mode="json"),
    }, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_serve(cli: CliConfig) -> int:
    section = load_config(cli.config_path).get("serve", {}) or {}
    settings = ServeSettings(**section)
    if cli.seed_override is not None:
        settings = settings.model_copy(update={"seed": cli.seed_override})
    host, port = parse_address(cli.listen_address or settings.listen)

    aggregator = build_aggregator(settings, now=int(time.time()))
    app = create_app(aggregator, virtual_time=settings.virtual_time)
    closer = EpochCloser(aggregator) if settings.auto_close else None
    if closer:
        closer.start()

    logger.info(f"Starting aggregator on {host}:{port} (grace={settings.grace_epochs} epochs, "
                f"virtual_time={settings.virtual_time})")
    exit_code = EXIT_OK
    try:
        uvicorn.run(app, host=host, port=port, log_level="warning")
    except SystemExit as e:
        # uvicorn exits this way when it cannot bind
        logger.error(f"Service stopped: exit {e.code}")
        exit_code = EXIT_RUNTIME
    finally:
        if closer:
            closer.stop()
        if settings.snapshot_path:
            safe_replace(settings.snapshot_path, json.dumps(aggregator.snapshot(), indent=2, sort_keys=True))
    logger.info("Stopping...")
    return exit_code


def cmd_respond(cli: CliConfig) -> int:
    section = dict(load_config(cli.config_path).get("respond", {}) or {})
    configured_server = section.pop("server", None)
    server = cli.server_address or configured_server
    host, port = parse_address(server)
    settings = RespondSettings(**section)
    if cli.seed_override is not None:
        settings = settings.model_copy(update={"seed": cli.seed_override})

    try:
        summary = run_respondents(HttpBinding(f"http://{host}:{port}"), settings)
    except requests.RequestException as e:
        logger.error(f"Server {host}:{port} unreachable: {e}")
        return EXIT_RUNTIME

    print(summary.model_dump_json(indent=2))
    if summary.unexpected_errors:
        for error in summary.unexpected_errors[:10]:
            logger.error(f"Unexpected rejection: {error}")
        return EXIT_RUNTIME
    return EXIT_OK


def _apply_logging(cli: CliConfig) -> None:
    if not os.path.exists(cli.config_path):
        return
    level = (load_config(cli.config_path).get("logging") or {}).get("level")
    if level:
        set_level(level)


COMMANDS = {
    "tables": cmd_tables,
    "cost-curve": cmd_cost_curve,
    "simulate": cmd_simulate,
    "serve": cmd_serve,
    "respond": cmd_respond,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK

    cli = CliConfig(**{k: v for k, v in vars(args).items() if v is not None})
    try:
        _apply_logging(cli)
        return COMMANDS[cli.subcommand](cli)
    except (UsageError, InvalidEpsilonGrid, InfeasibleScenario, ValidationError, ValueError) as e:
        logger.error(f"Usage/config error: {e}")
        return EXIT_USAGE
    except (OSError, CrowdGaugeError) as e:
        logger.error(f"FAILED {cli.subcommand}: {e}")
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        logger.info("Stopping...")
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
