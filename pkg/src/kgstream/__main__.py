import getpass
import json
import logging
import os
import shutil
import sys
import time
from collections import Counter
from pathlib import Path

from rich.console import Console
from rich.table import Table

from . import bench
from .config import Config, load_config
from .errors import KGStreamError, PipelineError, ServiceError
from .executor import replay
from .formats import load_document, load_ntriples
from .gateway import CredentialStore
from .generator import generate, scale
from .graphs import (
    A,
    Fixture,
    build_all,
    build_transformation_graph,
    fixture_from_document,
    fixture_from_store,
    local_id,
    merge_fixtures,
    register_derived_stream,
)
from .kg import GraphStore
from .pipeline import field_domains, from_kg, load_pipeline_file, spec_to_dict, validate
from .server import load_store, rules_file, save_pipeline, save_store, serve
from .server_utils import Client, get_active_server


class UsageError(Exception):
    pass


def start_logging(logging_level: str | None = None):
    """Start logging to a file."""
    if logging_level is not None:
        level = logging.getLevelName(logging_level.upper())
        if not isinstance(level, int):
            raise UsageError(f"unknown log level {logging_level}")
        logging_level = level
    logging.basicConfig(
        filename="kgstream.log",
        level=logging.DEBUG if logging_level is None else logging_level,
        format="%(asctime)s - %(levelname)s - %(message)s",
        filemode="w+",
    )

    logging.debug("Created log file from __main__.py")


def get_arg(
    args: list[str], arg: str | tuple[str, ...], remove: bool = False, is_flag=False
) -> str | bool | None:
    """Get an argument from a list of command line arguments.

    Parameters
    ----------
    args : list[str]
        The list of command line arguments, split on spaces.
    arg : str | tuple[str, ...]
        The argument to search for. If a tuple, this should be a tuple of
        aliases for the argument. The first one found will be returned.
    remove : bool, optional
        Whether to remove the argument from the list, by default False
    is_flag : bool, optional
        Whether the argument is a flag (no value), by default False

    Returns
    -------
    str | bool | None
        The value of the argument, or True if it is a flag, or None if not found.

    Raises
    ------
    UsageError
        If the argument is given without a value.
    """
    if isinstance(arg, str):
        arg = (arg,)
    if is_flag:
        for a in arg:
            if a in args:
                if remove:
                    args.remove(a)
                return True
        return False
    for a in arg:
        if a in args:
            idx = args.index(a)
            if idx + 1 >= len(args):
                raise UsageError(f"{a} needs a value")
            value = args[idx + 1]
            if remove:
                args.pop(idx)
                args.pop(idx)
            return value
    for a in arg:
        for i, sys_a in enumerate(args):
            if "=" not in sys_a:
                continue
            name, _, value = sys_a.partition("=")
            if name == a:
                if remove:
                    args.pop(i)
                return value
    return None


def get_all_args(args: list[str], arg: str | tuple[str, ...]) -> list[str]:
    """Every value of a repeatable argument, removing them from ``args``."""
    values = []
    while (value := get_arg(args, arg, remove=True)) is not None:
        values.append(value)
    return values


def get_int(args: list[str], arg: str | tuple[str, ...], default: int | None = None) -> int | None:
    value = get_arg(args, arg, remove=True)
    if value is None:
        return default
    try:
        return int(value)
    except ValueError:
        raise UsageError(f"{arg if isinstance(arg, str) else arg[0]} expects an integer, got {value}") from None


def get_list(args: list[str], arg: str | tuple[str, ...], default: list[str]) -> list[str]:
    value = get_arg(args, arg, remove=True)
    return default if value is None else [v.strip() for v in value.split(",") if v.strip()]


def no_more_args(args: list[str]) -> None:
    if args:
        raise UsageError(f"unexpected argument(s): {' '.join(args)}")


console = Console()
logging_files = ["kgstream.log"]


# -- sessions -----------------------------------------------------------------

def session_file(config: Config) -> Path:
    return config.data_dir / "session.json"


def server_client(config: Config, need_session: bool = True) -> Client:
    address = get_active_server()
    if address is None:
        raise ServiceError("no server is running; start one with `kgstream serve`")
    host, port = address
    token = None
    if need_session:
        path = session_file(config)
        if not path.is_file():
            raise ServiceError("not logged in; run `kgstream login --agent <id>` first")
        token = json.loads(path.read_text())["access"]["token_id"]
    return Client(port, host, token)


# -- commands -----------------------------------------------------------------

def class_counts(store: GraphStore) -> dict[str, int]:
    counts = Counter(local_id(t.object).rpartition("#")[2].rpartition("/")[2] for t in store.triples(None, A, None))
    return dict(sorted(counts.items()))


def cmd_load(args: list[str], config: Config) -> int:
    if not args:
        raise UsageError("load needs at least one file")
    store = load_store(config)
    before = Counter(class_counts(store))
    fixture = Fixture()
    inserted = 0
    for name in args:
        path = Path(name)
        if not path.is_file():
            raise UsageError(f"no such file: {name}")
        if path.suffix == ".nt":
            inserted += load_ntriples(store, path)
        else:
            fixture.extend(fixture_from_document(load_document(path)))
    # references may point at descriptors loaded by earlier runs
    for triples in build_all(merge_fixtures(fixture_from_store(store), fixture)).values():
        inserted += store.insert(triples)
    for spec in fixture.pipelines:
        register_derived_stream(spec, store)
        save_pipeline(spec, config)
    if fixture.credentials:
        CredentialStore(config.credentials_file).update(fixture.credentials)
    save_store(store, config)

    after = Counter(class_counts(store))
    table = Table(title=f"Loaded {len(args)} file(s), {inserted} new triple(s)")
    table.add_column("class")
    table.add_column("new", justify="right")
    table.add_column("total", justify="right")
    for cls, total in after.items():
        table.add_row(cls, str(total - before.get(cls, 0)), str(total))
    console.print(table)
    if fixture.credentials:
        console.print(f"{len(fixture.credentials)} credential(s) stored")
    logging.info(f"Loaded {args}: {inserted} triples inserted.")
    return 0


def cmd_materialize(args: list[str], config: Config) -> int:
    rules = get_arg(args, "--rules", remove=True)
    no_more_args(args)
    if rules is not None:
        if not Path(rules).is_file():
            raise UsageError(f"no such rules file: {rules}")
        config.data_dir.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(rules, rules_file(config))
    store = load_store(config)
    start_time = time.perf_counter_ns()
    counts = store.materialize()
    end_time = time.perf_counter_ns()
    save_store(store, config)
    table = Table(title=f"Materialized in {(end_time - start_time) / 1e6:.0f} ms")
    table.add_column("rule or property")
    table.add_column("inferred", justify="right")
    for name, count in counts.items():
        table.add_row(name, str(count))
    table.add_row("total", str(sum(counts.values())))
    console.print(table)
    return 0


def cmd_serve(args: list[str], config: Config) -> int:
    no_more_args(args)
    if get_active_server() is not None:
        raise ServiceError("a server is already running here")
    console.print(f"Serving from {config.data_dir} (stop with Ctrl+C)")
    serve(config)
    return 0


def cmd_pipeline(args: list[str], config: Config) -> int:
    if not args:
        raise UsageError("pipeline needs one of validate, deploy, run, stop")
    action = args.pop(0)
    if action == "validate":
        if len(args) != 1:
            raise UsageError("pipeline validate <file>")
        store = load_store(config)
        failed = 0
        for spec in load_pipeline_file(args[0]):
            report = validate(spec, field_domains(spec, store))
            if report.ok:
                console.print(f"{spec.id}: ok")
            else:
                failed += 1
                for violation in report.violations:
                    console.print(f"{spec.id}: {violation}")
        return 1 if failed else 0
    if action == "deploy":
        if len(args) != 1:
            raise UsageError("pipeline deploy <file>")
        specs = load_pipeline_file(args[0])
        if get_active_server() is not None:
            client = server_client(config)
            for spec in specs:
                console.print_json(json.dumps(client.request("pipeline", action="deploy", spec=spec_to_dict(spec))))
            return 0
        # no server: record the pipelines so the next `serve` starts them
        store = load_store(config)
        for spec in specs:
            report = validate(spec, field_domains(spec, store))
            if not report.ok:
                raise PipelineError(f"pipeline {spec.id} is invalid: " + "; ".join(str(v) for v in report.violations))
            store.insert(build_transformation_graph([spec]))
            register_derived_stream(spec, store)
            save_pipeline(spec, config)
            console.print(f"{spec.id}: recorded, starts with the next `kgstream serve`")
        save_store(store, config)
        return 0
    if action == "run":
        input_file = get_arg(args, "--input", remove=True)
        if len(args) != 1:
            raise UsageError("pipeline run <pipeline> [--input events.jsonl]")
        if input_file is None:
            client = server_client(config)
            console.print_json(json.dumps(client.request("pipeline", action="run", pipeline=args[0])))
            return 0
        spec = from_kg(args[0], load_store(config))
        with Path(input_file).open("r", encoding="utf-8") as f:
            events = [json.loads(line) for line in f if line.strip()]
        result = replay(spec, events, lateness=config.pipeline.lateness)
        for sink, outputs in result.outputs.items():
            for output in outputs:
                console.print_json(json.dumps({"sink": sink, "fields": output}, default=str))
        if result.dead_letters:
            console.print(f"{len(result.dead_letters)} event(s) dead-lettered")
        return 0
    if action == "stop":
        if len(args) != 1:
            raise UsageError("pipeline stop <pipeline>")
        console.print_json(json.dumps(server_client(config).request("pipeline", action="stop", pipeline=args[0])))
        return 0
    raise UsageError(f"unknown pipeline action {action}")


def cmd_monitor(args: list[str], config: Config) -> int:
    constraint = {}
    for key in ("Property", "Site", "Sensor"):
        values = get_all_args(args, f"--{key.lower()}")
        if values:
            constraint[key] = values
    limit = get_int(args, "--limit")
    no_more_args(args)
    if not constraint:
        raise UsageError("monitor needs --property, --site or --sensor")
    client = server_client(config)
    for response in client.monitor([constraint], limit):
        console.print_json(json.dumps(response["message"], default=str))
    return 0


def cmd_query(args: list[str], config: Config) -> int:
    document = {}
    for key in ("sensor", "from", "to", "agg", "bucket", "sort"):
        value = get_arg(args, f"--{key}", remove=True)
        if value is not None:
            document[key] = value
    where = get_all_args(args, "--where")
    if where:
        document["where"] = where
    limit = get_int(args, "--limit")
    if limit is not None:
        document["limit"] = limit
    no_more_args(args)
    if "sensor" not in document:
        raise UsageError("query needs --sensor")
    result = server_client(config).request("query", **document)
    table = Table(title=f"{len(result['rows'])} row(s) in {result['stats'].get('total_ms', 0):.1f} ms")
    for column in result["columns"] + ["source"]:
        table.add_column(column)
    for row, source in zip(result["rows"], result["provenance"]):
        table.add_row(*[str(row.get(c, "")) for c in result["columns"]], source)
    console.print(table)
    return 0


def cmd_bench(args: list[str], config: Config) -> int:
    if not args:
        raise UsageError("bench needs one of kg, queries, monitor, e2e, federation")
    suite = args.pop(0)
    seed = get_int(args, "--seed", 0)
    repetitions = get_int(args, "--repetitions", config.bench.repetitions)
    if suite == "kg":
        reports = [bench.run_kg_bench(get_list(args, "--scale", ["G1", "G2"]), seed)]
    elif suite == "queries":
        scales = get_list(args, "--scale", ["G1"])
        reports = [bench.run_query_suite(generate(scale(name, seed)), repetitions, seed) for name in scales]
    elif suite == "monitor":
        sensors = get_int(args, "--sensors", 10)
        reports = [bench.run_monitoring_bench(get_list(args, "--scale", ["G1"]), sensors, seed=seed)]
    elif suite == "e2e":
        rates = [float(r) for r in get_list(args, "--rate", ["100", "500", "1000"])]
        durations = [float(d) for d in get_list(args, "--duration", ["30"])]
        runs = get_int(args, "--runs", repetitions)
        reports = bench.run_e2e_bench(
            rates, durations, runs, config.pipeline.bundle_size, config.pipeline.bundle_time, seed
        )
    elif suite == "federation":
        sizes = [int(s) for s in get_list(args, "--rows", ["3600", "36000", "360000"])]
        reports = [bench.run_federation_bench(sizes, repetitions, seed=seed)]
    else:
        raise UsageError(f"unknown bench suite {suite}")
    no_more_args(args)
    for report in reports:
        bench.render(report, console)
        path = bench.write_report(report, config.bench.results_dir)
        console.print(f"appended to {path}")
    return 0


def cmd_stats(args: list[str], config: Config) -> int:
    no_more_args(args)
    console.print_json(json.dumps(server_client(config).request("stats"), default=str))
    return 0


def cmd_login(args: list[str], config: Config) -> int:
    agent = get_arg(args, "--agent", remove=True)
    secret = get_arg(args, "--secret", remove=True)
    no_more_args(args)
    if agent is None:
        raise UsageError("login needs --agent")
    if secret is None:
        secret = os.environ.get("KGSTREAM_SECRET") or getpass.getpass(f"secret for {agent}: ")
    client = server_client(config, need_session=False)
    tokens = client.login(agent, secret)
    path = session_file(config)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(tokens, indent=4))
    console.print(f"logged in as {agent}; access token valid until {tokens['access']['expires']}")
    return 0


def cmd_publish(args: list[str], config: Config) -> int:
    source = get_arg(args, "--source", remove=True)
    if source is None or len(args) != 1:
        raise UsageError("publish --source <id> <messages.jsonl>")
    with Path(args[0]).open("r", encoding="utf-8") as f:
        messages = [line.strip() for line in f if line.strip()]
    console.print_json(json.dumps(server_client(config).request("publish", source=source, messages=messages)))
    return 0


commands = {
    "load": cmd_load,
    "materialize": cmd_materialize,
    "serve": cmd_serve,
    "pipeline": cmd_pipeline,
    "monitor": cmd_monitor,
    "query": cmd_query,
    "bench": cmd_bench,
    "stats": cmd_stats,
    "login": cmd_login,
    "publish": cmd_publish,
}

USAGE = f"usage: kgstream [--config FILE] [--log-level LEVEL] {{{','.join(commands)}}} ..."


def run(args: list[str]) -> int:
    """Run one command line; returns the exit status."""
    args = list(args)
    try:
        logging_level = get_arg(args, "--log-level", remove=True)
        config_path = get_arg(args, "--config", remove=True)
        # remove the log files if they exist
        for log_file in logging_files:
            try:
                Path(log_file).unlink()
            except FileNotFoundError:
                pass
        start_logging(logging_level)
        if not args or args[0] not in commands:
            raise UsageError(f"unknown command {args[0]}" if args else "no command given")
        command = args.pop(0)
        config = load_config(config_path)
        start_time = time.perf_counter_ns()
        status = commands[command](args, config)
        end_time = time.perf_counter_ns()
        logging.info(f"{command} took {(end_time - start_time) / 1e6:.0f} ms and returned {status}.")
        return status
    except UsageError as e:
        print(f"error: usage: {e}", file=sys.stderr)
        print(USAGE, file=sys.stderr)
        return 2
    except KGStreamError as e:
        logging.error(e.describe())
        print(f"error: {e.describe()}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as e:
        logging.exception(e)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


def main():
    """Main function for the command line interface."""
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
