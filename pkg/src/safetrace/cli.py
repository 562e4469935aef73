"""Command-line driver, one subcommand per pipeline stage.

    safetrace fixture smart_home --out work/fixture
    safetrace extract --policy work/fixture/policy.txt --schema work/fixture/schema.yaml \\
        --client replay --cassette work/fixture/cassette.json --out work/oracles
    safetrace fuzz --schema work/fixture/schema.yaml --oracles work/oracles/oracles.json \\
        --seeds 0-39 --lengths 4-10 --out work/traces
    safetrace genbench --schema work/fixture/schema.yaml --oracles work/oracles/oracles.json \\
        --traces work/traces --out work/bench
    safetrace candidates --bundle work/bench --kind ground_truth --out work/cands
    safetrace eval --bundle work/bench --candidates work/cands --out work/results
    safetrace report --results work/results work/other-results --out work/summary
    safetrace coverage --schema work/fixture/schema.yaml --traces work/traces

Every flag can also be given in a YAML file passed with ``--config``; values
from the file take precedence over the command line.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
from collections.abc import Sequence
from pathlib import Path

import yaml

from . import __version__
from .clients import ClientConfigError, HttpCompletionClient, ReplayClient
from .coverage import coverage_report
from .evaluator import (
    GROUP_KEYS,
    CandidateSolution,
    EvalOutcome,
    OutcomeClass,
    aggregate,
    evaluate_candidate,
    render_script,
)
from .fuzzer import (
    FuzzConfig,
    SearchExhausted,
    SignatureError,
    dump_trace_record,
    first_executable_trace,
    load_trace_file,
    synthesize_trace,
    trace_to_record,
)
from .ingest import extract_oracles
from .ltl import dump_oracles, load_oracles_file
from .scenarios import SCENARIOS, scenario_dir
from .schema import SchemaError, load_toolset_file
from .testgen import GenerationReport, Typology, cases_from_trace, read_bundle, write_bundle

EXIT_OK = 0
EXIT_FAILURES = 1
EXIT_USAGE = 2
EXIT_NOTHING = 3


class UsageError(Exception):
    """Bad flags, missing files or incomplete configuration (exit status 2)."""


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def _existing(path: str | None, what: str) -> Path:
    if not path:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {path}")
    return p


def parse_int_list(text: str | int | Sequence) -> list[int]:
    """``"0-3,7"`` -> ``[0, 1, 2, 3, 7]``. Lists and ints from a config file pass through."""
    if isinstance(text, int):
        return [text]
    if not isinstance(text, str):
        return [int(x) for x in text]
    out: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        lo, sep, hi = part.partition("-")
        try:
            if sep:
                out.extend(range(int(lo), int(hi) + 1))
            else:
                out.append(int(part))
        except ValueError:
            raise UsageError(f"not an integer list: {text!r}") from None
    if not out:
        raise UsageError(f"empty integer list: {text!r}")
    return out


def _typologies(text: str | Sequence[str]) -> list[Typology]:
    items = text.split(",") if isinstance(text, str) else list(text)
    try:
        return [Typology(t.strip()) for t in items if t.strip()]
    except ValueError:
        raise UsageError(f"typologies must be Goal and/or Workflow, got {text!r}") from None


def make_client(mode: str, cassette: str | None):
    if mode == "off":
        return None
    if mode == "replay":
        return ReplayClient(_existing(cassette, "--cassette"), mode="replay")
    if mode == "live":
        live = HttpCompletionClient.from_env()
        if cassette:
            return ReplayClient(cassette, mode="record", inner=live)
        return live
    raise UsageError(f"unknown client mode {mode!r}")


def _save_client(client) -> None:
    if isinstance(client, ReplayClient) and client.mode == "record":
        client.save()


def _write_manifest(out: Path, stage: str, files: Sequence[str], extra: dict | None = None) -> None:
    manifest = {"stage": stage, "tool_version": __version__, "files": sorted(files)}
    manifest.update(extra or {})
    (out / "manifest.json").write_text(_json(manifest), encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands


def cmd_fixture(args) -> int:
    if args.name not in SCENARIOS:
        raise UsageError(f"unknown scenario {args.name!r}; choose from {', '.join(SCENARIOS)}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for f in sorted(scenario_dir(args.name).iterdir()):
        if f.is_file():
            shutil.copyfile(f, out / f.name)
            files.append(f.name)
    print(f"copied {', '.join(files)} to {out}")
    return EXIT_OK


def cmd_extract(args) -> int:
    toolset = load_toolset_file(_existing(args.schema, "--schema"))
    policy = _existing(args.policy, "--policy").read_text(encoding="utf-8")
    if args.client == "off":
        raise UsageError("extraction needs a completion client: use --client replay or --client live")
    client = make_client(args.client, args.cassette)
    report = extract_oracles(policy, toolset, client, workers=args.workers)
    _save_client(client)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "oracles.json").write_text(dump_oracles(report.accepted), encoding="utf-8")
    (out / "extraction.json").write_text(_json(report.to_dict()), encoding="utf-8")
    (out / "review.txt").write_text(report.render(), encoding="utf-8")
    _write_manifest(out, "extract", ["oracles.json", "extraction.json", "review.txt"],
                    {"scenario": toolset.scenario_name, "client_mode": args.client,
                     "accepted": len(report.accepted)})
    sys.stdout.write(report.render())
    return EXIT_OK if report.accepted else EXIT_NOTHING


def _fuzz_configs(args) -> list[FuzzConfig]:
    seeds = parse_int_list(args.seeds)
    lengths = parse_int_list(args.lengths)
    # lengths cycle over the seeds, so every trace keeps a distinct seed
    return [FuzzConfig(target_length=lengths[i % len(lengths)], seed=s, max_backtracks=args.max_backtracks,
                       max_candidates_per_step=args.max_candidates, lookahead=args.lookahead)
            for i, s in enumerate(seeds)]


def cmd_fuzz(args) -> int:
    toolset = load_toolset_file(_existing(args.schema, "--schema"))
    oracles = load_oracles_file(_existing(args.oracles, "--oracles"))
    configs = _fuzz_configs(args)
    out = Path(args.out)
    (out / "traces").mkdir(parents=True, exist_ok=True)
    files, stats, exhausted = [], [], []
    for cfg in configs:
        name = f"{toolset.scenario_name}-{cfg.seed}.json"
        try:
            result = synthesize_trace(toolset, oracles, cfg)
        except SearchExhausted as exc:
            exhausted.append({"seed": cfg.seed, "target_length": cfg.target_length, "reason": exc.reason,
                              "nodes_explored": exc.stats.nodes_explored, "backtracks": exc.stats.backtracks})
            print(f"seed {cfg.seed} (length {cfg.target_length}): exhausted, {exc.reason}")
            continue
        (out / "traces" / name).write_text(dump_trace_record(trace_to_record(result, toolset.scenario_name)),
                                           encoding="utf-8")
        files.append(f"traces/{name}")
        stats.append({"seed": cfg.seed, "target_length": cfg.target_length,
                      "nodes_explored": result.stats.nodes_explored, "backtracks": result.stats.backtracks})
        print(f"seed {cfg.seed} (length {cfg.target_length}): {' '.join(result.trace.names)}")
    (out / "fuzz_stats.json").write_text(_json({"scenario": toolset.scenario_name, "produced": stats,
                                                "exhausted": exhausted}), encoding="utf-8")
    _write_manifest(out, "fuzz", files + ["fuzz_stats.json"],
                    {"scenario": toolset.scenario_name, "traces": len(files), "exhausted": len(exhausted)})
    print(f"{len(files)} traces written, {len(exhausted)} seeds exhausted")
    return EXIT_OK if files else EXIT_NOTHING


def _trace_files(path: Path) -> list[Path]:
    root = path / "traces" if (path / "traces").is_dir() else path
    return sorted(root.glob("*.json"), key=lambda p: p.name)


def cmd_genbench(args) -> int:
    toolset = load_toolset_file(_existing(args.schema, "--schema"))
    oracles = load_oracles_file(_existing(args.oracles, "--oracles"))
    traces_dir = _existing(args.traces, "--traces")
    typologies = _typologies(args.typologies)
    client = make_client(args.client, args.cassette)
    report = GenerationReport(toolset.scenario_name)
    stats_file = traces_dir / "fuzz_stats.json"
    if stats_file.exists():
        report.exhausted = json.loads(stats_file.read_text(encoding="utf-8")).get("exhausted", [])
    loaded = []
    for f in _trace_files(traces_dir):
        trace, rec = load_trace_file(f)
        loaded.append((rec["seed"], rec, trace))
    loaded.sort(key=lambda item: item[0])
    report.requested = len(loaded) + len(report.exhausted)
    cases, configs = [], []
    for seed, rec, trace in loaded:
        report.traces += 1
        cfg = rec.get("config", {})
        configs.append(FuzzConfig(**cfg) if cfg else FuzzConfig(target_length=len(trace), seed=seed))
        cases.extend(cases_from_trace(toolset, oracles, trace, seed, typologies, client, report, args.rounds))
    _save_client(client)
    write_bundle(args.out, toolset, cases, report, configs, typologies, args.client)
    sys.stdout.write(report.render())
    return EXIT_OK if cases else EXIT_NOTHING


def cmd_candidates(args) -> int:
    _, cases, _ = read_bundle(_existing(args.bundle, "--bundle"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for case in cases:
        trace = case.ground_truth if args.kind == "ground_truth" else case.business_trace
        (out / f"{case.id}.calls").write_text(render_script(trace), encoding="utf-8")
    print(f"{len(cases)} {args.kind} scripts written to {out}")
    return EXIT_OK


def _load_candidate(cand_dir: Path, case_id: str, source: str) -> CandidateSolution | None:
    script = cand_dir / f"{case_id}.calls"
    if script.exists():
        return CandidateSolution(text=script.read_text(encoding="utf-8"), source=source)
    trace_file = cand_dir / f"{case_id}.json"
    if trace_file.exists():
        trace, _ = load_trace_file(trace_file)
        return CandidateSolution(trace=trace, source=source)
    return None


def cmd_eval(args) -> int:
    toolset, cases, _ = read_bundle(_existing(args.bundle, "--bundle"))
    cand_dir = _existing(args.candidates, "--candidates")
    outcomes, missing = [], []
    for case in cases:
        cand = _load_candidate(cand_dir, case.id, args.source)
        if cand is None:
            missing.append(case.id)
            continue
        outcomes.append(evaluate_candidate(case, cand, toolset))
    report = aggregate(outcomes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "results.jsonl", "w", encoding="utf-8") as fh:
        for o in outcomes:
            fh.write(json.dumps(o.to_record(), sort_keys=True) + "\n")
    doc = report.to_dict()
    doc["missing_candidates"] = missing
    (out / "report.json").write_text(_json(doc), encoding="utf-8")
    (out / "report.txt").write_text(report.render(), encoding="utf-8")
    _write_manifest(out, "eval", ["results.jsonl", "report.json", "report.txt"],
                    {"evaluated": len(outcomes), "missing": len(missing), "source": args.source})
    sys.stdout.write(report.render())
    if missing:
        print(f"{len(missing)} cases had no candidate file")
    return _eval_exit(outcomes)


def _eval_exit(outcomes) -> int:
    if not outcomes:
        print("no candidates evaluated", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK if all(o.outcome_class is OutcomeClass.PASS for o in outcomes) else EXIT_FAILURES


def _as_list(value) -> list[str]:
    if isinstance(value, str):
        return [v for v in value.split(",") if v.strip()]
    return [str(v) for v in value]


def cmd_report(args) -> int:
    keys = [k.strip() for k in _as_list(args.group_by)]
    unknown = [k for k in keys if k not in GROUP_KEYS]
    if unknown:
        raise UsageError(f"cannot group by {', '.join(unknown)}; choose from {', '.join(GROUP_KEYS)}")
    outcomes = []
    for item in _as_list(args.results):
        path = _existing(item, "--results")
        if path.is_dir():
            path = _existing(str(path / "results.jsonl"), "--results")
        for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                outcomes.append(EvalOutcome.from_record(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise UsageError(f"{path}:{n}: not an evaluation result ({exc})") from exc
    report = aggregate(outcomes, keys)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json(), encoding="utf-8")
        (out / "report.txt").write_text(report.render(), encoding="utf-8")
        _write_manifest(out, "report", ["report.json", "report.txt"], {"results": len(outcomes)})
    sys.stdout.write(report.render())
    return _eval_exit(outcomes)


def cmd_coverage(args) -> int:
    toolset = load_toolset_file(_existing(args.schema, "--schema"))
    if args.baseline:
        traces = [first_executable_trace(toolset, n) for n in parse_int_list(args.baseline)]
    else:
        traces = [load_trace_file(f)[0] for f in _trace_files(_existing(args.traces, "--traces"))]
        if not traces:
            raise UsageError(f"no trace files under {args.traces}")
    report = coverage_report(traces, toolset)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "coverage.json").write_text(report.to_json(), encoding="utf-8")
    sys.stdout.write(report.render())
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="safetrace", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command")

    def add(name: str, func, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help, description=help)
        p.add_argument("--config", help="YAML file whose keys override the flags of this command")
        p.set_defaults(func=func)
        return p

    def client_flags(p, default: str) -> None:
        p.add_argument("--client", choices=["off", "replay", "live"], default=default,
                       help="completion client: off, replay a cassette, or live (endpoint from the environment)")
        p.add_argument("--cassette", help="cassette file to replay, or to record into in live mode")

    p = add("fixture", cmd_fixture, "copy a bundled scenario (schema, policy, cassette, oracles)")
    p.add_argument("name", help=f"one of {', '.join(SCENARIOS)}")
    p.add_argument("--out")

    p = add("extract", cmd_extract, "turn a policy text into grounded safety oracles")
    p.add_argument("--policy")
    p.add_argument("--schema")
    client_flags(p, "replay")
    p.add_argument("--workers", type=int, default=1, help="parallel requests for long policies")
    p.add_argument("--out")

    p = add("fuzz", cmd_fuzz, "synthesise compliant ground-truth traces, one per seed")
    p.add_argument("--schema")
    p.add_argument("--oracles")
    p.add_argument("--seeds", default="0-9", help="e.g. 0-39 or 1,5,9")
    p.add_argument("--lengths", default="4-10", help="target lengths, cycled over the seeds")
    p.add_argument("--max-backtracks", type=int, default=10_000)
    p.add_argument("--max-candidates", type=int, default=32, help="candidate calls tried per step")
    p.add_argument("--lookahead", action="store_true", help="also prune branches that cannot discharge "
                   "pending obligations in the remaining steps (same traces, fewer nodes)")
    p.add_argument("--out")

    p = add("genbench", cmd_genbench, "mask traces and generate instruction test cases")
    p.add_argument("--schema")
    p.add_argument("--oracles")
    p.add_argument("--traces", help="output directory of the fuzz command")
    p.add_argument("--typologies", default="Goal,Workflow")
    client_flags(p, "off")
    p.add_argument("--rounds", type=int, default=3, help="generate/review rounds when a client is used")
    p.add_argument("--out")

    p = add("candidates", cmd_candidates, "write reference call scripts for every case of a bundle")
    p.add_argument("--bundle")
    p.add_argument("--kind", choices=["ground_truth", "business"], default="ground_truth")
    p.add_argument("--out")

    p = add("eval", cmd_eval, "grade candidate scripts (<case id>.calls or .json) against a bundle")
    p.add_argument("--bundle")
    p.add_argument("--candidates")
    p.add_argument("--source", default="file", help="label for the candidate source, e.g. a model name")
    p.add_argument("--out")

    p = add("report", cmd_report, "merge results.jsonl files from one or more eval runs into one report")
    p.add_argument("--results", nargs="+", help="results.jsonl files or eval output directories")
    p.add_argument("--group-by", default=",".join(GROUP_KEYS), help="comma-separated subset of "
                   + ", ".join(GROUP_KEYS))
    p.add_argument("--out", help="optional directory for report.json and report.txt")

    p = add("coverage", cmd_coverage, "ATC and safety-critical API coverage of a trace set")
    p.add_argument("--schema")
    p.add_argument("--traces", help="output directory of the fuzz command")
    p.add_argument("--baseline", help="instead of trace files, score the first-executable baseline "
                   "at these lengths, e.g. 4-10")
    p.add_argument("--out")
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not getattr(args, "config", None):
        return args
    path = _existing(args.config, "--config")
    doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: expected a mapping of flag names to values")
    known = {k for k in vars(args) if k not in ("func", "command", "config")}
    overrides = {}
    for key, value in doc.items():
        dest = str(key).replace("-", "_")
        if dest not in known:
            raise UsageError(f"{path}: unknown setting {key!r} for {args.command}")
        overrides[dest] = value
    for dest, value in overrides.items():
        setattr(args, dest, value)
    return args


REQUIRED = {
    "fixture": ("out",),
    "extract": ("policy", "schema", "out"),
    "fuzz": ("schema", "oracles", "out"),
    "genbench": ("schema", "oracles", "traces", "out"),
    "candidates": ("bundle", "out"),
    "eval": ("bundle", "candidates", "out"),
    "report": ("results",),
    "coverage": ("schema",),
}


def _check_required(args: argparse.Namespace) -> None:
    missing = [f"--{d.replace('_', '-')}" for d in REQUIRED[args.command] if getattr(args, d, None) in (None, "")]
    if missing:
        raise UsageError(f"{args.command}: missing required setting(s) {', '.join(missing)}")


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config(parser, argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        _check_required(args)
        return args.func(args)
    except (UsageError, ClientConfigError, SchemaError, SignatureError, FileNotFoundError) as exc:
        print(f"safetrace: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
