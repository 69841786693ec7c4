"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 validation/config error, 3 runtime
failure. Every subcommand takes ``--config FILE`` (a JSON object whose keys
are flag names, dashes or underscores) and ``--seed``; explicit flags beat the
file, which beats the defaults.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Sequence

from .bench import BenchConfig, emit_report, report_csv, report_json, run_benchmark
from .decoders import DECODERS, DecoderSpec, run_decoder
from .divergence import Method, divergence_test
from .engine import AcceptanceMode, FrontierRank, HvtConfig, decode
from .errors import ConfigError, HvtError
from .models import (
    InterpolatedModel,
    SoftmaxModel,
    load_model,
    random_table_model,
    sample_sequence,
    write_corpus,
)
from .sampling import RandomSource
from .tree import DraftMode, PriorityMode

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


DEFAULTS: dict[str, dict[str, Any]] = {
    "gen-model": {
        "type": "table",
        "vocab_size": 4,
        "eos": None,
        "order": 1,
        "embed_dim": 4,
        "temperature": 1.0,
        "concentration": 1.0,
        "point_mass": False,
        "base": None,
        "weight": 0.1,
        "out": None,
    },
    "gen-corpus": {"model": None, "count": 10, "length": 16, "out": None},
    "decode": {
        "p_model": None,
        "q_model": None,
        "decoder": "hvt",
        "prompt": "",
        "gamma": 3,
        "k": 2,
        "w": 2,
        "priority_mode": "LOG_LIKELIHOOD",
        "stop_at_w": True,
        "node_cap": 4096,
        "max_new_tokens": 16,
        "frontier_rank": "CUM_LOGPROB",
        "draft_mode": "TOP_K",
        "acceptance": "STOCHASTIC",
        "trace": None,
        "dump_tree": None,
    },
    "bench": {"out": None, "format": "csv", "jobs": 1},
    "dist-test": {
        "p_model": None,
        "q_model": None,
        "decoder": "flat-spec",
        "prompt": "",
        "horizon": 1,
        "exact": False,
        "samples": 0,
        "out": None,
        "gamma": 2,
        "k": 2,
        "w": 2,
        "priority_mode": "LOG_LIKELIHOOD",
        "stop_at_w": True,
        "node_cap": 4096,
        "frontier_rank": "CUM_LOGPROB",
        "draft_mode": "TOP_K",
        "acceptance": "STOCHASTIC",
    },
}

# bench flags that override BenchConfig fields
BENCH_FIELDS = ("p_model", "q_model", "divergence", "decoders", "trials", "max_new_tokens")


def _hvt_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--gamma", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--w", type=int, help="beam width W")
    p.add_argument("--priority-mode", choices=[m.value for m in PriorityMode])
    p.add_argument("--no-stop-at-w", dest="stop_at_w", action="store_false", default=None)
    p.add_argument("--node-cap", type=int)
    p.add_argument("--frontier-rank", choices=[m.value for m in FrontierRank])
    p.add_argument("--draft-mode", choices=[m.value for m in DraftMode])
    p.add_argument("--acceptance", choices=[m.value for m in AcceptanceMode])


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hvt", description="HVT speculative beam decoding harness")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", type=Path, help="JSON file of flag values")
        p.add_argument("--seed", type=int)

    g = sub.add_parser("gen-model", help="write a synthetic model file")
    common(g)
    g.add_argument("--type", choices=["table", "softmax", "interpolated"])
    g.add_argument("--vocab-size", type=int)
    g.add_argument("--eos", type=int)
    g.add_argument("--order", type=int)
    g.add_argument("--embed-dim", type=int)
    g.add_argument("--temperature", type=float)
    g.add_argument("--concentration", type=float)
    g.add_argument("--point-mass", action="store_true", default=None)
    g.add_argument("--base", type=Path, help="base model file for --type interpolated")
    g.add_argument("--weight", type=float, help="uniform mixing weight for --type interpolated")
    g.add_argument("--out", type=Path)

    c = sub.add_parser("gen-corpus", help="sample a token corpus from a model")
    common(c)
    c.add_argument("--model", type=Path)
    c.add_argument("--count", type=int)
    c.add_argument("--length", type=int)
    c.add_argument("--out", type=Path)

    d = sub.add_parser("decode", help="decode one prompt and print JSON")
    common(d)
    d.add_argument("--p-model", type=Path)
    d.add_argument("--q-model", type=Path)
    d.add_argument("--decoder", choices=DECODERS)
    d.add_argument("--prompt", help="whitespace-separated token ids")
    d.add_argument("--max-new-tokens", type=int)
    _hvt_flags(d)
    d.add_argument("--trace", type=Path, help="write the verification trace (JSON lines)")
    d.add_argument("--dump-tree", type=Path, help="write every draft tree (JSON lines)")

    b = sub.add_parser("bench", help="run a benchmark sweep")
    common(b)
    b.add_argument("--p-model", type=str)
    b.add_argument("--q-model", type=str)
    b.add_argument("--divergence", type=float)
    b.add_argument("--decoders", type=lambda s: [x for x in s.split(",") if x])
    b.add_argument("--trials", type=int)
    b.add_argument("--max-new-tokens", type=int)
    b.add_argument("--out", type=Path)
    b.add_argument("--format", choices=["csv", "json"])
    b.add_argument("--jobs", type=int)

    t = sub.add_parser("dist-test", help="total-variation test of a decoder against the target")
    common(t)
    t.add_argument("--p-model", type=Path)
    t.add_argument("--q-model", type=Path)
    t.add_argument("--decoder", choices=DECODERS)
    t.add_argument("--prompt")
    t.add_argument("--horizon", type=int)
    t.add_argument("--exact", action="store_true", default=None)
    t.add_argument("--samples", type=int)
    t.add_argument("--out", type=Path)
    _hvt_flags(t)
    return parser


def _load_config_file(path: Path | None) -> dict[str, Any]:
    if path is None:
        return {}
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return {k.replace("-", "_"): v for k, v in data.items()}


def _merge(command: str, args: argparse.Namespace) -> dict[str, Any]:
    file_values = _load_config_file(args.config)
    merged = dict(DEFAULTS[command])
    if command != "bench":
        unknown = sorted(set(file_values) - set(merged) - {"seed"})
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
    merged.update(file_values)
    for key, value in vars(args).items():
        if key in ("command", "config") or value is None:
            continue
        merged[key] = value
    if merged.get("seed") is None:
        raise ConfigError(f"{command} requires --seed")
    return merged


def _prompt(text: Any) -> tuple[int, ...]:
    if isinstance(text, list):
        return tuple(int(t) for t in text)
    try:
        return tuple(int(t) for t in str(text).split())
    except ValueError:
        raise ConfigError(f"--prompt must be whitespace-separated integers, got {text!r}") from None


def _hvt_config(o: dict[str, Any], max_new_tokens: int) -> HvtConfig:
    try:
        return HvtConfig(
            gamma=o["gamma"],
            k=o["k"],
            W=o["w"],
            priority_mode=o["priority_mode"],
            stop_at_W=o["stop_at_w"],
            node_cap=o["node_cap"],
            max_new_tokens=max_new_tokens,
            seed=o["seed"],
            frontier_rank=o["frontier_rank"],
            draft_mode=o["draft_mode"],
            acceptance=o["acceptance"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _require(o: dict[str, Any], *names: str) -> None:
    for name in names:
        if o.get(name) is None:
            raise ConfigError(f"--{name.replace('_', '-')} is required")


def _write(text: str, out: Path | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _load(path: Path | str):
    try:
        return load_model(path)
    except OSError as exc:
        raise ConfigError(f"cannot read model file {path}: {exc.strerror or exc}") from None


def cmd_gen_model(o: dict[str, Any]) -> None:
    kind = o["type"]
    if kind == "table":
        model = random_table_model(
            o["vocab_size"], o["seed"], o["order"], o["eos"], o["concentration"], bool(o["point_mass"])
        )
    elif kind == "softmax":
        model = SoftmaxModel(o["vocab_size"], o["eos"], o["seed"], o["embed_dim"], o["temperature"], o["order"])
    else:
        _require(o, "base")
        model = InterpolatedModel(_load(o["base"]), o["weight"])
    _write(json.dumps(model.to_spec(), indent=2) + "\n", o["out"])


def cmd_gen_corpus(o: dict[str, Any]) -> None:
    _require(o, "model")
    model = _load(o["model"])
    source = RandomSource(o["seed"])
    corpus = [sample_sequence(model, (), o["length"], source) for _ in range(o["count"])]
    if o["out"] is None:
        sys.stdout.write("".join(" ".join(map(str, s)) + "\n" for s in corpus))
    else:
        write_corpus(corpus, o["out"])


def cmd_decode(o: dict[str, Any]) -> None:
    _require(o, "p_model")
    p = _load(o["p_model"])
    q = _load(o["q_model"]) if o["q_model"] is not None else p
    prompt = _prompt(o["prompt"])
    cfg = _hvt_config(o, o["max_new_tokens"])
    source = RandomSource(o["seed"])
    if o["decoder"] == "hvt":
        trace = [] if o["trace"] is not None else None
        dumps = [] if o["dump_tree"] is not None else None
        beams, report = decode(p, q, prompt, cfg, source, trace=trace, tree_dumps=dumps)
        if trace is not None:
            Path(o["trace"]).write_text("".join(e.to_json() + "\n" for e in trace))
        if dumps is not None:
            Path(o["dump_tree"]).write_text(
                "".join(json.dumps(rec | {"step": i}, sort_keys=True) + "\n" for i, step in enumerate(dumps) for rec in step)
            )
    else:
        if o["max_new_tokens"] < 0:
            raise ConfigError("--max-new-tokens must be >= 0")
        tokens, report = run_decoder(DecoderSpec(o["decoder"], cfg), p, q, prompt, o["max_new_tokens"], source)
        beams = [(tokens, None)]
    out = {
        "decoder": o["decoder"],
        "prompt": list(prompt),
        "beams": [{"tokens": list(t), "score": s} for t, s in beams],
        "report": report.to_dict(),
    }
    sys.stdout.write(json.dumps(out) + "\n")


def cmd_bench(o: dict[str, Any], args: argparse.Namespace) -> None:
    data = _load_config_file(args.config)
    for name in ("format", "jobs", "out"):
        data.pop(name, None)
    for name in BENCH_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            data[name] = value
    data["seed"] = o["seed"]
    if "decoders" not in data:
        raise ConfigError("config field 'decoders' is required")
    cfg = BenchConfig.from_dict(data)
    report = run_benchmark(cfg, jobs=o["jobs"])
    fmt = o["format"]
    if o["out"] is None:
        sys.stdout.write(report_csv(report) if fmt == "csv" else report_json(report))
    else:
        emit_report(report, o["out"], fmt)


def cmd_dist_test(o: dict[str, Any]) -> None:
    _require(o, "p_model")
    p = _load(o["p_model"])
    q = _load(o["q_model"]) if o["q_model"] is not None else p
    spec = DecoderSpec(o["decoder"], _hvt_config(o, o["horizon"]))
    method = Method.EXACT_ENUM if o["exact"] else None
    result = divergence_test(spec, p, q, _prompt(o["prompt"]), o["horizon"], o["samples"], RandomSource(o["seed"]), method)
    _write(json.dumps(result.to_dict(), indent=2) + "\n", o["out"])


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        opts = _merge(args.command, args)
        if args.command == "gen-model":
            cmd_gen_model(opts)
        elif args.command == "gen-corpus":
            cmd_gen_corpus(opts)
        elif args.command == "decode":
            cmd_decode(opts)
        elif args.command == "bench":
            cmd_bench(opts, args)
        else:
            cmd_dist_test(opts)
    except HvtError as exc:
        print(f"hvt {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        print(f"hvt {args.command}: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
