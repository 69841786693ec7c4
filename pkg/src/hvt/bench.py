"""Benchmark runner: decoders x HVT grid x seeded trials.

Cost is measured in target-model forward passes (``p_forward``), not wall
clock or energy. ``speedup_proxy`` is greedy's target passes per token divided
by the decoder's, so greedy scores 1.0 by construction.

Report schema (version 1). One row per (decoder, grid point). Key columns:
``decoder, gamma, k, W, priority_mode, trials``. Then ``<metric>_mean`` and
``<metric>_std`` (population std over trials) for each metric in
:data:`METRICS`. All floats are rounded to 6 significant digits.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
import platform
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .decoders import DECODERS, DecoderSpec, run_decoder
from .engine import FrontierRank, HvtConfig
from .errors import ConfigError, ValidationError
from .models import InterpolatedModel, LanguageModel, generate_model, load_model, sequence_logprob
from .sampling import RandomSource
from .tree import PriorityMode

SCHEMA_VERSION = 1
METRICS = (
    "p_forward_per_token",
    "q_forward_per_token",
    "speedup_proxy",
    "acceptance_rate",
    "verification_reduction_rate",
    "perplexity",
)
KEY_COLUMNS = ("decoder", "gamma", "k", "W", "priority_mode", "trials")


def round_sig(x: float, digits: int = 6) -> float:
    if not math.isfinite(x) or x == 0:
        return float(x)
    return float(f"{x:.{digits}g}")


@dataclass
class BenchConfig:
    p_model: dict | str
    decoders: list[str]
    q_model: dict | str | None = None
    divergence: float = 0.0
    grid: dict[str, list] = field(default_factory=dict)
    stop_at_W: bool = True
    node_cap: int = 4096
    frontier_rank: str = "CUM_LOGPROB"
    prompts: list[list[int]] | None = None
    prompt_count: int = 4
    prompt_length: int = 2
    max_new_tokens: int = 16
    trials: int = 5
    seed: int = 0
    #: "pooled" divides total accepted by total verified; "mean_step" averages per-step rates
    rate_aggregation: str = "pooled"

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> BenchConfig:
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
        for required in ("p_model", "decoders"):
            if required not in data:
                raise ConfigError(f"config field {required!r} is required")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if not isinstance(self.decoders, list) or not self.decoders:
            raise ConfigError("config field 'decoders' must be a non-empty list")
        for name in self.decoders:
            if name not in DECODERS:
                raise ConfigError(f"config field 'decoders': unknown decoder {name!r}")
        if self.trials < 1:
            raise ConfigError("config field 'trials' must be >= 1")
        if self.max_new_tokens < 1:
            raise ConfigError("config field 'max_new_tokens' must be >= 1")
        if not 0.0 <= self.divergence <= 1.0:
            raise ConfigError("config field 'divergence' must lie in [0, 1]")
        if self.rate_aggregation not in ("pooled", "mean_step"):
            raise ConfigError("config field 'rate_aggregation' must be 'pooled' or 'mean_step'")
        for key, values in self.grid.items():
            if key not in ("gamma", "k", "W", "priority_mode"):
                raise ConfigError(f"config field 'grid': unknown axis {key!r}")
            if not isinstance(values, list) or not values:
                raise ConfigError(f"config field 'grid.{key}' must be a non-empty list")
        try:
            FrontierRank(self.frontier_rank)
        except ValueError:
            raise ConfigError(f"config field 'frontier_rank': unknown rank {self.frontier_rank!r}") from None
        for cfg in self.hvt_grid():
            try:
                cfg.validate()
            except ConfigError as exc:
                raise ConfigError(f"config field 'grid': {exc}") from None

    def hvt_grid(self) -> list[HvtConfig]:
        axes = {"gamma": [3], "k": [2], "W": [2], "priority_mode": ["LOG_LIKELIHOOD"]} | self.grid
        out = []
        for gamma, k, w, mode in itertools.product(axes["gamma"], axes["k"], axes["W"], axes["priority_mode"]):
            try:
                mode = PriorityMode(mode)
            except ValueError:
                raise ConfigError(f"config field 'grid.priority_mode': unknown mode {mode!r}") from None
            out.append(
                HvtConfig(
                    gamma=gamma,
                    k=k,
                    W=w,
                    priority_mode=mode,
                    stop_at_W=self.stop_at_W,
                    node_cap=self.node_cap,
                    max_new_tokens=self.max_new_tokens,
                    seed=self.seed,
                    frontier_rank=self.frontier_rank,
                )
            )
        return out

    def decoder_specs(self) -> list[DecoderSpec]:
        specs: list[DecoderSpec] = []
        grid = self.hvt_grid()
        for name in self.decoders:
            if name == "hvt":
                specs.extend(DecoderSpec("hvt", c) for c in grid)
            elif name == "flat-spec":
                for gamma in dict.fromkeys(c.gamma for c in grid):
                    specs.append(DecoderSpec("flat-spec", replace(grid[0], gamma=gamma)))
            else:
                specs.append(DecoderSpec(name, grid[0]))
        return specs

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


def _resolve_model(entry: dict | str, field_name: str) -> LanguageModel:
    try:
        if isinstance(entry, str):
            return load_model(entry)
        return generate_model(entry)
    except (OSError, ValidationError) as exc:
        raise ConfigError(f"config field {field_name!r}: cannot load model ({exc})") from None


def build_models(cfg: BenchConfig) -> tuple[LanguageModel, LanguageModel]:
    """Fresh target and draft models; the draft defaults to the target mixed with uniform."""
    p = _resolve_model(cfg.p_model, "p_model")
    if cfg.q_model is not None:
        q = _resolve_model(cfg.q_model, "q_model")
    else:
        q = InterpolatedModel(_resolve_model(cfg.p_model, "p_model"), cfg.divergence)
    if p.vocab_size != q.vocab_size or p.eos != q.eos:
        raise ConfigError("config fields 'p_model' and 'q_model' disagree on vocabulary or EOS")
    return p, q


def make_prompts(cfg: BenchConfig, p_model: LanguageModel) -> list[tuple[int, ...]]:
    if cfg.prompts is not None:
        try:
            return [p_model.check_prefix(pr) for pr in cfg.prompts]
        except ValueError as exc:
            raise ConfigError(f"config field 'prompts': {exc}") from None
    rng = np.random.default_rng(cfg.seed)
    allowed = [t for t in range(p_model.vocab_size) if t != p_model.eos]
    return [tuple(int(rng.choice(allowed)) for _ in range(cfg.prompt_length)) for _ in range(cfg.prompt_count)]


@dataclass
class TrialResult:
    p_forward: int
    q_forward: int
    tokens: int
    accepted: int
    verified: int
    total_nodes: int
    step_rates: list[float]
    logprob: float
    scored_tokens: int


def _run_trial(cfg: BenchConfig, spec: DecoderSpec, trial: int) -> TrialResult:
    p, q = build_models(cfg)
    prompts = make_prompts(cfg, p)
    source = RandomSource(cfg.seed + trial)
    res = TrialResult(0, 0, 0, 0, 0, 0, [], 0.0, 0)
    outputs = []
    for prompt in prompts:
        tokens, report = run_decoder(spec, p, q, prompt, cfg.max_new_tokens, source)
        res.p_forward += report.p_forward
        res.q_forward += report.q_forward
        res.tokens += report.tokens_generated
        res.accepted += report.totals.accepted_nodes
        res.verified += report.totals.verified_nodes
        res.total_nodes += report.totals.total_nodes
        res.step_rates.extend(s.accepted_nodes / s.verified_nodes for s in report.step_stats if s.verified_nodes)
        outputs.append((prompt, tokens[len(prompt):]))
    counted = p.forward_count + (q.forward_count if q is not p else 0)
    if counted != res.p_forward + res.q_forward:
        raise AssertionError(f"report counts {res.p_forward + res.q_forward} forward passes, models counted {counted}")
    for prompt, gen in outputs:
        if gen:
            res.logprob += sequence_logprob(p, prompt, gen)
            res.scored_tokens += len(gen)
    return res


def _per_token(n: int, tokens: int) -> float:
    return n / tokens if tokens else 0.0


@dataclass
class BenchRow:
    decoder: str
    gamma: Any
    k: Any
    W: Any
    priority_mode: Any
    trials: int
    mean: dict[str, float]
    std: dict[str, float]

    def flat(self) -> dict[str, Any]:
        out: dict[str, Any] = {c: getattr(self, c) for c in KEY_COLUMNS}
        for m in METRICS:
            out[f"{m}_mean"] = self.mean[m]
            out[f"{m}_std"] = self.std[m]
        return out


@dataclass
class BenchReport:
    rows: list[BenchRow]
    metadata: dict[str, Any]
    trial_metrics: dict[str, list[dict[str, float]]] = field(default_factory=dict)

    def row(self, decoder: str, **key: Any) -> BenchRow:
        for r in self.rows:
            if r.decoder == decoder and all(getattr(r, k) == v for k, v in key.items()):
                return r
        raise KeyError(decoder)

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "metadata": self.metadata,
            "rows": [r.flat() for r in self.rows],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> BenchReport:
        if data.get("schema_version") != SCHEMA_VERSION:
            raise ValidationError(f"unsupported report schema {data.get('schema_version')!r}")
        rows = []
        for flat in data["rows"]:
            rows.append(
                BenchRow(
                    *(flat[c] for c in KEY_COLUMNS),
                    mean={m: flat[f"{m}_mean"] for m in METRICS},
                    std={m: flat[f"{m}_std"] for m in METRICS},
                )
            )
        return cls(rows, data["metadata"])

    def __eq__(self, other: object) -> bool:
        return isinstance(other, BenchReport) and self.to_dict() == other.to_dict()


def _trial_metrics(cfg: BenchConfig, res: TrialResult, greedy: TrialResult) -> dict[str, float]:
    ppt = _per_token(res.p_forward, res.tokens)
    if cfg.rate_aggregation == "pooled":
        acc = res.accepted / res.verified if res.verified else 0.0
    else:
        acc = statistics.fmean(res.step_rates) if res.step_rates else 0.0
    return {
        "p_forward_per_token": ppt,
        "q_forward_per_token": _per_token(res.q_forward, res.tokens),
        "speedup_proxy": _per_token(greedy.p_forward, greedy.tokens) / ppt if ppt else 0.0,
        "acceptance_rate": acc,
        "verification_reduction_rate": 1.0 - res.verified / res.total_nodes if res.total_nodes else 0.0,
        "perplexity": math.exp(-res.logprob / res.scored_tokens) if res.scored_tokens else 0.0,
    }


def run_benchmark(cfg: BenchConfig, jobs: int = 1) -> BenchReport:
    """Run every decoder spec for ``cfg.trials`` trials with seeds ``seed + trial``."""
    cfg.validate()
    specs = cfg.decoder_specs()
    greedy_spec = DecoderSpec("greedy", cfg.hvt_grid()[0])
    tasks = [(greedy_spec, t) for t in range(cfg.trials)] + [(s, t) for s in specs for t in range(cfg.trials)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_trial, [cfg] * len(tasks), *zip(*tasks)))
    else:
        results = [_run_trial(cfg, s, t) for s, t in tasks]
    greedy = results[: cfg.trials]
    rest = results[cfg.trials:]

    rows = []
    per_trial: dict[str, list[dict[str, float]]] = {}
    for i, spec in enumerate(specs):
        trial_res = rest[i * cfg.trials:(i + 1) * cfg.trials]
        metrics = [_trial_metrics(cfg, r, g) for r, g in zip(trial_res, greedy)]
        label = spec.label()
        rows.append(
            BenchRow(
                spec.name,
                label["gamma"],
                label["k"],
                label["W"],
                label["priority_mode"],
                cfg.trials,
                mean={m: round_sig(statistics.fmean(t[m] for t in metrics)) for m in METRICS},
                std={m: round_sig(statistics.pstdev(t[m] for t in metrics)) for m in METRICS},
            )
        )
        per_trial[f"{spec.name}{tuple(label.values())}"] = metrics
    metadata = {
        "package_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "cost_unit": "target-model forward passes",
        "config": cfg.to_dict(),
    }
    return BenchReport(rows, metadata, per_trial)


def _fmt(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def report_csv(report: BenchReport) -> str:
    columns = list(KEY_COLUMNS) + [f"{m}_{s}" for m in METRICS for s in ("mean", "std")]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in report.rows:
        flat = row.flat()
        writer.writerow([_fmt(flat[c]) for c in columns])
    return buf.getvalue()


def report_json(report: BenchReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"


def emit_report(report: BenchReport, path: str | Path, fmt: str = "csv") -> Path:
    fmt = fmt.lower()
    if fmt not in ("csv", "json"):
        raise ValueError(f"unknown report format {fmt!r}")
    text = report_csv(report) if fmt == "csv" else report_json(report)
    path = Path(path)
    path.write_text(text)
    return path


def load_report(path: str | Path) -> BenchReport:
    return BenchReport.from_dict(json.loads(Path(path).read_text()))
