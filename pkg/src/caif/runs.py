"""Experiment runs driven by a JSON config: generate, sweep, entropy profile, bench.

Relative paths inside a config file are resolved against the file's directory.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import itertools
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from . import metrics
from .client import RemoteEndpoint, RemoteLogitSource, RemoteScorer, TransportError
from .core import (
    AttributeTarget,
    GuidanceConfig,
    InvalidInputError,
    StepCriterion,
    Vocabulary,
    splitmix64_mix,
)
from .models import (
    AttributeScorer,
    CountingScorer,
    LogitSource,
    SuppressTokens,
    build_vocabulary,
    load_lexicon,
    load_table_lm,
    load_table_scorer,
    read_corpus,
    train_trigram,
)
from .sampler import GenerationError, GenerationRecord, generate

logger = logging.getLogger(__name__)

GUIDANCE_FIELDS = tuple(f.name for f in dataclasses.fields(GuidanceConfig))
SWEEP_COLUMNS = [
    "alpha", "mode", "criterion", "guided_fraction_observed", "ppl",
    "attr_mean_pct", "attr_max_pct", "attr_prob_pct", "dist1", "dist2", "dist3",
]
BENCH_COLUMNS = ["length", "mean_ms", "guided_steps", "scorer_calls", "scorer_sequences_scored"]
DEFAULT_BENCH_LENGTHS = (10, 20, 50, 100)
DEFAULT_BENCH_REPEATS = 100
NEVER_GUIDE = StepCriterion.entropy(math.inf)


class ConfigError(Exception):
    """Invalid config or unreadable input file (CLI exit code 2)."""


class RunError(Exception):
    """A generation failed mid-run (CLI exit code 3)."""


@dataclass
class RunContext:
    """Everything a run needs, loaded and validated up front."""

    lm: LogitSource
    scorer: AttributeScorer
    eval_lm: LogitSource
    eval_scorer: AttributeScorer
    target: AttributeTarget
    guidance: GuidanceConfig
    prompts: list[tuple[int, ...]]
    samples_per_prompt: int = 25
    base_seed: int = 0
    output: Path | None = None
    emit_traces: bool = False
    workers: int = 1
    attribute_scope: str = "continuation"
    attribute_threshold: float = 0.5
    raw: dict = field(default_factory=dict)

    @property
    def vocabulary(self) -> Vocabulary:
        return self.lm.vocabulary


def _resolve(base: Path, value: str) -> Path:
    p = Path(value)
    return p if p.is_absolute() else base / p


def _require_file(path: Path, what: str) -> Path:
    if not path.is_file():
        raise ConfigError(f"{what} not found: {path}")
    return path


def _endpoint(spec: dict) -> RemoteEndpoint:
    return RemoteEndpoint(
        spec["base_url"],
        timeout_ms=int(spec.get("timeout_ms", 10_000)),
        max_retries=int(spec.get("max_retries", 2)),
        fingerprint=spec.get("fingerprint"),
    )


def _shared_vocabulary(specs: Sequence[dict | None], base: Path) -> Vocabulary | None:
    corpora = [
        read_corpus(_require_file(_resolve(base, s["corpus"]), "corpus"))
        for s in specs
        if s and s.get("type") == "trigram"
    ]
    return build_vocabulary(*corpora) if corpora else None


def _load_lm(spec: dict, base: Path, vocabulary: Vocabulary | None) -> LogitSource:
    kind = spec.get("type")
    if kind == "trigram":
        corpus = read_corpus(_require_file(_resolve(base, spec["corpus"]), "corpus"))
        return train_trigram(corpus, float(spec.get("smoothing_k", 1.0)), vocabulary)
    if kind == "table":
        return load_table_lm(_require_file(_resolve(base, spec["path"]), "table fixture"))
    if kind == "remote":
        return RemoteLogitSource(_endpoint(spec), vocabulary)
    raise ConfigError(f"unknown model type {kind!r}")


def _load_scorer(spec: dict, base: Path, vocabulary: Vocabulary) -> AttributeScorer:
    kind = spec.get("type")
    if kind == "lexicon":
        path = _require_file(_resolve(base, spec["path"]), "lexicon")
        return load_lexicon(path, vocabulary, float(spec.get("w0", -2.0)), float(spec.get("w1", 2.0)))
    if kind == "table":
        return load_table_scorer(_require_file(_resolve(base, spec["path"]), "table fixture"))
    if kind == "remote":
        return RemoteScorer(_endpoint(spec), vocabulary)
    raise ConfigError(f"unknown scorer type {kind!r}")


def read_config(path: str | Path) -> tuple[dict, Path]:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except ValueError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return raw, path.resolve().parent


SECTIONS = {"generate": None, "sweep": "sweep", "entropy-profile": "entropy_profile", "bench": "bench"}


def output_for(raw: dict, command: str) -> str | None:
    """``generate`` writes to the top-level ``output``; other commands read
    ``output`` from their own section (``sweep``, ``entropy_profile``, ``bench``)."""
    section = SECTIONS[command]
    if section is None:
        return raw.get("output")
    return (raw.get(section) or {}).get("output")


def load_context(raw: dict, base: Path, command: str = "generate") -> RunContext:
    """Build models, guidance and prompts; raise ConfigError on any problem."""
    try:
        output = output_for(raw, command)
        model_spec = raw["model"]
        eval_spec = raw.get("eval_model") or model_spec
        vocab = None
        if model_spec.get("type") == "trigram":
            # trigram models built from different corpora must agree on token ids
            vocab = _shared_vocabulary([model_spec, eval_spec], base)
        lm = _load_lm(model_spec, base, vocab)
        vocab = lm.vocabulary
        eval_lm = lm if eval_spec is model_spec else _load_lm(eval_spec, base, vocab)
        if eval_lm.vocabulary.fingerprint() != vocab.fingerprint():
            raise ConfigError("eval_model vocabulary differs from model vocabulary")
        scorer = _load_scorer(raw["scorer"], base, vocab)
        eval_scorer = _load_scorer(raw["eval_scorer"], base, vocab) if raw.get("eval_scorer") else scorer
        target_spec = raw.get("target", {"class_label": raw.get("class_label", "toxic")})
        target = AttributeTarget(**target_spec) if isinstance(target_spec, dict) else AttributeTarget(str(target_spec))
        guidance = GuidanceConfig.from_dict({k: raw[k] for k in GUIDANCE_FIELDS if k in raw})
        if "prompts" not in raw:
            raise ConfigError("config has no 'prompts' file")
        prompt_path = _require_file(_resolve(base, raw["prompts"]), "prompts file")
        lines = [l for l in prompt_path.read_text(encoding="utf-8").splitlines() if l.strip()]
        if raw.get("max_prompts") is not None:
            lines = lines[: int(raw["max_prompts"])]
        prompts = [vocab.encode(line) for line in lines]
        if not prompts:
            raise ConfigError("no prompts to run")
        samples = int(raw.get("samples_per_prompt", 25))
        if samples < 1:
            raise ConfigError("samples_per_prompt must be positive")
        scope = raw.get("attribute_scope", "continuation")
        if scope not in ("continuation", "full"):
            raise ConfigError(f"attribute_scope must be 'continuation' or 'full', got {scope!r}")
        return RunContext(
            lm=lm,
            scorer=scorer,
            eval_lm=eval_lm,
            eval_scorer=eval_scorer,
            target=target,
            guidance=guidance,
            prompts=prompts,
            samples_per_prompt=samples,
            base_seed=int(raw.get("base_seed", 0)),
            output=_resolve(base, output) if output else None,
            emit_traces=bool(raw.get("emit_traces", False)),
            workers=max(1, int(raw.get("workers", 1))),
            attribute_scope=scope,
            attribute_threshold=float(raw.get("attribute_threshold", 0.5)),
            raw=raw,
        )
    except ConfigError:
        raise
    except KeyError as exc:
        raise ConfigError(f"missing config field {exc}") from None
    except (InvalidInputError, ValueError, TypeError, OSError, TransportError) as exc:
        raise ConfigError(str(exc)) from None


def sample_seed(base_seed: int, prompt_index: int, sample_index: int) -> int:
    return splitmix64_mix(base_seed, prompt_index, sample_index)


@dataclass
class RunResult:
    groups: list[list[GenerationRecord]]
    failure: GenerationError | None = None
    failed_at: tuple[int, int] | None = None

    @property
    def records(self) -> list[GenerationRecord]:
        return [r for g in self.groups for r in g]


def run_records(ctx: RunContext, guidance: GuidanceConfig | None = None, base_seed: int | None = None) -> RunResult:
    """Generate every (prompt, sample) pair. Results come back in index order
    regardless of ``ctx.workers``; the first failure stops the run."""
    guidance = guidance or ctx.guidance
    seed0 = ctx.base_seed if base_seed is None else base_seed
    jobs = [(i, s) for i in range(len(ctx.prompts)) for s in range(ctx.samples_per_prompt)]

    def job(ij):
        i, s = ij
        try:
            return generate(ctx.prompts[i], ctx.lm, ctx.scorer, ctx.target, guidance, sample_seed(seed0, i, s))
        except GenerationError as err:
            return err

    groups: list[list[GenerationRecord]] = [[] for _ in ctx.prompts]
    if ctx.workers > 1:
        with ThreadPoolExecutor(ctx.workers) as pool:
            results = list(pool.map(job, jobs))
    else:
        results = map(job, jobs)
    for (i, s), res in zip(jobs, results):
        if isinstance(res, GenerationError):
            groups[i].append(res.record)
            return RunResult(groups, res, (i, s))
        groups[i].append(res)
    return RunResult(groups)


def record_line(i: int, s: int, rec: GenerationRecord, emit_traces: bool, error: str | None = None) -> str:
    obj: dict[str, Any] = {
        "prompt_index": i,
        "sample_index": s,
        "seed": rec.seed,
        "prompt_ids": list(rec.prompt),
        "continuation_ids": list(rec.continuation),
        "stopped_by": rec.stopped_by.value if rec.stopped_by else None,
    }
    if emit_traces:
        obj["traces"] = [t.to_dict() for t in rec.traces]
    if error is not None:
        obj["error"] = error
    return json.dumps(obj)


def _write_jsonl(path: Path, result: RunResult, emit_traces: bool) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i, group in enumerate(result.groups):
            for s, rec in enumerate(group):
                err = str(result.failure) if result.failed_at == (i, s) else None
                fh.write(record_line(i, s, rec, emit_traces, err) + "\n")


def _report(ctx: RunContext, groups) -> metrics.MetricsReport:
    return metrics.build_report(
        groups, ctx.eval_lm, ctx.eval_scorer, ctx.target, ctx.attribute_scope, ctx.attribute_threshold
    )


def report_path(output: Path) -> Path:
    return output.with_name(output.stem + ".report.json")


def run_generate(ctx: RunContext) -> tuple[RunResult, metrics.MetricsReport]:
    """Write one JSONL line per continuation to ``ctx.output`` plus a report JSON
    next to it. A failed generation keeps the lines produced so far."""
    result = run_records(ctx)
    if ctx.output is not None:
        _write_jsonl(ctx.output, result, ctx.emit_traces)
    if result.failure is not None:
        i, s = result.failed_at
        raise RunError(f"prompt {i} sample {s}: {result.failure}")
    report = _report(ctx, result.groups)
    if ctx.output is not None:
        report_path(ctx.output).write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    return result, report


def _checked(result: RunResult) -> RunResult:
    if result.failure is not None:
        i, s = result.failed_at
        raise RunError(f"prompt {i} sample {s}: {result.failure}")
    return result


def entropy_samples(result: RunResult) -> list[float]:
    return [t.entropy_nats for r in result.records for t in r.traces]


def profile_entropy(ctx: RunContext, base_seed: int | None = None) -> metrics.EntropyProfile:
    """Entropy of every step of an unguided run (alpha = 0, scorer never called)."""
    unguided = dataclasses.replace(ctx.guidance, alpha=0.0, criterion=NEVER_GUIDE)
    samples = entropy_samples(_checked(run_records(ctx, unguided, base_seed)))
    if not samples:
        raise ConfigError("run produced no generation steps to profile")
    return metrics.EntropyProfile.from_samples(samples)


def run_entropy_profile(ctx: RunContext) -> tuple[metrics.EntropyProfile, list[tuple[float, float]]]:
    """Write the sorted entropy samples (JSON) and a guided-fraction -> threshold
    CDF table (``<output stem>.cdf.csv``)."""
    if ctx.guidance.alpha != 0:
        raise ConfigError("entropy-profile needs guidance disabled (alpha = 0)")
    profile = profile_entropy(ctx)
    table = metrics.cdf_table(profile)
    if ctx.output is not None:
        ctx.output.parent.mkdir(parents=True, exist_ok=True)
        ctx.output.write_text(json.dumps(profile.to_dict()) + "\n", encoding="utf-8")
        cdf_path = ctx.output.with_name(ctx.output.stem + ".cdf.csv")
        with open(cdf_path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["guided_fraction", "threshold_nats"])
            w.writerows([[repr(f), repr(e)] for f, e in table])
    return profile, table


def resolve_criterion(spec, ctx: RunContext) -> StepCriterion:
    """Like StepCriterion.parse, plus ``entropy-fraction:F``: the entropy threshold
    at which a fraction F of steps would be guided, read off an unguided profile
    run with fresh seeds (base_seed + 1)."""
    if isinstance(spec, str) and spec.strip().lower().startswith("entropy-fraction:"):
        fraction = float(spec.split(":", 1)[1])
        profile = profile_entropy(ctx, base_seed=ctx.base_seed + 1)
        return StepCriterion.entropy(metrics.entropy_quantile_threshold(profile, fraction))
    if isinstance(spec, dict) and "guided_fraction" in spec:
        return resolve_criterion(f"entropy-fraction:{spec['guided_fraction']}", ctx)
    return StepCriterion.parse(spec)


def guided_fraction(records: Sequence[GenerationRecord]) -> float:
    steps = sum(len(r.traces) for r in records)
    return sum(r.guided_steps for r in records) / steps if steps else 0.0


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, float) else str(x)


def run_sweep(ctx: RunContext, grid: dict | None = None) -> list[dict]:
    """One run per point of the alpha x mode x criterion grid; one CSV row each."""
    grid = grid or ctx.raw.get("sweep") or {}
    alphas = grid.get("alpha", [ctx.guidance.alpha])
    modes = grid.get("mode", [ctx.guidance.mode.value])
    criteria = grid.get("criterion", [str(ctx.guidance.criterion)])
    if not (alphas and modes and criteria):
        raise ConfigError("sweep grid is empty")
    try:
        resolved = [resolve_criterion(c, ctx) for c in criteria]
        points = [
            dataclasses.replace(ctx.guidance, alpha=float(a), mode=m, criterion=c)
            for a, m, c in itertools.product(alphas, modes, resolved)
        ]
    except (InvalidInputError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    rows = []
    for g in points:
        result = _checked(run_records(ctx, g))
        rep = _report(ctx, result.groups)
        rows.append({
            "alpha": g.alpha,
            "mode": g.mode.value,
            "criterion": str(g.criterion),
            "guided_fraction_observed": guided_fraction(result.records),
            "ppl": rep.ppl,
            "attr_mean_pct": rep.attr_mean_pct,
            "attr_max_pct": rep.attr_max_pct,
            "attr_prob_pct": rep.attr_prob_pct,
            "dist1": rep.dist_n[1],
            "dist2": rep.dist_n[2],
            "dist3": rep.dist_n[3],
        })
    if ctx.output is not None:
        write_csv(ctx.output, SWEEP_COLUMNS, rows)
    return rows


def write_csv(path: Path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(csv_text(columns, rows))


def csv_text(columns: Sequence[str], rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in columns])
    return buf.getvalue()


def expected_scorer_sequences(record: GenerationRecord, vocab_size: int) -> int:
    per_step = min(record.config.top_j, vocab_size)
    return record.guided_steps * per_step


def run_bench(
    ctx: RunContext,
    lengths: Sequence[int] | None = None,
    repeats: int | None = None,
) -> list[dict]:
    """Time single-sequence generation at fixed lengths.

    EOS is suppressed so every run produces exactly ``length`` tokens, and each
    repeat reuses the same seed so the counters are per-run integers. Scorer
    traffic is counted at the scorer boundary and checked against the traces.
    """
    bench = ctx.raw.get("bench") or {}
    lengths = list(lengths or bench.get("lengths") or DEFAULT_BENCH_LENGTHS)
    repeats = int(repeats or bench.get("repeats") or DEFAULT_BENCH_REPEATS)
    if repeats < 1 or not lengths or any(n < 0 for n in lengths):
        raise ConfigError("bench needs repeats >= 1 and non-negative lengths")
    vocab = ctx.vocabulary
    lm = SuppressTokens(ctx.lm, [vocab.eos_id])
    counter = CountingScorer(ctx.scorer)
    prompt = ctx.prompts[0]
    rows = []
    for n in lengths:
        g = dataclasses.replace(ctx.guidance, max_new_tokens=int(n))
        seed = splitmix64_mix(ctx.base_seed, int(n))
        run = lambda: generate(prompt, lm, counter, ctx.target, g, seed)
        try:
            run()  # warm-up: fills model caches
            counter.reset()
            elapsed = 0.0
            reference = None
            for _ in range(repeats):
                calls0, seqs0 = counter.calls, counter.sequences
                t0 = time.perf_counter()
                rec = run()
                elapsed += time.perf_counter() - t0
                calls, seqs = counter.calls - calls0, counter.sequences - seqs0
                if calls != rec.guided_steps or seqs != expected_scorer_sequences(rec, vocab.size):
                    raise RunError(
                        f"length {n}: scorer saw {calls} calls / {seqs} sequences, "
                        f"traces imply {rec.guided_steps} / {expected_scorer_sequences(rec, vocab.size)}"
                    )
                if reference is None:
                    reference = (rec.continuation, calls, seqs)
                elif reference != (rec.continuation, calls, seqs):
                    raise RunError(f"length {n}: repeated run with the same seed diverged")
        except GenerationError as err:
            raise RunError(f"length {n}: {err}") from err
        rows.append({
            "length": int(n),
            "mean_ms": 1000.0 * elapsed / repeats,
            "guided_steps": rec.guided_steps,
            "scorer_calls": calls,
            "scorer_sequences_scored": seqs,
        })
    if ctx.output is not None:
        write_csv(ctx.output, BENCH_COLUMNS, rows)
    return rows
