"""Command-line interface: index, run, eval, inspect.

Run configuration lives in a single JSON file; relative paths inside it
resolve against the config file's directory so a config can travel with
its data.  Secrets never appear in config files: the API key is read from
the environment variable the config names (SMR_API_KEY by default).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path
from typing import Any, Callable, Sequence

from .engine import EngineConfig, run_batch, write_run_file, write_trace_file
from .errors import ConfigError, SmrError
from .evalx import (
    DEFAULT_METRICS,
    METRIC_KEYS,
    analyze_traces,
    build_report,
    load_qrels,
    load_run_records,
)
from .llm import ChatBackend, ChatRequest, HttpBackend, HttpEmbedder, ScriptedBackend, chat
from .policy import PolicyConfig
from .retrieval import (
    Bm25Retriever,
    DenseRetriever,
    Retriever,
    build_index,
    load_corpus,
    load_dense_store,
    load_index,
    save_index,
)

DEFAULT_API_KEY_ENV = "SMR_API_KEY"


def _resolve(path: str, base: Path) -> str:
    p = Path(path)
    return str(p if p.is_absolute() else base / p)


def _check_keys(block: dict, allowed: set[str], where: str) -> None:
    unknown = set(block) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")


def load_queries(path: str) -> list[tuple[str, str]]:
    """Read queries as JSONL {query_id, text} records or raw lines.

    Plain-text queries get their zero-based position as the id.
    """
    with open(path, encoding="utf-8") as fh:
        lines = fh.readlines()
    content = [line.rstrip("\n") for line in lines]
    first = next((line for line in content if line.strip()), None)
    if first is None:
        raise ConfigError(f"{path}: queries file is empty")
    jsonl = False
    try:
        jsonl = isinstance(json.loads(first), dict)
    except json.JSONDecodeError:
        jsonl = False
    queries: list[tuple[str, str]] = []
    if jsonl:
        for lineno, line in enumerate(content, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: line {lineno}: invalid JSON ({exc.msg})")
            if not isinstance(record, dict) or "query_id" not in record or "text" not in record:
                raise ConfigError(f"{path}: line {lineno}: expected an object with query_id and text")
            text = record["text"]
            if not isinstance(text, str) or not text.strip():
                raise ConfigError(f"{path}: line {lineno}: text must be a non-empty string")
            queries.append((str(record["query_id"]), text))
    else:
        position = 0
        for line in content:
            if not line.strip():
                continue
            queries.append((str(position), line.strip()))
            position += 1
    seen: set[str] = set()
    for query_id, _ in queries:
        if query_id in seen:
            raise ConfigError(f"{path}: duplicate query_id {query_id!r}")
        seen.add(query_id)
    return queries


def _parse_policy_config(block: dict, base: Path) -> PolicyConfig:
    _check_keys(
        block,
        {
            "base_temperature",
            "temperature_increment",
            "max_attempts",
            "doc_snippet_chars",
            "max_output_tokens",
            "prompt_path",
        },
        "engine.policy",
    )
    kwargs: dict[str, Any] = dict(block)
    if kwargs.get("prompt_path"):
        kwargs["prompt_path"] = _resolve(kwargs["prompt_path"], base)
    try:
        return PolicyConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"engine.policy: {exc}")


def _parse_engine_config(block: dict, base: Path) -> EngineConfig:
    _check_keys(block, {"k", "max_steps", "batch_size", "max_list_size", "policy"}, "engine")
    kwargs: dict[str, Any] = {key: value for key, value in block.items() if key != "policy"}
    if "policy" in block:
        if not isinstance(block["policy"], dict):
            raise ConfigError("engine.policy must be an object")
        kwargs["policy"] = _parse_policy_config(block["policy"], base)
    try:
        return EngineConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"engine: {exc}")


def _require_env(var: str) -> str:
    value = os.environ.get(var)
    if not value:
        raise ConfigError(f"environment variable {var} is not set")
    return value


class RunPlan:
    """Everything cmd_run needs, validated up front."""

    def __init__(self, config_path: str):
        base = Path(config_path).resolve().parent
        try:
            with open(config_path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {config_path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{config_path}: invalid JSON ({exc.msg})")
        if not isinstance(raw, dict):
            raise ConfigError(f"{config_path}: config must be a JSON object")
        _check_keys(raw, {"retriever", "llm", "engine", "paths"}, "config")
        for section in ("retriever", "llm", "paths"):
            if section not in raw or not isinstance(raw[section], dict):
                raise ConfigError(f"config needs a {section!r} object")

        paths = raw["paths"]
        _check_keys(paths, {"queries", "run", "trace"}, "paths")
        for key in ("queries", "run", "trace"):
            if not isinstance(paths.get(key), str):
                raise ConfigError(f"paths.{key} must be a string")
        self.queries_path = _resolve(paths["queries"], base)
        self.run_path = _resolve(paths["run"], base)
        self.trace_path = _resolve(paths["trace"], base)

        engine_block = raw.get("engine", {})
        if not isinstance(engine_block, dict):
            raise ConfigError("engine must be an object")
        self.engine = _parse_engine_config(engine_block, base)

        retriever = raw["retriever"]
        modes = [key for key in ("bm25_index", "dense_store") if key in retriever]
        if len(modes) != 1:
            raise ConfigError("retriever needs exactly one of bm25_index or dense_store")
        self.retriever_mode = modes[0]
        if self.retriever_mode == "bm25_index":
            _check_keys(retriever, {"bm25_index"}, "retriever")
            self.index_path = _resolve(retriever["bm25_index"], base)
        else:
            _check_keys(
                retriever,
                {"dense_store", "corpus", "embed_endpoint", "embed_model", "api_key_env"},
                "retriever",
            )
            for key in ("corpus", "embed_endpoint", "embed_model"):
                if not isinstance(retriever.get(key), str):
                    raise ConfigError(f"dense retriever needs retriever.{key}")
            self.dense_store_path = _resolve(retriever["dense_store"], base)
            self.dense_corpus_path = _resolve(retriever["corpus"], base)
            self.embed_endpoint = retriever["embed_endpoint"]
            self.embed_model = retriever["embed_model"]
            self.embed_api_key_env = retriever.get("api_key_env")

        llm_block = raw["llm"]
        llm_modes = [key for key in ("endpoint", "script") if key in llm_block]
        if len(llm_modes) != 1:
            raise ConfigError("llm needs exactly one of endpoint or script")
        self.llm_mode = llm_modes[0]
        if self.llm_mode == "endpoint":
            _check_keys(llm_block, {"endpoint", "model", "api_key_env"}, "llm")
            if not isinstance(llm_block.get("model"), str):
                raise ConfigError("llm.model must be a string")
            self.endpoint = llm_block["endpoint"]
            self.model = llm_block["model"]
            self.api_key_env = llm_block.get("api_key_env", DEFAULT_API_KEY_ENV)
        else:
            _check_keys(llm_block, {"script"}, "llm")
            self.script_path = _resolve(llm_block["script"], base)

    def build_backend_factory(self) -> Callable[[str], ChatBackend]:
        if self.llm_mode == "endpoint":
            key = _require_env(self.api_key_env)
            endpoint, model = self.endpoint, self.model
            return lambda _query_id: HttpBackend(endpoint, model, api_key=key)
        try:
            with open(self.script_path, encoding="utf-8") as fh:
                script = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"script file not found: {self.script_path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{self.script_path}: invalid JSON ({exc.msg})")

        def check_steps(steps: Any, where: str) -> list[str]:
            if not isinstance(steps, list) or not all(isinstance(s, str) for s in steps):
                raise ConfigError(f"{self.script_path}: {where} must be a list of strings")
            return steps

        if isinstance(script, list):
            shared = check_steps(script, "script")
            return lambda _query_id: ScriptedBackend(shared)
        if isinstance(script, dict):
            table = {qid: check_steps(steps, f"entry {qid!r}") for qid, steps in script.items()}

            def factory(query_id: str) -> ChatBackend:
                if query_id in table:
                    return ScriptedBackend(table[query_id])
                if "*" in table:
                    return ScriptedBackend(table["*"])
                raise ConfigError(f"{self.script_path}: no script for query {query_id!r} and no '*' default")

            return factory
        raise ConfigError(f"{self.script_path}: script must be a JSON list or object")

    def preflight(self) -> None:
        """One cheap endpoint call to fail fast before any query runs."""
        if self.llm_mode != "endpoint":
            return
        backend = HttpBackend(self.endpoint, self.model, api_key=_require_env(self.api_key_env))
        chat(backend, ChatRequest(system_text="", user_text="ping", temperature=0.0, max_output_tokens=1))

    def build_retriever(self) -> Retriever:
        if self.retriever_mode == "bm25_index":
            return Bm25Retriever(load_index(self.index_path))
        store = load_dense_store(self.dense_store_path, embed_endpoint=self.embed_endpoint)
        corpus = load_corpus(self.dense_corpus_path)
        doc_store = {doc.doc_id: doc for doc in corpus}
        api_key = _require_env(self.embed_api_key_env) if self.embed_api_key_env else None
        embedder = HttpEmbedder(self.embed_endpoint, self.embed_model, api_key=api_key)
        return DenseRetriever(store, doc_store, embedder)


def cmd_index(args: argparse.Namespace) -> int:
    corpus = load_corpus(args.corpus)
    index = build_index(corpus)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_index(index, args.out)
    print(f"indexed {index.doc_count} documents (avg length {index.avg_doc_length:.2f} tokens) -> {args.out}")
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    plan = RunPlan(args.config)
    overrides = {}
    if args.max_steps is not None:
        overrides["max_steps"] = args.max_steps
    if args.k is not None:
        overrides["k"] = args.k
    if args.batch_size is not None:
        overrides["batch_size"] = args.batch_size
    engine_cfg = plan.engine
    if overrides:
        engine_cfg = EngineConfig(
            k=overrides.get("k", engine_cfg.k),
            max_steps=overrides.get("max_steps", engine_cfg.max_steps),
            batch_size=overrides.get("batch_size", engine_cfg.batch_size),
            max_list_size=engine_cfg.max_list_size,
            policy=engine_cfg.policy,
        )
    # Fail fast on a dead endpoint before any query is consumed.
    plan.preflight()
    factory = plan.build_backend_factory()
    retriever = plan.build_retriever()
    queries = load_queries(plan.queries_path)

    results = run_batch(queries, retriever, factory, engine_cfg)

    Path(plan.run_path).parent.mkdir(parents=True, exist_ok=True)
    Path(plan.trace_path).parent.mkdir(parents=True, exist_ok=True)
    with open(plan.run_path, "w", encoding="utf-8", newline="\n") as fh:
        write_run_file(results, fh)
    with open(plan.trace_path, "w", encoding="utf-8", newline="\n") as fh:
        write_trace_file(results, fh)

    total_tokens = 0
    failures = 0
    for result in results:
        if result.error is not None:
            failures += 1
            print(f"{result.query_id}\tfailed\t{result.error}")
            continue
        trajectory = result.trajectory
        assert trajectory is not None
        total_tokens += trajectory.total_output_tokens
        print(
            f"{result.query_id}\t{trajectory.stop_cause.value}"
            f"\tsteps={trajectory.step_count}\ttokens={trajectory.total_output_tokens}"
        )
    print(
        f"ran {len(results)} queries ({failures} failed), total output tokens {total_tokens}"
    )
    print(f"run -> {plan.run_path}")
    print(f"trace -> {plan.trace_path}")
    return 1 if failures == len(results) and results else 0


def cmd_eval(args: argparse.Namespace) -> int:
    metrics = tuple(m.strip() for m in args.metrics.split(",") if m.strip())
    for metric in metrics:
        if metric not in METRIC_KEYS:
            raise ConfigError(f"unknown metric {metric!r}; choose from {sorted(METRIC_KEYS)}")
    records = load_run_records(args.run)
    qrels = load_qrels(args.qrels)
    analytics = None
    if args.trace:
        with open(args.trace, encoding="utf-8") as fh:
            analytics = analyze_traces(fh, name=args.trace)
    report = build_report(records, qrels, metrics=metrics, analytics=analytics)

    evaluated = len(report.per_query)
    print(
        f"queries evaluated: {evaluated}"
        f"  excluded: {len(report.excluded_queries)}  failed: {len(report.failed_queries)}"
    )
    if report.excluded_queries:
        print(f"excluded (no relevant judgments): {', '.join(report.excluded_queries)}")
    for metric in metrics:
        key = METRIC_KEYS[metric]
        value = report.aggregate.get(key)
        print(f"{metric:<12} {value:.6f}" if value is not None else f"{metric:<12} n/a")
    if evaluated:
        print(f"mean steps   {report.aggregate['steps']:.3f}")
        print(f"mean tokens  {report.aggregate['output_tokens']:.1f}")
    print(f"total output tokens: {report.total_output_tokens}")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, ensure_ascii=False, indent=2)
            fh.write("\n")
        print(f"report -> {args.out}")
    if args.csv:
        Path(args.csv).parent.mkdir(parents=True, exist_ok=True)
        with open(args.csv, "w", encoding="utf-8", newline="") as fh:
            csv.writer(fh).writerows(report.csv_rows())
        print(f"csv -> {args.csv}")
    return 0


def cmd_inspect(args: argparse.Namespace) -> int:
    with open(args.trace, encoding="utf-8") as fh:
        lines = fh.readlines()
    transitions: list[dict] = []
    summary: dict | None = None
    error: str | None = None
    available: list[str] = []
    for line in lines:
        if not line.strip():
            continue
        record = json.loads(line)
        query_id = str(record.get("query_id"))
        if query_id not in available:
            available.append(query_id)
        if query_id != args.query_id:
            continue
        if "error" in record:
            error = record["error"]
        elif "action" in record:
            transitions.append(record)
        else:
            summary = record
    if not transitions and summary is None and error is None:
        print(
            f"query id {args.query_id!r} not found in {args.trace}; "
            f"available: {', '.join(available) if available else '(none)'}",
            file=sys.stderr,
        )
        return 1
    if error is not None:
        print(f"query {args.query_id}: failed: {error}")
        return 0
    header = f"query {args.query_id}"
    if summary:
        header += f": {summary['steps']} steps, stop cause: {summary['stop_cause']}"
    print(header)
    for record in transitions:
        print(
            f"\nstep {record['step']}  {record['action']}"
            f"  temperature={record['temperature']}  output_tokens={record['output_tokens']}"
        )
        print(f"  query: {record['query']}")
        print(f"  docs:  {', '.join(record['doc_ids']) if record['doc_ids'] else '(empty)'}")
        if record.get("reason"):
            print(f"  reason: {record['reason']}")
    if summary:
        print(f"\ntotal output tokens: {summary['output_tokens']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="smr",
        description="Iterative retrieval: refine queries, rerank results, stop when stable.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_index = sub.add_parser("index", help="build a BM25 index from a JSONL corpus")
    p_index.add_argument("--corpus", required=True, help="JSONL corpus of {doc_id, text}")
    p_index.add_argument("--out", required=True, help="where to write the index")
    p_index.set_defaults(func=cmd_index)

    p_run = sub.add_parser("run", help="run the reasoning loop over a query set")
    p_run.add_argument("--config", required=True, help="JSON run configuration")
    p_run.add_argument("--max-steps", type=int, default=None, help="override engine.max_steps")
    p_run.add_argument("--k", type=int, default=None, help="override engine.k")
    p_run.add_argument("--batch-size", type=int, default=None, help="override engine.batch_size")
    p_run.set_defaults(func=cmd_run)

    p_eval = sub.add_parser("eval", help="score a run file against judgments")
    p_eval.add_argument("--run", required=True, help="run file from `smr run`")
    p_eval.add_argument("--qrels", required=True, help="judgments: query_id 0 doc_id grade")
    p_eval.add_argument(
        "--metrics",
        default=",".join(DEFAULT_METRICS),
        help="comma-separated subset of ndcg@10,map@10,recall@10",
    )
    p_eval.add_argument("--out", default=None, help="write the full report JSON here")
    p_eval.add_argument("--trace", default=None, help="trace file; adds action analytics to the report")
    p_eval.add_argument("--csv", default=None, help="write per-query rows as CSV here")
    p_eval.set_defaults(func=cmd_eval)

    p_inspect = sub.add_parser("inspect", help="pretty-print one query's trace")
    p_inspect.add_argument("--trace", required=True, help="trace file from `smr run`")
    p_inspect.add_argument("--query-id", required=True, help="which query to show")
    p_inspect.set_defaults(func=cmd_inspect)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SmrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
