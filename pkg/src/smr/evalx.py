"""Offline evaluation: ranking metrics, trace analytics, and reports.

Metrics are the classic graded/binary trio (nDCG, MAP, Recall, all @k).
Queries with no relevant documents in the judgments cannot be scored and
are excluded from aggregate means, but stay visible in the report.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Mapping, Sequence

from .errors import AlignmentError, CorpusError, TraceFormatError
from .llm import ChatBackend, ChatRequest, chat
from .policy import PolicyConfig

METRIC_KEYS = {"ndcg@10": "ndcg10", "map@10": "map10", "recall@10": "recall10"}
DEFAULT_METRICS = ("ndcg@10", "map@10", "recall@10")

_NUMBER_RE = re.compile(r"-?(?:\d+\.\d*|\.\d+|\d+)")


def judgeable(rels: Mapping[str, int]) -> bool:
    """A query can be scored only if it has at least one relevant document."""
    return any(grade >= 1 for grade in rels.values())


def ndcg_at_k(ranking: Sequence[str], rels: Mapping[str, int], k: int = 10) -> float:
    """Graded nDCG with exponential gain 2^grade - 1 and log2(rank+1) discount.

    The ideal ordering considers every relevant document in the judgments,
    retrieved or not, so a ranking that never surfaces a known-relevant
    document is penalized for it.  Returns 0.0 for unjudgeable queries;
    callers exclude those from aggregates (see judgeable()).
    """
    dcg = 0.0
    for i, doc_id in enumerate(ranking[:k], start=1):
        grade = rels.get(doc_id, 0)
        dcg += (2.0**grade - 1.0) / math.log2(i + 1)
    ideal_grades = sorted((g for g in rels.values() if g >= 1), reverse=True)
    idcg = 0.0
    for i, grade in enumerate(ideal_grades[:k], start=1):
        idcg += (2.0**grade - 1.0) / math.log2(i + 1)
    if idcg == 0.0:
        return 0.0
    return dcg / idcg


def map_at_k(ranking: Sequence[str], rels: Mapping[str, int], k: int = 10) -> float:
    """Average precision at k with binarized relevance (grade >= 1).

    Normalizes by min(R, k) so a short perfect ranking is not punished for
    judgments deeper than the cutoff.
    """
    relevant = {doc_id for doc_id, grade in rels.items() if grade >= 1}
    if not relevant:
        return 0.0
    hits = 0
    precision_sum = 0.0
    for i, doc_id in enumerate(ranking[:k], start=1):
        if doc_id in relevant:
            hits += 1
            precision_sum += hits / i
    return precision_sum / min(len(relevant), k)


def recall_at_k(ranking: Sequence[str], rels: Mapping[str, int], k: int = 10) -> float:
    """Fraction of relevant documents (grade >= 1) present in the top k."""
    relevant = {doc_id for doc_id, grade in rels.items() if grade >= 1}
    if not relevant:
        return 0.0
    found = sum(1 for doc_id in ranking[:k] if doc_id in relevant)
    return found / len(relevant)


@dataclass(frozen=True)
class Qrels:
    """Relevance judgments: query_id -> {doc_id: grade}."""

    by_query: dict[str, dict[str, int]]

    def for_query(self, query_id: str) -> dict[str, int]:
        return self.by_query.get(query_id, {})


def parse_qrels(lines: Iterable[str], name: str = "qrels") -> Qrels:
    """Parse the four-column judgment format: query_id 0 doc_id grade."""
    by_query: dict[str, dict[str, int]] = {}
    for lineno, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped:
            continue
        fields = stripped.split()
        if len(fields) != 4:
            raise CorpusError(f"{name}: line {lineno}: expected 4 fields, got {len(fields)}")
        query_id, _iteration, doc_id, grade_text = fields
        try:
            grade = int(grade_text)
        except ValueError:
            raise CorpusError(f"{name}: line {lineno}: grade must be an integer, got {grade_text!r}")
        if grade < 0:
            raise CorpusError(f"{name}: line {lineno}: grade must be >= 0, got {grade}")
        by_query.setdefault(query_id, {})[doc_id] = grade
    return Qrels(by_query=by_query)


def load_qrels(path: str) -> Qrels:
    with open(path, encoding="utf-8") as fh:
        return parse_qrels(fh, name=path)


@dataclass(frozen=True)
class TraceAnalytics:
    """Distilled view of a trace file.

    action_histogram counts refine and rerank decisions only; stop is a
    terminator, not a transformation.  step_depth_cumulative[i-1] is the
    number of queries that took at least i advancing steps, so the bins
    never increase.
    """

    action_histogram: dict[str, int]
    step_depth_cumulative: list[int]
    per_query: dict[str, dict]
    failed_queries: list[str]
    total_output_tokens: int


def analyze_traces(lines: Iterable[str], name: str = "trace") -> TraceAnalytics:
    histogram: dict[str, int] = {}
    transitions_seen: dict[str, int] = {}
    summaries: dict[str, dict] = {}
    failed: list[str] = []
    for lineno, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped:
            continue
        try:
            record = json.loads(stripped)
        except json.JSONDecodeError as exc:
            raise TraceFormatError(f"{name}: line {lineno}: invalid JSON ({exc.msg})")
        if not isinstance(record, dict) or "query_id" not in record:
            raise TraceFormatError(f"{name}: line {lineno}: expected an object with query_id")
        query_id = str(record["query_id"])
        if "error" in record:
            failed.append(query_id)
        elif "action" in record:
            action = record["action"]
            if action not in ("refine", "rerank", "stop"):
                raise TraceFormatError(f"{name}: line {lineno}: unknown action {action!r}")
            transitions_seen.setdefault(query_id, 0)
            if action != "stop":
                histogram[action] = histogram.get(action, 0) + 1
                transitions_seen[query_id] += 1
        elif "steps" in record:
            if not isinstance(record.get("steps"), int) or not isinstance(record.get("output_tokens"), int):
                raise TraceFormatError(f"{name}: line {lineno}: summary needs integer steps and output_tokens")
            summaries[query_id] = {
                "steps": record["steps"],
                "output_tokens": record["output_tokens"],
                "stop_cause": record.get("stop_cause"),
            }
        else:
            raise TraceFormatError(f"{name}: line {lineno}: unrecognized record shape")
    for query_id, count in transitions_seen.items():
        if query_id not in summaries:
            raise TraceFormatError(f"{name}: query {query_id!r} has transitions but no summary record")
        if summaries[query_id]["steps"] != count:
            raise TraceFormatError(
                f"{name}: query {query_id!r} summary says {summaries[query_id]['steps']} steps, "
                f"trace shows {count}"
            )
    depths = [info["steps"] for info in summaries.values()]
    max_depth = max(depths, default=0)
    cumulative = [sum(1 for d in depths if d >= i) for i in range(1, max_depth + 1)]
    total_tokens = sum(info["output_tokens"] for info in summaries.values())
    return TraceAnalytics(
        action_histogram=histogram,
        step_depth_cumulative=cumulative,
        per_query=summaries,
        failed_queries=failed,
        total_output_tokens=total_tokens,
    )


def load_alignment_prompt() -> str:
    return resources.files("smr").joinpath("prompts/intent_alignment.txt").read_text(encoding="utf-8")


def intent_alignment(
    query_original: str,
    query: str,
    backend: ChatBackend,
    config: PolicyConfig | None = None,
) -> float:
    """Judge how well a rewritten query preserves the original intent.

    Sends the judging prompt and reads the first decimal number in the
    reply, clamped to [0, 1].  Unparseable replies are retried on the same
    escalation schedule the decision policy uses; running out of attempts
    is an evaluation error.
    """
    cfg = config or PolicyConfig()
    prompt = load_alignment_prompt().format(query_original=query_original, query=query)
    for attempt in range(cfg.max_attempts):
        request = ChatRequest(
            system_text="",
            user_text=prompt,
            temperature=cfg.temperature_for_attempt(attempt),
            max_output_tokens=cfg.max_output_tokens,
        )
        response = chat(backend, request)
        match = _NUMBER_RE.search(response.text)
        if match:
            return min(1.0, max(0.0, float(match.group())))
    raise AlignmentError(f"judge produced no parseable score in {cfg.max_attempts} attempts")


def aggregate_alignment(per_query_scores: Mapping[str, Sequence[float]]) -> dict:
    """Two views of the same scores: mean over steps and mean over queries.

    The per-step mean weights queries by how many rewrites they made; the
    per-query mean weights every query equally.  Both are reported because
    they answer different questions.  Queries with no rewrites are skipped.
    """
    all_scores = [s for scores in per_query_scores.values() for s in scores]
    query_means = [
        sum(scores) / len(scores) for scores in per_query_scores.values() if scores
    ]
    return {
        "per_step_mean": sum(all_scores) / len(all_scores) if all_scores else None,
        "per_step_count": len(all_scores),
        "per_query_mean": sum(query_means) / len(query_means) if query_means else None,
        "per_query_count": len(query_means),
    }


@dataclass(frozen=True)
class EvalReport:
    """Per-query metric rows plus aggregates and run-shape analytics."""

    metrics: tuple[str, ...]
    per_query: dict[str, dict]
    aggregate: dict[str, float]
    excluded_queries: list[str]
    failed_queries: list[str]
    total_output_tokens: int
    action_histogram: dict[str, int] = field(default_factory=dict)
    step_depth_cumulative: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "metrics": list(self.metrics),
            "per_query": self.per_query,
            "aggregate": self.aggregate,
            "excluded_queries": self.excluded_queries,
            "failed_queries": self.failed_queries,
            "total_output_tokens": self.total_output_tokens,
            "action_histogram": self.action_histogram,
            "step_depth_cumulative": self.step_depth_cumulative,
        }

    def csv_rows(self) -> list[list[str]]:
        keys = [METRIC_KEYS[m] for m in self.metrics]
        header = ["query_id", *keys, "steps", "output_tokens"]
        rows = [header]
        for query_id in sorted(self.per_query):
            entry = self.per_query[query_id]
            rows.append(
                [query_id]
                + [f"{entry[key]:.6f}" for key in keys]
                + [str(entry["steps"]), str(entry["output_tokens"])]
            )
        return rows


def load_run_records(path: str) -> list[dict]:
    """Read a run file back; error entries are passed through as written."""
    records: list[dict] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}: line {lineno}: invalid JSON ({exc.msg})")
            if not isinstance(record, dict) or "query_id" not in record:
                raise CorpusError(f"{path}: line {lineno}: expected an object with query_id")
            if "error" not in record and "ranked_doc_ids" not in record:
                raise CorpusError(f"{path}: line {lineno}: record has neither a ranking nor an error")
            records.append(record)
    return records


_METRIC_FNS = {"ndcg@10": ndcg_at_k, "map@10": map_at_k, "recall@10": recall_at_k}


def build_report(
    run_records: Sequence[dict],
    qrels: Qrels,
    metrics: Sequence[str] = DEFAULT_METRICS,
    analytics: TraceAnalytics | None = None,
) -> EvalReport:
    """Join run output with judgments.

    Queries absent from the judgments, or judged with no relevant document,
    land in excluded_queries and stay out of the aggregate means.  Failed
    run entries are listed separately and never scored.
    """
    for metric in metrics:
        if metric not in METRIC_KEYS:
            raise ValueError(f"unknown metric {metric!r}; choose from {sorted(METRIC_KEYS)}")
    per_query: dict[str, dict] = {}
    excluded: list[str] = []
    failed: list[str] = []
    total_tokens = 0
    for record in run_records:
        query_id = str(record["query_id"])
        if "error" in record:
            failed.append(query_id)
            continue
        total_tokens += int(record.get("output_tokens", 0))
        rels = qrels.for_query(query_id)
        if not judgeable(rels):
            excluded.append(query_id)
            continue
        ranking = record["ranked_doc_ids"]
        entry: dict = {}
        for metric in metrics:
            entry[METRIC_KEYS[metric]] = _METRIC_FNS[metric](ranking, rels, 10)
        entry["steps"] = int(record.get("steps", 0))
        entry["output_tokens"] = int(record.get("output_tokens", 0))
        per_query[query_id] = entry
    aggregate: dict[str, float] = {}
    if per_query:
        fields_to_mean = [METRIC_KEYS[m] for m in metrics] + ["steps", "output_tokens"]
        for key in fields_to_mean:
            aggregate[key] = sum(entry[key] for entry in per_query.values()) / len(per_query)
    return EvalReport(
        metrics=tuple(metrics),
        per_query=per_query,
        aggregate=aggregate,
        excluded_queries=excluded,
        failed_queries=failed,
        total_output_tokens=total_tokens,
        action_histogram=analytics.action_histogram if analytics else {},
        step_depth_cumulative=analytics.step_depth_cumulative if analytics else [],
    )
