"""Measurement apparatus for comparing update methods.

Covers the error ledger with per-cause deduplication, 0/1 requirement
scoring, the three per-file check marks, difficulty scoring from
LOC/complexity/task count, duration normalization, mean/SD statistics,
temperature selection, and the side-by-side comparison report.
"""

from __future__ import annotations

import json
import re
import statistics
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from .errors import CheckerUnavailable, ConfigInvalid, EmptyScores, InvalidCCLetter
from .models import CodeDocument, count_loc  # noqa: F401  (count_loc is part of this surface)


class ErrorCategory(str, Enum):
    FATAL = "fatal"
    RUNTIME = "runtime"
    CONTENT = "content"
    MISSING_ADDITIONAL = "missing_additional"


class FindingSource(str, Enum):
    HUMAN_ANNOTATION = "human_annotation"
    AUTOMATED_CHECK = "automated_check"


_DIGITS_RE = re.compile(r"\d+")
_WS_RE = re.compile(r"\s+")


def normalize_cause_key(message: str) -> str:
    """Collapse a diagnostic message to the mistake behind it.

    Line/column numbers and casing are stripped so the same mistake
    reported at ten locations maps to one cause key.
    """
    text = _DIGITS_RE.sub("", message.lower())
    return _WS_RE.sub(" ", text).strip()


@dataclass(frozen=True)
class Finding:
    """One error observed in an updated file."""

    category: ErrorCategory
    cause_key: str
    description: str
    source: FindingSource

    def __post_init__(self) -> None:
        if not self.cause_key.strip():
            raise ValueError("finding cause_key must be non-empty")


@dataclass
class RunErrorLedger:
    """Per-run error set, deduplicated by cause key (first record wins)."""

    run_id: str
    findings: dict[str, Finding] = field(default_factory=dict)

    def record(self, finding: Finding) -> None:
        self.findings.setdefault(finding.cause_key, finding)

    def __len__(self) -> int:
        return len(self.findings)

    def by_category(self) -> dict[ErrorCategory, int]:
        counts = {category: 0 for category in ErrorCategory}
        for finding in self.findings.values():
            counts[finding.category] += 1
        return counts


def record_finding(ledger: RunErrorLedger, finding: Finding) -> RunErrorLedger:
    """Add a finding unless its cause key is already present."""
    ledger.record(finding)
    return ledger


# A checker takes file content and returns diagnostic messages (empty = clean).
SyntaxCheckerHook = Callable[[str], list[str]]


def python_syntax_checker(content: str) -> list[str]:
    try:
        compile(content, "<update-candidate>", "exec")
    except SyntaxError as exc:
        return [exc.msg or "syntax error"]
    return []


def default_checkers() -> dict[str, SyntaxCheckerHook]:
    return {"py": python_syntax_checker, "python": python_syntax_checker}


def check_fatal(code: CodeDocument,
                checkers: Mapping[str, SyntaxCheckerHook]) -> list[Finding]:
    """Run the registered syntax checker for the document's language.

    Only fatal errors are automatable; the other categories enter the
    ledger through annotations.  Raises CheckerUnavailable when no hook
    covers the language tag, which callers treat as a skip.
    """
    hook = checkers.get(code.language_tag.lower())
    if hook is None:
        raise CheckerUnavailable(f"no syntax checker registered for {code.language_tag!r}")
    return [
        Finding(
            category=ErrorCategory.FATAL,
            cause_key=normalize_cause_key(message),
            description=message,
            source=FindingSource.AUTOMATED_CHECK,
        )
        for message in hook(code.content)
    ]


@dataclass(frozen=True)
class RequirementResult:
    """Binary outcome for one requirement: 1 working, 0 not."""

    requirement_id: str
    value: int

    def __post_init__(self) -> None:
        if self.value not in (0, 1):
            raise ValueError(f"requirement value must be 0 or 1, got {self.value}")


def score_requirements(results: Sequence[RequirementResult]) -> int:
    """Sum of fulfilled requirements."""
    if not results:
        raise ValueError("cannot score an empty requirement list")
    return sum(result.value for result in results)


@dataclass(frozen=True)
class CheckMarks:
    """The three per-file quality flags used in single-attempt validation."""

    updates_present_and_plausible: bool
    basic_functions_ok: bool
    all_requirements_correct: bool

    def flags(self) -> tuple[bool, bool, bool]:
        return (
            self.updates_present_and_plausible,
            self.basic_functions_ok,
            self.all_requirements_correct,
        )


def score_checkmarks(marks: CheckMarks) -> int:
    return sum(marks.flags())


CC_POINTS = {"A": 1, "B": 2, "C": 3, "D": 4, "E": 5, "F": 6}

# Selection band for update candidates, inclusive on both ends.
SELECTION_RANGE = (3, 10)


@dataclass(frozen=True)
class DifficultyScore:
    loc_points: int
    cc_points: int
    task_points: int

    @property
    def total(self) -> int:
        return self.loc_points + self.cc_points + self.task_points


def score_difficulty(loc: int, cc_letter: str, task_count: int) -> DifficultyScore:
    """One point per rounded 100 LOC (never below 1), the complexity
    grade A..F as 1..6, and one point per task."""
    if loc <= 0:
        raise ValueError("loc must be positive")
    if task_count < 1:
        raise ValueError("task_count must be at least 1")
    letter = cc_letter.strip().upper()
    if letter not in CC_POINTS:
        raise InvalidCCLetter(f"complexity grade must be A..F, got {cc_letter!r}")
    loc_points = max(1, (loc + 50) // 100)  # round half up
    return DifficultyScore(
        loc_points=loc_points,
        cc_points=CC_POINTS[letter],
        task_points=task_count,
    )


def in_selection_range(score: DifficultyScore) -> bool:
    low, high = SELECTION_RANGE
    return low <= score.total <= high


@dataclass(frozen=True)
class RunStats:
    """Mean and population standard deviation over repeated runs."""

    n: int
    mean: float
    sd: float


def aggregate_runs(values: Sequence[float]) -> RunStats:
    if not values:
        raise ValueError("cannot aggregate an empty value list")
    mean = statistics.fmean(values)
    sd = statistics.pstdev(values) if len(values) > 1 else 0.0
    return RunStats(n=len(values), mean=mean, sd=sd)


def normalize_durations(durations: Sequence[float]) -> list[float]:
    """Z-score each duration; a constant series normalizes to all zeros."""
    if not durations:
        raise ValueError("cannot normalize an empty duration list")
    mean = statistics.fmean(durations)
    sd = statistics.pstdev(durations)
    if sd == 0:
        return [0.0 for _ in durations]
    return [(value - mean) / sd for value in durations]


@dataclass(frozen=True)
class TemperatureScore:
    """Combined quality score for one temperature setting.

    Averaged fulfilled requirements reward correctness; half the
    averaged error count is subtracted as a penalty.
    """

    temperature: float
    avg_requirements: float
    avg_errors: float

    @property
    def score(self) -> float:
        return self.avg_requirements - self.avg_errors / 2.0


def select_temperature(scores: Sequence[TemperatureScore]) -> float:
    """Pick the temperature with the best combined score; ties go to
    the lower temperature."""
    if not scores:
        raise EmptyScores("no temperature scores to select from")
    seen = set()
    for entry in scores:
        if entry.temperature in seen:
            raise ValueError(f"duplicate score for temperature {entry.temperature}")
        seen.add(entry.temperature)
    return max(scores, key=lambda s: (s.score, -s.temperature)).temperature


# --- comparison report -------------------------------------------------

@dataclass(frozen=True)
class FileFeatures:
    """Per-file difficulty features recorded alongside the dataset."""

    loc: int
    cc_letter: str
    task_count: int


@dataclass(frozen=True)
class CheckMarkRecord:
    """Check marks earned by one (file, model) pair under one method."""

    file_id: str
    model: str
    marks: CheckMarks


LOC_BANDS = (
    ("<100", 0, 100),
    ("100-199", 100, 200),
    ("200-299", 200, 300),
    (">=300", 300, None),
)

CC_GROUPS = (
    ("A-B", ("A", "B")),
    ("C-D", ("C", "D")),
    ("E-F", ("E", "F")),
)


@dataclass(frozen=True)
class BucketDelta:
    label: str
    vapu: int
    baseline: int

    @property
    def delta(self) -> int:
        return self.vapu - self.baseline


@dataclass(frozen=True)
class MethodTotals:
    first: int
    second: int
    third: int
    records: int

    @property
    def total(self) -> int:
        return self.first + self.second + self.third

    @property
    def possible(self) -> int:
        return 3 * self.records

    @property
    def pass_rate(self) -> float:
        return 100.0 * self.total / self.possible if self.possible else 0.0


@dataclass(frozen=True)
class ModelTotals:
    model: str
    total: int
    records: int

    @property
    def possible(self) -> int:
        return 3 * self.records

    @property
    def pass_rate(self) -> float:
        return 100.0 * self.total / self.possible if self.possible else 0.0


@dataclass
class ComparisonReport:
    """Check-mark comparison between the pipeline and a baseline method."""

    vapu_totals: MethodTotals
    baseline_totals: MethodTotals
    vapu_models: tuple[ModelTotals, ...]
    baseline_models: tuple[ModelTotals, ...]
    loc_bands: tuple[BucketDelta, ...]
    cc_groups: tuple[BucketDelta, ...]
    task_counts: tuple[BucketDelta, ...]

    @property
    def overall_delta(self) -> int:
        return self.vapu_totals.total - self.baseline_totals.total

    def to_dict(self) -> dict:
        def method(t: MethodTotals) -> dict:
            return {
                "first": t.first, "second": t.second, "third": t.third,
                "total": t.total, "records": t.records, "possible": t.possible,
                "pass_rate": t.pass_rate,
            }

        def models(entries: tuple[ModelTotals, ...]) -> list[dict]:
            return [
                {"model": m.model, "total": m.total, "possible": m.possible,
                 "pass_rate": m.pass_rate}
                for m in entries
            ]

        def buckets(entries: tuple[BucketDelta, ...]) -> list[dict]:
            return [
                {"bucket": b.label, "vapu": b.vapu, "baseline": b.baseline, "delta": b.delta}
                for b in entries
            ]

        return {
            "vapu": method(self.vapu_totals),
            "baseline": method(self.baseline_totals),
            "overall_delta": self.overall_delta,
            "models": {"vapu": models(self.vapu_models), "baseline": models(self.baseline_models)},
            "loc_bands": buckets(self.loc_bands),
            "cc_groups": buckets(self.cc_groups),
            "task_counts": buckets(self.task_counts),
        }

    def to_rows(self) -> list[tuple[str, ...]]:
        """Flat delimited-table form, one row per figure."""
        rows: list[tuple[str, ...]] = [("section", "key", "vapu", "baseline", "delta")]
        rows.append((
            "totals", "check_marks",
            str(self.vapu_totals.total), str(self.baseline_totals.total),
            str(self.overall_delta),
        ))
        rows.append((
            "totals", "pass_rate_pct",
            f"{self.vapu_totals.pass_rate:.1f}", f"{self.baseline_totals.pass_rate:.1f}",
            f"{self.vapu_totals.pass_rate - self.baseline_totals.pass_rate:.1f}",
        ))
        for name, vapu_flag, baseline_flag in (
            ("first_marks", self.vapu_totals.first, self.baseline_totals.first),
            ("second_marks", self.vapu_totals.second, self.baseline_totals.second),
            ("third_marks", self.vapu_totals.third, self.baseline_totals.third),
        ):
            rows.append(("totals", name, str(vapu_flag), str(baseline_flag),
                         str(vapu_flag - baseline_flag)))
        baseline_by_model = {m.model: m for m in self.baseline_models}
        for entry in self.vapu_models:
            other = baseline_by_model.get(entry.model)
            rows.append((
                "models", entry.model, str(entry.total),
                str(other.total) if other else "",
                str(entry.total - other.total) if other else "",
            ))
        for section, buckets in (
            ("loc_band", self.loc_bands),
            ("cc_group", self.cc_groups),
            ("task_count", self.task_counts),
        ):
            for bucket in buckets:
                rows.append((section, bucket.label, str(bucket.vapu),
                             str(bucket.baseline), str(bucket.delta)))
        return rows

    def to_text(self) -> str:
        lines = [
            "Check-mark comparison (pipeline vs baseline)",
            "",
            f"  pipeline : {self.vapu_totals.total}/{self.vapu_totals.possible} marks "
            f"({self.vapu_totals.pass_rate:.1f}%) "
            f"[{self.vapu_totals.first}/{self.vapu_totals.second}/{self.vapu_totals.third}]",
            f"  baseline : {self.baseline_totals.total}/{self.baseline_totals.possible} marks "
            f"({self.baseline_totals.pass_rate:.1f}%) "
            f"[{self.baseline_totals.first}/{self.baseline_totals.second}/{self.baseline_totals.third}]",
            f"  overall delta: {self.overall_delta:+d}",
            "",
            "Per model (pipeline vs baseline):",
        ]
        baseline_by_model = {m.model: m for m in self.baseline_models}
        for entry in self.vapu_models:
            other = baseline_by_model.get(entry.model)
            if other:
                lines.append(
                    f"  {entry.model}: {entry.total} vs {other.total} "
                    f"({entry.pass_rate:.1f}% vs {other.pass_rate:.1f}%)"
                )
        for title, buckets in (
            ("By LOC band:", self.loc_bands),
            ("By complexity grade:", self.cc_groups),
            ("By task count:", self.task_counts),
        ):
            lines.append("")
            lines.append(title)
            for bucket in buckets:
                lines.append(
                    f"  {bucket.label}: {bucket.vapu} vs {bucket.baseline} ({bucket.delta:+d})"
                )
        return "\n".join(lines) + "\n"


def _method_totals(records: Sequence[CheckMarkRecord]) -> MethodTotals:
    flags = [record.marks.flags() for record in records]
    return MethodTotals(
        first=sum(f[0] for f in flags),
        second=sum(f[1] for f in flags),
        third=sum(f[2] for f in flags),
        records=len(records),
    )


def _model_totals(records: Sequence[CheckMarkRecord]) -> tuple[ModelTotals, ...]:
    by_model: dict[str, list[CheckMarkRecord]] = {}
    for record in records:
        by_model.setdefault(record.model, []).append(record)
    return tuple(
        ModelTotals(
            model=model,
            total=sum(score_checkmarks(r.marks) for r in group),
            records=len(group),
        )
        for model, group in sorted(by_model.items())
    )


def _bucket_sums(records: Sequence[CheckMarkRecord],
                 bucket_of: Callable[[str], str | None],
                 labels: Iterable[str]) -> dict[str, int]:
    sums = {label: 0 for label in labels}
    for record in records:
        label = bucket_of(record.file_id)
        if label is not None:
            sums[label] += score_checkmarks(record.marks)
    return sums


def build_comparison_report(
    vapu_runs: Sequence[CheckMarkRecord],
    baseline_runs: Sequence[CheckMarkRecord],
    features: Mapping[str, FileFeatures],
) -> ComparisonReport:
    """Aggregate two scored run sets into the side-by-side report.

    Both sets must cover the same files, and every file needs its
    difficulty features for the bucketed delta tables.
    """
    vapu_files = {record.file_id for record in vapu_runs}
    baseline_files = {record.file_id for record in baseline_runs}
    if vapu_files != baseline_files:
        raise ValueError(
            f"run sets score different files: only-pipeline={sorted(vapu_files - baseline_files)}, "
            f"only-baseline={sorted(baseline_files - vapu_files)}"
        )
    missing = sorted(vapu_files - set(features))
    if missing:
        raise ValueError(f"missing difficulty features for files: {missing}")

    def loc_band(file_id: str) -> str | None:
        loc = features[file_id].loc
        for label, low, high in LOC_BANDS:
            if loc >= low and (high is None or loc < high):
                return label
        return None

    def cc_group(file_id: str) -> str | None:
        letter = features[file_id].cc_letter.upper()
        for label, letters in CC_GROUPS:
            if letter in letters:
                return label
        return None

    task_labels = sorted({str(f.task_count) for f in features.values()}, key=int)

    def task_bucket(file_id: str) -> str:
        return str(features[file_id].task_count)

    def deltas(bucket_of: Callable[[str], str | None], labels: Iterable[str]) -> tuple[BucketDelta, ...]:
        labels = list(labels)
        vapu_sums = _bucket_sums(vapu_runs, bucket_of, labels)
        baseline_sums = _bucket_sums(baseline_runs, bucket_of, labels)
        return tuple(
            BucketDelta(label=label, vapu=vapu_sums[label], baseline=baseline_sums[label])
            for label in labels
        )

    return ComparisonReport(
        vapu_totals=_method_totals(vapu_runs),
        baseline_totals=_method_totals(baseline_runs),
        vapu_models=_model_totals(vapu_runs),
        baseline_models=_model_totals(baseline_runs),
        loc_bands=deltas(loc_band, [label for label, _, _ in LOC_BANDS]),
        cc_groups=deltas(cc_group, [label for label, _ in CC_GROUPS]),
        task_counts=deltas(task_bucket, task_labels),
    )


# --- annotations file and transcript scoring ----------------------------
#
# Runtime, content and missing-feature errors come from human inspection
# of the updated files, as do requirement outcomes and check marks; the
# annotations file is how those observations enter the harness.

@dataclass
class Annotations:
    """Parsed annotations: human observations keyed for the merge step."""

    findings: dict[str, list[Finding]] = field(default_factory=dict)
    requirements: dict[str, list[RequirementResult]] = field(default_factory=dict)
    checkmarks: dict[tuple[str, str, str], CheckMarks] = field(default_factory=dict)
    features: dict[str, FileFeatures] = field(default_factory=dict)


def load_annotations(path: Path) -> Annotations:
    """Read the JSON annotations file.

    Sections (all optional): findings per run, requirement results per
    run, check marks per (file, model, method), and per-file features.
    """
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigInvalid(f"annotations file {path} is not valid JSON: {exc}") from exc
    annotations = Annotations()
    for entry in data.get("findings", []):
        finding = Finding(
            category=ErrorCategory(entry["category"]),
            cause_key=entry["cause_key"],
            description=entry.get("description", ""),
            source=FindingSource.HUMAN_ANNOTATION,
        )
        annotations.findings.setdefault(entry["run_id"], []).append(finding)
    for entry in data.get("requirements", []):
        result = RequirementResult(
            requirement_id=entry["requirement_id"],
            value=int(entry["value"]),
        )
        annotations.requirements.setdefault(entry["run_id"], []).append(result)
    for entry in data.get("checkmarks", []):
        key = (entry["file_id"], entry["model"], entry["method"])
        annotations.checkmarks[key] = CheckMarks(
            updates_present_and_plausible=bool(entry["updates_present_and_plausible"]),
            basic_functions_ok=bool(entry["basic_functions_ok"]),
            all_requirements_correct=bool(entry["all_requirements_correct"]),
        )
    for entry in data.get("files", []):
        annotations.features[entry["file_id"]] = FileFeatures(
            loc=int(entry["loc"]),
            cc_letter=entry["cc_letter"],
            task_count=int(entry["task_count"]),
        )
    return annotations


def score_transcript(transcript, annotations: Annotations,
                     checkers: Mapping[str, SyntaxCheckerHook] | None = None) -> dict:
    """Merge one run transcript with annotations into a scored record.

    The error count combines annotated findings with the automated
    fatal check on the final code (skipped when no checker covers the
    language); deduplication happens in the per-run ledger.
    """
    checkers = checkers if checkers is not None else default_checkers()
    config = transcript.config
    file_id = Path(transcript.inputs["code"]["path"]).stem
    ledger = RunErrorLedger(run_id=transcript.run_id)
    for finding in annotations.findings.get(transcript.run_id, []):
        ledger.record(finding)
    final_code = None
    if transcript.status == "completed" and transcript.outcome.get("final_code"):
        final_code = CodeDocument.from_dict(transcript.outcome["final_code"])
        try:
            for finding in check_fatal(final_code, checkers):
                ledger.record(finding)
        except CheckerUnavailable:
            pass  # only annotatable categories for this language
    requirement_entries = annotations.requirements.get(transcript.run_id, [])
    marks = annotations.checkmarks.get((file_id, config["model"], config["method"]))
    features = annotations.features.get(file_id)
    record = {
        "run_id": transcript.run_id,
        "file_id": file_id,
        "model": config["model"],
        "method": config["method"],
        "temperature": config["temperature"],
        "repetition": transcript.inputs.get("repetition", 1),
        "status": transcript.status,
        "duration": transcript.duration,
        "error_count": len(ledger),
        "errors_by_category": {cat.value: n for cat, n in ledger.by_category().items()},
        "requirement_score": (score_requirements(requirement_entries)
                              if requirement_entries else None),
        "requirement_total": len(requirement_entries) or None,
        "checkmarks": (
            {
                "updates_present_and_plausible": marks.updates_present_and_plausible,
                "basic_functions_ok": marks.basic_functions_ok,
                "all_requirements_correct": marks.all_requirements_correct,
                "score": score_checkmarks(marks),
            }
            if marks else None
        ),
        "features": (
            {"loc": features.loc, "cc_letter": features.cc_letter,
             "task_count": features.task_count}
            if features else None
        ),
        "loc_final": final_code.loc if final_code else None,
        "unverified": transcript.outcome.get("unverified"),
        "truncated": transcript.outcome.get("truncated"),
    }
    return record


def aggregate_records(records: Sequence[dict]) -> list[dict]:
    """Mean/SD summaries per (file, method, model, temperature) group.

    Durations are z-scored within each group so long runs can be
    compared against their error and requirement outcomes.
    """
    groups: dict[tuple, list[dict]] = {}
    for record in records:
        key = (record["file_id"], record["method"], record["model"], record["temperature"])
        groups.setdefault(key, []).append(record)
    summaries = []
    for key, members in sorted(groups.items()):
        file_id, method, model, temperature = key
        errors = [m["error_count"] for m in members]
        error_stats = aggregate_runs(errors)
        summary = {
            "file_id": file_id,
            "method": method,
            "model": model,
            "temperature": temperature,
            "n": len(members),
            "error_mean": error_stats.mean,
            "error_sd": error_stats.sd,
        }
        requirement_scores = [m["requirement_score"] for m in members
                              if m["requirement_score"] is not None]
        if requirement_scores:
            requirement_stats = aggregate_runs(requirement_scores)
            summary["requirement_mean"] = requirement_stats.mean
            summary["requirement_sd"] = requirement_stats.sd
        durations = [m["duration"] for m in members]
        duration_stats = aggregate_runs(durations)
        summary["duration_mean"] = duration_stats.mean
        summary["duration_sd"] = duration_stats.sd
        summary["normalized_durations"] = normalize_durations(durations)
        summaries.append(summary)
    return summaries


def records_for_report(records: Sequence[dict]) -> tuple[list[CheckMarkRecord], dict[str, FileFeatures]]:
    """Extract check-mark records and features from scored records."""
    marks: list[CheckMarkRecord] = []
    features: dict[str, FileFeatures] = {}
    for record in records:
        if record.get("checkmarks") is None:
            continue
        cm = record["checkmarks"]
        marks.append(CheckMarkRecord(
            file_id=record["file_id"],
            model=record["model"],
            marks=CheckMarks(
                updates_present_and_plausible=bool(cm["updates_present_and_plausible"]),
                basic_functions_ok=bool(cm["basic_functions_ok"]),
                all_requirements_correct=bool(cm["all_requirements_correct"]),
            ),
        ))
        if record.get("features"):
            f = record["features"]
            features[record["file_id"]] = FileFeatures(
                loc=int(f["loc"]), cc_letter=f["cc_letter"], task_count=int(f["task_count"]),
            )
    return marks, features
