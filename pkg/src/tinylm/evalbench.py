"""Accuracy protocol (first-k-token label matching), per-class metrics with
macro-F1, and the multi-instance / background-load throughput harness."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import infer
from . import model as m
from .tokenizer import Tokenizer

log = logging.getLogger(__name__)

INVALID = "invalid"


@dataclass
class EvalCase:
    prompt: str
    expected_label: str
    label_set: list[str]

    def __post_init__(self) -> None:
        folded = [label.casefold() for label in self.label_set]
        if self.expected_label not in self.label_set:
            raise ValueError(f"expected label {self.expected_label!r} not in label set")
        for i, a in enumerate(folded):
            for j, b in enumerate(folded):
                if i != j and b.startswith(a):
                    raise ValueError(
                        f"label {self.label_set[i]!r} is a case-folded prefix of "
                        f"{self.label_set[j]!r}; labels must be mutually non-prefixing"
                    )


def load_cases(path: str | Path) -> list[EvalCase]:
    """JSON-lines input with keys prompt/expected/labels."""
    cases = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                cases.append(
                    EvalCase(
                        prompt=obj["prompt"],
                        expected_label=obj["expected"],
                        label_set=list(obj["labels"]),
                    )
                )
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return cases


def match_label(generated: str, case: EvalCase) -> str | None:
    """Predict the earliest label occurring in the generated text after
    line breaks are treated as spaces and case is folded. None means the
    output was gibberish or empty (counted as incorrect)."""
    text = " ".join(generated.replace("\r", "\n").split("\n")).strip().casefold()
    best: tuple[int, str] | None = None
    for label in case.label_set:
        pos = text.find(label.casefold())
        if pos >= 0 and (best is None or pos < best[0]):
            best = (pos, label)
    return best[1] if best else None


@dataclass
class EvalSummary:
    total: int
    correct: int
    accuracy: float  # percent
    per_class: dict[str, dict[str, float]]  # label -> precision/recall/f1/support
    macro_f1: float
    confusion: dict[str, dict[str, int]]  # expected -> predicted (or invalid) -> count
    invalid_count: int


def summarize_predictions(
    cases: Sequence[EvalCase], predictions: Sequence[str | None]
) -> EvalSummary:
    """Confusion counts and metrics from per-case predicted labels. An
    invalid (None) prediction is a false negative for the expected class and
    a false positive for none."""
    if len(cases) != len(predictions):
        raise ValueError("predictions length mismatch")
    if not cases:
        raise ValueError("no cases")
    labels: list[str] = []
    for case in cases:
        for label in case.label_set:
            if label not in labels:
                labels.append(label)
    confusion: dict[str, dict[str, int]] = {lab: {} for lab in labels}
    correct = 0
    invalid_count = 0
    for case, pred in zip(cases, predictions):
        bucket = pred if pred is not None else INVALID
        row = confusion.setdefault(case.expected_label, {})
        row[bucket] = row.get(bucket, 0) + 1
        if pred == case.expected_label:
            correct += 1
        if pred is None:
            invalid_count += 1

    per_class: dict[str, dict[str, float]] = {}
    f1s = []
    for label in labels:
        tp = confusion.get(label, {}).get(label, 0)
        fn = sum(confusion.get(label, {}).values()) - tp
        fp = sum(
            row.get(label, 0) for expected, row in confusion.items() if expected != label
        )
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        per_class[label] = {
            "precision": precision,
            "recall": recall,
            "f1": f1,
            "support": float(tp + fn),
        }
        f1s.append(f1)
    total = len(cases)
    return EvalSummary(
        total=total,
        correct=correct,
        accuracy=100.0 * correct / total,
        per_class=per_class,
        macro_f1=float(np.mean(f1s)) if f1s else 0.0,
        confusion=confusion,
        invalid_count=invalid_count,
    )


def evaluate(
    cfg: m.ModelConfig,
    w: m.Weights,
    tok: Tokenizer,
    cases: Sequence[EvalCase],
    gen_params: infer.GenerationParams | None = None,
    k: int = 4,
    predict_fn: Callable[[EvalCase], str | None] | None = None,
) -> EvalSummary:
    """Generate k tokens per case (greedy by default) and score label
    matches. ``predict_fn`` substitutes the generation+matching step, for
    harness-level tests and custom decoders."""
    if not cases:
        raise ValueError("no cases")
    if predict_fn is None:
        params = gen_params or infer.GenerationParams(temperature=0.0)
        params = replace(params, max_new_tokens=k)

        def predict_fn(case: EvalCase) -> str | None:
            try:
                report = infer.generate(cfg, w, tok, case.prompt, params)
            except ValueError as exc:
                log.warning("case marked invalid: %s", exc)
                return None
            return match_label(report.generated_text, case)

    return summarize_predictions(cases, [predict_fn(case) for case in cases])


# ---------------------------------------------------------------------------
# throughput harness

@dataclass
class BenchResult:
    instance_count: int
    rates: list[float]  # per-instance eval tokens/second
    aggregate_rate: float
    background: str
    wall_times: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        if len(self.rates) != self.instance_count:
            raise ValueError("rates length must equal instance_count")


def bench_generate(
    cfg: m.ModelConfig,
    w: m.Weights,
    tok: Tokenizer,
    prompt: str,
    params: infer.GenerationParams,
    instances: int = 1,
    background: Sequence[tuple[m.ModelConfig, m.Weights]] = (),
) -> BenchResult:
    """Run ``instances`` concurrent generations of the same prompt and report
    per-instance eval rates. Background models are held in memory but never
    invoked."""
    if instances < 1:
        raise ValueError("instances must be >= 1")
    _hold = list(background)  # loaded-but-idle residency

    def one(i: int) -> infer.GenerationReport:
        return infer.generate(cfg, w, tok, prompt, replace(params, seed=params.seed + i))

    if instances == 1:
        reports = [one(0)]
    else:
        with ThreadPoolExecutor(max_workers=instances) as pool:
            reports = list(pool.map(one, range(instances)))
    rates = [r.eval_rate for r in reports]
    return BenchResult(
        instance_count=instances,
        rates=rates,
        aggregate_rate=float(sum(rates)),
        background=f"{len(_hold)} idle model(s)" if _hold else "none",
        wall_times=[r.wall_time for r in reports],
    )


# ---------------------------------------------------------------------------
# reports

def emit_eval_report(summary: EvalSummary, path: str | Path) -> Path:
    """CSV: one row per class plus a summary row; a .txt table next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("class,precision,recall,f1\n")
        for label, stats in summary.per_class.items():
            fh.write(f"{label},{stats['precision']:.6f},{stats['recall']:.6f},{stats['f1']:.6f}\n")
        fh.write(f"__summary__,accuracy={summary.accuracy:.4f},macro_f1={summary.macro_f1:.6f},")
        fh.write(f"invalid={summary.invalid_count}\n")
    txt = path.with_suffix(".txt")
    with open(txt, "w", encoding="utf-8") as fh:
        fh.write(f"cases: {summary.total}  correct: {summary.correct}  ")
        fh.write(f"accuracy: {summary.accuracy:.2f}%  macro-F1: {summary.macro_f1:.4f}\n")
        fh.write(f"{'class':<16}{'precision':>10}{'recall':>10}{'f1':>10}\n")
        for label, stats in summary.per_class.items():
            fh.write(
                f"{label:<16}{stats['precision']:>10.4f}{stats['recall']:>10.4f}{stats['f1']:>10.4f}\n"
            )
    return path


def emit_bench_report(results: Sequence[BenchResult], path: str | Path) -> Path:
    """CSV with one row per (instances, background) cell."""
    if not results:
        raise ValueError("no bench results")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("instances,background,mean_rate,aggregate_rate,per_instance_rates\n")
        for res in results:
            rates = ";".join(f"{r:.3f}" for r in res.rates)
            fh.write(
                f"{res.instance_count},{res.background},{np.mean(res.rates):.3f},"
                f"{res.aggregate_rate:.3f},{rates}\n"
            )
    return path
