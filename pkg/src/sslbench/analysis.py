"""Error conversion, paired relative improvements and per-task rankings."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

log = logging.getLogger(__name__)

SCORE_METRICS = {"mF1", "mPrecision", "mRecall", "Accuracy", "AP", "AP50", "AP75", "mDice", "mIoU"}
ERROR_METRICS = {"mRMSE", "mMRAE", "mMAE", "mSSI-MSE"}
PRIMARY_METRIC = {
    "classification": "mF1",
    "detection": "AP",
    "segmentation": "mDice",
    "depth": "mRMSE",
}
ARCHITECTURES = ("conv", "vit")
PRETRAIN_DATA = ("domain-set", "general-set", "none")
ALGORITHMS = ("mocov3", "barlow", "mae", "supervised", "none")
SSL_ALGORITHMS = ("mocov3", "barlow", "mae")


class AnalysisError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class PipelineTag:
    architecture: str
    data: str
    algorithm: str

    def __post_init__(self) -> None:
        if self.architecture not in ARCHITECTURES:
            raise AnalysisError(f"unknown architecture {self.architecture!r}")
        if self.data not in PRETRAIN_DATA:
            raise AnalysisError(f"unknown pretraining data {self.data!r}")
        if self.algorithm not in ALGORITHMS:
            raise AnalysisError(f"unknown algorithm {self.algorithm!r}")
        if self.algorithm == "mae" and self.architecture != "vit":
            raise AnalysisError("MAE requires the token (vit) architecture")
        if (self.algorithm == "none") != (self.data == "none"):
            raise AnalysisError("algorithm 'none' pairs only with data 'none'")

    @property
    def label(self) -> str:
        arch = {"conv": "RN", "vit": "VT"}[self.architecture]
        data = {"domain-set": "HK", "general-set": "IN", "none": "NA"}[self.data]
        algo = {"mocov3": "MC", "barlow": "BT", "mae": "MA", "supervised": "SL", "none": "NA"}[self.algorithm]
        return f"{arch}-{data}-{algo}"


@dataclass(frozen=True)
class ErrorValue:
    delta: float
    metric: str
    note: str


@dataclass
class MetricReport:
    task: str
    metrics: dict[str, float]
    tag: PipelineTag | None = None
    flags: tuple[str, ...] = ()
    provenance: dict | None = None


def to_error(score: float, metric: str) -> ErrorValue:
    """Score metrics become ``|1 - score|``; error metrics pass through."""
    if metric in ERROR_METRICS:
        if score < 0:
            raise AnalysisError(f"{metric} must be non-negative, got {score}")
        return ErrorValue(float(score), metric, "already an error")
    if metric in SCORE_METRICS:
        if not 0.0 <= score <= 1.0:
            raise AnalysisError(f"score metric {metric} outside [0, 1]: {score}")
        return ErrorValue(abs(1.0 - float(score)), metric, "1 - score")
    raise AnalysisError(f"unknown metric {metric!r}")


def improvement(base: ErrorValue | float, new: ErrorValue | float) -> float:
    """Relative error reduction in percent, positive when ``new`` is better."""
    db = base.delta if isinstance(base, ErrorValue) else float(base)
    dn = new.delta if isinstance(new, ErrorValue) else float(new)
    if db == 0:
        raise AnalysisError("undefined relative improvement: base error is 0")
    return 100.0 * (db - dn) / db


def rank_models(reports: Sequence[MetricReport], metric: str | None = None) -> list[MetricReport]:
    """Best-first order on the task's primary metric; ties broken by tag."""
    if not reports:
        return []
    tasks = {r.task for r in reports}
    if len(tasks) != 1:
        raise AnalysisError(f"mixed tasks in ranking: {sorted(tasks)}")
    metric = metric or PRIMARY_METRIC[reports[0].task]
    sign = 1.0 if metric in ERROR_METRICS else -1.0
    return sorted(reports, key=lambda r: (sign * r.metrics[metric], r.tag or PipelineTag("conv", "none", "none")))


# --------------------------------------------------------------------------
# pairings


@dataclass
class Comparison:
    kind: str
    task: str
    metric: str
    base: str
    new: str
    delta_base: float
    delta_new: float
    percent: float


def _index(reports: Iterable[MetricReport]) -> dict[tuple[str, PipelineTag], MetricReport]:
    out = {}
    for r in reports:
        if r.tag is None:
            continue
        out[(r.task, r.tag)] = r
    return out


def _compare(kind: str, base: MetricReport, new: MetricReport) -> Comparison:
    metric = PRIMARY_METRIC[base.task]
    db = to_error(base.metrics[metric], metric)
    dn = to_error(new.metrics[metric], metric)
    return Comparison(kind, base.task, metric, base.tag.label, new.tag.label, db.delta, dn.delta, improvement(db, dn))


def pair_reports(reports: Sequence[MetricReport]) -> tuple[dict[str, list[Comparison]], list[str]]:
    """Build the three comparison tables.

    * ``SL->SSL``: self-supervised vs supervised, same architecture and task,
      general pretraining set only.
    * ``IN->HK``: domain vs general pretraining set, same architecture,
      self-supervised algorithm and task.
    * ``RN->VT``: token vs conv encoder for the same pipeline and task, only
      for pipelines both architectures share.

    Returns the tables and a list of exclusion reasons.
    """
    idx = _index(reports)
    tables: dict[str, list[Comparison]] = {"SL->SSL": [], "IN->HK": [], "RN->VT": []}
    skipped: list[str] = []

    def add(kind: str, base: MetricReport, new: MetricReport) -> None:
        try:
            tables[kind].append(_compare(kind, base, new))
        except AnalysisError as e:
            # e.g. a perfect baseline score leaves the relative improvement undefined
            skipped.append(f"{kind} {base.tag.label}->{new.tag.label}/{base.task}: {e}")

    for (task, tag), rep in sorted(idx.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        metric = PRIMARY_METRIC[task]
        if metric not in rep.metrics:
            skipped.append(f"{tag.label}/{task}: missing primary metric {metric}")
            continue
        if tag.algorithm in SSL_ALGORITHMS and tag.data == "general-set":
            base = idx.get((task, PipelineTag(tag.architecture, "general-set", "supervised")))
            if base is not None:
                add("SL->SSL", base, rep)
            else:
                skipped.append(f"{tag.label}/{task}: no supervised counterpart")
        if tag.algorithm in SSL_ALGORITHMS and tag.data == "domain-set":
            base = idx.get((task, PipelineTag(tag.architecture, "general-set", tag.algorithm)))
            if base is not None:
                add("IN->HK", base, rep)
            else:
                skipped.append(f"{tag.label}/{task}: no general-set counterpart")
        if tag.architecture == "vit":
            try:
                conv_tag = PipelineTag("conv", tag.data, tag.algorithm)
            except AnalysisError:
                conv_tag = None
            base = idx.get((task, conv_tag)) if conv_tag else None
            if base is not None:
                add("RN->VT", base, rep)
            else:
                skipped.append(f"{tag.label}/{task}: pipeline not shared by both architectures")
    # reports whose task has no tag in the index were dropped up front
    for r in reports:
        if r.tag is None:
            skipped.append(f"untagged {r.task} report excluded")
    for s in skipped:
        log.info("excluded from pairing: %s", s)
    return tables, skipped


def rankings(reports: Sequence[MetricReport]) -> dict[str, list[str]]:
    by_task: dict[str, list[MetricReport]] = {}
    for r in reports:
        if r.tag is not None:
            by_task.setdefault(r.task, []).append(r)
    return {task: [r.tag.label for r in rank_models(rs)] for task, rs in sorted(by_task.items())}


# --------------------------------------------------------------------------
# output


def comparisons_csv(tables: dict[str, list[Comparison]]) -> str:
    buf = io.StringIO()
    fields = list(Comparison.__dataclass_fields__)
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for kind in tables:
        for c in tables[kind]:
            w.writerow(asdict(c))
    return buf.getvalue()


def write_analysis(reports: Sequence[MetricReport], out_dir: str | Path, plots: bool = True) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tables, skipped = pair_reports(reports)
    ranks = rankings(reports)
    paths = {"csv": out_dir / "comparisons.csv", "json": out_dir / "analysis.json"}
    paths["csv"].write_text(comparisons_csv(tables))
    paths["json"].write_text(
        json.dumps(
            {
                "comparisons": {k: [asdict(c) for c in v] for k, v in tables.items()},
                "rankings": ranks,
                "excluded": skipped,
            },
            indent=2,
            sort_keys=True,
        )
    )
    if plots:
        from . import plots as _plots

        for kind, rows in tables.items():
            p = out_dir / f"improvement_{kind.replace('->', '_to_').replace('-', '')}.png"
            _plots.improvement_bars(rows, kind, p)
            paths[f"plot:{kind}"] = p
        p = out_dir / "ranking_radar.png"
        _plots.ranking_radar(ranks, p)
        paths["plot:ranking"] = p
    return paths
