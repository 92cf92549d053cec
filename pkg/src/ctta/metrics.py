"""Online error bookkeeping and CSV export."""

from __future__ import annotations

import csv
import io
from collections import OrderedDict
from dataclasses import astuple, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError
from .stream import SegmentInfo

LOG_COLUMNS = ("step", "round", "kind", "severity", "error", "conf", "loss", "restored_frac")
SUMMARY_COLUMNS = ("scope", "kind_or_round", "mean_error")


@dataclass(frozen=True)
class LogRow:
    step: int
    round: int
    kind: str
    severity: int
    error: float
    conf: float
    loss: float
    restored_frac: float
    segment: int = 0


@dataclass
class MetricsLog:
    rows: list[LogRow] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def errors(self) -> np.ndarray:
        return np.array([r.error for r in self.rows])

    def mean_error(self) -> float:
        return float(self.errors.mean()) if self.rows else float("nan")


def batch_error(probs: np.ndarray, labels: np.ndarray) -> float:
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    if probs.ndim != 2 or len(probs) != len(labels):
        raise ContractError(f"prediction batch {probs.shape} does not match {len(labels)} labels")
    return float((probs.argmax(axis=1) != labels).mean())


def record(
    log: MetricsLog,
    info: SegmentInfo,
    probs: np.ndarray,
    labels: np.ndarray,
    loss: float = float("nan"),
    restored_frac: float = 0.0,
) -> LogRow:
    """Append one online-evaluation row; ``step`` must exceed the previous one."""
    err = batch_error(probs, labels)
    if log.rows and info.step <= log.rows[-1].step:
        raise ContractError(f"log steps must increase: got {info.step} after {log.rows[-1].step}")
    conf = float(np.asarray(probs).max(axis=1).mean())
    row = LogRow(info.step, info.round, info.kind, info.severity, err, conf, float(loss), float(restored_frac), info.segment)
    log.rows.append(row)
    return row


@dataclass
class Summary:
    segment_means: "OrderedDict[str, float]"
    segment_counts: "OrderedDict[str, int]"
    kind_means: "OrderedDict[str, float]"
    round_means: "OrderedDict[int, float]"
    overall: float
    forgetting: "OrderedDict[str, float]"  # round R minus round 1, per kind and "all"

    def rows(self) -> list[tuple[str, str, float]]:
        out = [("segment", k, v) for k, v in self.segment_means.items()]
        out += [("kind", k, v) for k, v in self.kind_means.items()]
        out += [("round", str(r), v) for r, v in self.round_means.items()]
        out += [("forgetting", k, v) for k, v in self.forgetting.items()]
        out.append(("overall", "all", self.overall))
        return out


def segment_key(row: LogRow) -> str:
    return f"r{row.round}.s{row.segment:02d}.{row.kind}"


def summarize(log: MetricsLog) -> Summary:
    """Per-segment, per-kind, per-round and overall mean error, plus forgetting deltas."""
    if not log.rows:
        raise ContractError("cannot summarize an empty log")
    seg: OrderedDict[str, list[float]] = OrderedDict()
    kind: OrderedDict[str, list[float]] = OrderedDict()
    rnd: OrderedDict[int, list[float]] = OrderedDict()
    kind_round: dict[tuple[str, int], list[float]] = {}
    for r in log.rows:
        seg.setdefault(segment_key(r), []).append(r.error)
        kind.setdefault(r.kind, []).append(r.error)
        rnd.setdefault(r.round, []).append(r.error)
        kind_round.setdefault((r.kind, r.round), []).append(r.error)
    seg_means = OrderedDict((k, float(np.mean(v))) for k, v in seg.items())
    seg_counts = OrderedDict((k, len(v)) for k, v in seg.items())
    kind_means = OrderedDict((k, float(np.mean(v))) for k, v in kind.items())
    round_means = OrderedDict((k, float(np.mean(v))) for k, v in rnd.items())
    overall = float(np.mean([r.error for r in log.rows]))
    forgetting: OrderedDict[str, float] = OrderedDict()
    rounds = sorted(rnd)
    if len(rounds) > 1:
        first, last = rounds[0], rounds[-1]
        for k in kind_means:
            if (k, first) in kind_round and (k, last) in kind_round:
                forgetting[k] = float(np.mean(kind_round[(k, last)]) - np.mean(kind_round[(k, first)]))
        forgetting["all"] = round_means[last] - round_means[first]
    return Summary(seg_means, seg_counts, kind_means, round_means, overall, forgetting)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _write(path: Path, header: tuple[str, ...], rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    try:
        Path(path).write_bytes(buf.getvalue().encode("utf-8"))
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def export_log_csv(log: MetricsLog, path: str | Path) -> None:
    """Per-batch log: ``step,round,kind,severity,error,conf,loss,restored_frac``."""
    _write(Path(path), LOG_COLUMNS, (astuple(r)[: len(LOG_COLUMNS)] for r in log.rows))


def export_summary_csv(summary: Summary | None, path: str | Path) -> None:
    """Summary table: ``scope,kind_or_round,mean_error``; header only when ``summary`` is None."""
    _write(Path(path), SUMMARY_COLUMNS, summary.rows() if summary is not None else [])


def export_csv(obj: MetricsLog | Summary | None, path: str | Path) -> None:
    if isinstance(obj, MetricsLog):
        export_log_csv(obj, path)
    else:
        export_summary_csv(obj, path)


def read_log_csv(path: str | Path) -> MetricsLog:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != LOG_COLUMNS:
            raise ContractError(f"{path}: unexpected header {reader.fieldnames}")
        rows = []
        for rec in reader:
            rows.append(
                LogRow(
                    int(rec["step"]),
                    int(rec["round"]),
                    rec["kind"],
                    int(rec["severity"]),
                    float(rec["error"]),
                    float(rec["conf"]),
                    float(rec["loss"]),
                    float(rec["restored_frac"]),
                )
            )
    return MetricsLog(rows)


def read_summary_csv(path: str | Path) -> list[tuple[str, str, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != SUMMARY_COLUMNS:
            raise ContractError(f"{path}: unexpected header {reader.fieldnames}")
        return [(r["scope"], r["kind_or_round"], float(r["mean_error"])) for r in reader]

