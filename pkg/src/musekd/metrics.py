"""In-memory metrics log and its CSV form."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

CSV_HEADER = ("run_id", "epoch", "step", "split", "module", "metric", "value")


@dataclass
class MetricsLog:
    run_id: str = "run"
    rows: list[tuple] = field(default_factory=list)

    def add(self, epoch: int, step: int, split: str, module, metric: str, value: float) -> None:
        module = "" if module is None else module
        self.rows.append((self.run_id, epoch, step, split, module, metric, float(value)))

    def add_report(self, epoch: int, step: int, report, split: str = "train") -> None:
        """One row per finite scalar of a LossReport. Modules are 1-based."""
        for metric, values in (
            ("ce", report.ce),
            ("kd", report.kd),
            ("mi_loss", report.mi),
            ("si_loss", report.si),
            ("muse", report.muse),
        ):
            for t, v in enumerate(values, start=1):
                if not math.isnan(v):
                    self.add(epoch, step, split, t, metric, v)
        if not math.isnan(getattr(report, "kd_final", math.nan)):
            self.add(epoch, step, split, len(report.ce), "kd", report.kd_final)
        self.add(epoch, step, split, None, "total", report.total)

    def select(self, metric: str, split: str | None = None, module=None, epoch=None) -> list[tuple]:
        out = []
        for row in self.rows:
            if row[5] != metric:
                continue
            if split is not None and row[3] != split:
                continue
            if module is not None and row[4] != module:
                continue
            if epoch is not None and row[1] != epoch:
                continue
            out.append(row)
        return out

    def values(self, metric: str, split: str | None = None, module=None, epoch=None) -> list[float]:
        return [r[6] for r in self.select(metric, split, module, epoch)]

    def last_epoch(self) -> int:
        return max((r[1] for r in self.rows), default=-1)

    def top1(self, split: str = "test", epoch: int | None = None) -> list[float]:
        """Per-module top-1 (percent) at ``epoch`` (default: the last one)."""
        epoch = self.last_epoch() if epoch is None else epoch
        rows = sorted(self.select("top1", split, epoch=epoch), key=lambda r: r[4])
        return [r[6] for r in rows]


def emit_metrics(log: MetricsLog, path) -> Path:
    """Write the log as CSV with the fixed header."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for row in log.rows:
            writer.writerow(row[:6] + (repr(row[6]),))
    return path


def read_metrics(path) -> MetricsLog:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != CSV_HEADER:
            raise ValueError(f"unexpected metrics header {header}")
        log = None
        for run_id, epoch, step, split, module, metric, value in reader:
            if log is None:
                log = MetricsLog(run_id)
            module = int(module) if module else ""
            log.rows.append((run_id, int(epoch), int(step), split, module, metric, float(value)))
    return log if log is not None else MetricsLog()
