"""Full-reference evaluation: RMSE in physical units and PSNR on normalized data."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

REPORT_HEADER = ("pair", "rmse", "psnr", "pixels")


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ContractError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    return pred, gt


def rmse(pred, gt, scale: float = 1.0) -> float:
    """Root mean square error over all pixels, times ``scale``."""
    pred, gt = _pair(pred, gt)
    return float(scale * np.sqrt(np.mean((pred - gt) ** 2)))


def psnr(pred, gt) -> float:
    """PSNR in dB for data in ``[0, 1]``; ``inf`` for identical inputs."""
    pred, gt = _pair(pred, gt)
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


@dataclass
class EvalRow:
    pair: str
    rmse: float
    psnr: float
    pixels: int


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    def add(self, name: str, pred, gt, scale: float = 1.0, peak: float | None = None) -> EvalRow:
        """Score one prediction.  ``peak`` normalizes raw data into ``[0, 1]`` for PSNR."""
        pred, gt = _pair(pred, gt)
        if peak is None:
            peak = 1.0 if gt.max() <= 1.0 else float(gt.max())
        row = EvalRow(name, rmse(pred, gt, scale), psnr(pred / peak, gt / peak), int(gt[0].size))
        self.rows.append(row)
        return row

    def add_missing(self, name: str) -> EvalRow:
        """Placeholder row for a pair that failed or has no ground truth."""
        row = EvalRow(name, math.nan, math.nan, 0)
        self.rows.append(row)
        return row

    def aggregate(self) -> EvalRow:
        """Mean over scored rows; placeholder rows are skipped."""
        scored = [r for r in self.rows if r.pixels > 0]
        if not scored:
            raise ContractError("no scored rows to aggregate")
        return EvalRow(
            "mean",
            float(np.mean([r.rmse for r in scored])),
            float(np.mean([r.psnr for r in scored])),
            int(sum(r.pixels for r in scored)),
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_HEADER)
        rows = self.rows + ([self.aggregate()] if any(r.pixels > 0 for r in self.rows) else [])
        for r in rows:
            writer.writerow([r.pair, repr(r.rmse), repr(r.psnr), r.pixels])
        return buf.getvalue()
