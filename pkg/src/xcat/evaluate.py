"""Float and quantized evaluation over image pairs."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import ImagePair, InfinitePSNR, challenge_score, psnr
from .model import Model, forward
from .quant import QModel, dequantize, lr_to_uint8, qforward

log = logging.getLogger(__name__)


@dataclass
class EvalRow:
    id: str
    psnr_fp32: float | None = None
    psnr_uint8: float | None = None

    @property
    def delta(self) -> float | None:
        """Signed float-minus-quantized PSNR."""
        if self.psnr_fp32 is None or self.psnr_uint8 is None:
            return None
        return self.psnr_fp32 - self.psnr_uint8


def _mean(vals):
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    mode: str = "rgb"

    @property
    def mean_fp32(self):
        return _mean(r.psnr_fp32 for r in self.rows)

    @property
    def mean_uint8(self):
        return _mean(r.psnr_uint8 for r in self.rows)

    @property
    def mean_delta(self):
        if self.mean_fp32 is None or self.mean_uint8 is None:
            return None
        return self.mean_fp32 - self.mean_uint8

    def score(self, runtime_ms: float) -> float:
        if self.mean_uint8 is None:
            raise ValueError("challenge score needs a quantized evaluation")
        return challenge_score(self.mean_uint8, runtime_ms)

    def write_csv(self, path, runtime_ms: float | None = None) -> None:
        def fmt(v):
            return "" if v is None else f"{v:.6f}"

        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["image", "psnr_fp32", "psnr_uint8", "delta"])
            for r in self.rows:
                wr.writerow([r.id, fmt(r.psnr_fp32), fmt(r.psnr_uint8), fmt(r.delta)])
            summary = ["# mean", fmt(self.mean_fp32), fmt(self.mean_uint8), fmt(self.mean_delta)]
            if runtime_ms is not None and self.mean_uint8 is not None:
                summary.append(f"score={self.score(runtime_ms):.4f}")
            wr.writerow(summary)


def _safe_psnr(sr, hr, mode):
    try:
        return psnr(sr, hr, mode)
    except InfinitePSNR:
        return math.inf


def evaluate(
    pairs: Sequence[ImagePair],
    model: Model | None = None,
    qmodel: QModel | None = None,
    mode: str = "rgb",
) -> EvalReport:
    """PSNR of each pair for the float model, the quantized model, or both.

    Pairs whose sizes do not match the model's scale are skipped with a
    warning. Identical outputs are reported as ``inf``.
    """
    if not pairs:
        raise ValueError("evaluate needs at least one pair")
    if model is None and qmodel is None:
        raise ValueError("evaluate needs a model, a quantized model, or both")
    scale = (model or qmodel).config.scale
    report = EvalReport(mode=mode)
    for pair in pairs:
        lr, hr = pair.lr, pair.hr
        if hr.shape[:2] != (lr.shape[0] * scale, lr.shape[1] * scale) or lr.shape[-1] != hr.shape[-1]:
            log.warning("skipping %s: lr %s and hr %s do not match scale %d", pair.id, lr.shape, hr.shape, scale)
            report.skipped.append(pair.id)
            continue
        row = EvalRow(pair.id)
        if model is not None:
            row.psnr_fp32 = _safe_psnr(forward(model, lr[None].astype(model.dtype))[0], hr, mode)
        if qmodel is not None:
            sr = dequantize(qforward(qmodel, lr_to_uint8(lr[None])), qmodel.edges["output"])[0]
            row.psnr_uint8 = _safe_psnr(sr, hr, mode)
        report.rows.append(row)
    return report
