"""Verification metrics: latitude-weighted RMSE, Pearson correlation, mean bias.

LRMSE weights nodes by the cosine of their latitude (pole rows weigh zero).
Pearson and mean bias are plain unweighted statistics over all nodes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import GridMismatchError, GssaError
from .grid import FieldTensor

NA = "NA"


class EmptySampleSetError(GssaError, ValueError):
    """``evaluate`` needs at least one sample."""


def _pair(pred: FieldTensor, ref: FieldTensor, var: int):
    if pred.grid != ref.grid or pred.n_vars != ref.n_vars:
        raise GridMismatchError(f"pred {pred.grid}/{pred.n_vars} vs ref {ref.grid}/{ref.n_vars}")
    return pred.values[var], ref.values[var]


def lat_weighted_mean_sq(err, lats_deg) -> float:
    """Cosine-latitude weighted mean of ``err**2`` for a ``(n_lat, n_lon)`` error
    array on rows ``lats_deg``; rows at the poles weigh exactly zero."""
    err = np.asarray(err, dtype=np.float64)
    lats = np.asarray(lats_deg, dtype=np.float64)
    w = np.where(np.abs(lats) == 90.0, 0.0, np.maximum(np.cos(np.radians(lats)), 0.0))
    w = np.broadcast_to(w[:, None], err.shape)
    return float(np.sum(w * err * err) / np.sum(w))


def weighted_sq_error(pred: FieldTensor, ref: FieldTensor, var: int) -> float:
    """Latitude-weighted mean squared error (the square of :func:`lrmse`)."""
    p, r = _pair(pred, ref, var)
    return lat_weighted_mean_sq(p - r, pred.grid.lats)


def lrmse(pred: FieldTensor, ref: FieldTensor, var: int = 0) -> float:
    return math.sqrt(weighted_sq_error(pred, ref, var))


def pearson(pred: FieldTensor, ref: FieldTensor, var: int = 0) -> Optional[float]:
    """Correlation over all nodes, or ``None`` when either field is constant."""
    p, r = _pair(pred, ref, var)
    pc = p - p.mean()
    rc = r - r.mean()
    sp = math.sqrt(float(np.sum(pc * pc)))
    sr = math.sqrt(float(np.sum(rc * rc)))
    if sp == 0.0 or sr == 0.0:
        return None
    return float(np.sum(pc * rc)) / (sp * sr)


def mean_bias(pred: FieldTensor, ref: FieldTensor, var: int = 0) -> float:
    p, r = _pair(pred, ref, var)
    return float(np.mean(p - r))


@dataclass
class VarRecord:
    name: str
    lrmse: float
    pearson: Optional[float]
    mean_bias: float


@dataclass
class EvalReport:
    records: list
    grid: Optional[tuple] = None
    ratio: Optional[float] = None
    lead: Optional[int] = None
    n_samples: int = 1
    meta: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> VarRecord:
        for rec in self.records:
            if rec.name == name:
                return rec
        raise KeyError(name)

    def machine_lines(self) -> list:
        out = []
        for rec in self.records:
            p = NA if rec.pearson is None else f"{rec.pearson:.17g}"
            out.append(f"{rec.name}\t{rec.lrmse:.17g}\t{p}\t{rec.mean_bias:.17g}")
        return out

    def table(self) -> str:
        head = f"{'variable':<16}{'LRMSE':>16}{'Pearson':>12}{'mean bias':>16}"
        rows = [head, "-" * len(head)]
        for rec in self.records:
            p = NA if rec.pearson is None else f"{rec.pearson:.6f}"
            rows.append(f"{rec.name:<16}{rec.lrmse:>16.6g}{p:>12}{rec.mean_bias:>16.6g}")
        return "\n".join(rows)

    def to_text(self) -> str:
        meta = []
        if self.grid is not None:
            meta.append(f"grid {self.grid[0]}x{self.grid[1]}")
        if self.ratio is not None:
            meta.append(f"ratio {self.ratio:g}")
        if self.lead is not None:
            meta.append(f"lead {self.lead}")
        meta.append(f"samples {self.n_samples}")
        return "# " + ", ".join(meta) + "\n" + self.table() + "\n\n" + "\n".join(self.machine_lines()) + "\n"

    @staticmethod
    def parse_lines(text: str) -> list:
        """Recover :class:`VarRecord` objects from the machine-readable lines."""
        out = []
        for line in text.splitlines():
            parts = line.split("\t")
            if len(parts) != 4:
                continue
            try:
                lr = float(parts[1])
                mb = float(parts[3])
            except ValueError:
                continue
            out.append(VarRecord(parts[0], lr, None if parts[2] == NA else float(parts[2]), mb))
        return out


def evaluate(preds: Sequence[FieldTensor], refs: Sequence[FieldTensor], names=None,
             ratio: Optional[float] = None, lead: Optional[int] = None) -> EvalReport:
    """Aggregate metrics over aligned samples.

    LRMSE is the root of the mean weighted squared error; Pearson and mean
    bias are arithmetic means over samples (Pearson over defined samples only).
    """
    if isinstance(preds, FieldTensor):
        preds, refs = [preds], [refs]
    if len(preds) == 0 or len(preds) != len(refs):
        raise EmptySampleSetError(f"need equal, nonempty sample lists; got {len(preds)} and {len(refs)}")
    n_vars = preds[0].n_vars
    names = list(names) if names is not None else [f"var{i}" for i in range(n_vars)]
    records = []
    for v in range(n_vars):
        se = [weighted_sq_error(p, r, v) for p, r in zip(preds, refs)]
        pc = [pearson(p, r, v) for p, r in zip(preds, refs)]
        pc = [c for c in pc if c is not None]
        mb = [mean_bias(p, r, v) for p, r in zip(preds, refs)]
        records.append(VarRecord(names[v], math.sqrt(sum(se) / len(se)),
                                 sum(pc) / len(pc) if pc else None, sum(mb) / len(mb)))
    return EvalReport(records, preds[0].grid.shape, ratio, lead, len(preds))
