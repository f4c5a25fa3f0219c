"""APCER / BPCER / ACER / HTER, EER threshold selection and report assembly.

Scores are liveness posteriors: a sample is predicted live iff score >= tau.
Rates are fractions in [0, 1]; percentages only appear in the CSV tables.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .synthdata import LIVE, SPOOF

METRICS = ("apcer", "bpcer", "acer", "hter")
THRESHOLD_CRITERION = "eer-on-source-val"

REPORT_SCHEMA = {
    "type": "object",
    "required": ["method", "threshold", "threshold_criterion", "per_domain", "seeds", "mean", "std"],
    "properties": {
        "method": {"type": "string"},
        "threshold": {"type": "number"},
        "threshold_criterion": {"type": "string"},
        "per_domain": {"$ref": "#/$defs/domain_table"},
        "mean": {"$ref": "#/$defs/domain_table"},
        "std": {"$ref": "#/$defs/domain_table"},
        "seeds": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["seed", "threshold", "per_domain"],
                "properties": {"seed": {"type": "integer"}, "threshold": {"type": "number"},
                               "per_domain": {"$ref": "#/$defs/domain_table"}},
            },
        },
    },
    "$defs": {
        "rate": {"type": "number", "minimum": 0, "maximum": 1},
        "domain_table": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "properties": {m: {"$ref": "#/$defs/rate"} for m in METRICS},
                "additionalProperties": False,
            },
        },
    },
}


@dataclass
class ScoreSet:
    scores: np.ndarray
    labels: np.ndarray
    domain: str = ""

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.scores.shape != self.labels.shape:
            raise ValueError("scores and labels differ in length")
        if self.scores.size and (self.scores.min() < 0 or self.scores.max() > 1):
            raise ValueError("scores must lie in [0, 1]")

    def require_both_classes(self):
        if not ((self.labels == LIVE).any() and (self.labels == SPOOF).any()):
            raise ValueError(f"score set {self.domain!r} needs both live and spoof samples")

    @property
    def live(self) -> np.ndarray:
        return self.scores[self.labels == LIVE]

    @property
    def spoof(self) -> np.ndarray:
        return self.scores[self.labels == SPOOF]


def classify(scores, tau: float) -> np.ndarray:
    return np.where(np.asarray(scores) >= tau, LIVE, SPOOF)


def far_frr(s: ScoreSet, tau: float) -> tuple[float, float]:
    s.require_both_classes()
    far = float(np.mean(s.spoof >= tau))
    frr = float(np.mean(s.live < tau))
    return far, frr


def error_rates(s: ScoreSet, tau: float) -> tuple[float, float, float]:
    """(APCER, BPCER, ACER) at ``tau``."""
    apcer, bpcer = far_frr(s, tau)
    return apcer, bpcer, (apcer + bpcer) / 2


def hter(s: ScoreSet, tau: float) -> float:
    far, frr = far_frr(s, tau)
    return (far + frr) / 2


def select_threshold(source_val: ScoreSet) -> float:
    """Equal-error threshold on the source validation scores.

    Rates are piecewise constant between consecutive unique scores; the
    interval with the smallest |FAR - FRR| (ties: lowest HTER, then lowest
    threshold) wins and its midpoint is returned.
    """
    source_val.require_both_classes()
    u = np.unique(source_val.scores)
    live, spoof = np.sort(source_val.live), np.sort(source_val.spoof)
    # candidate k: tau in (u[k-1], u[k]]; k == len(u) means tau above every score
    uk = np.append(u, np.inf)
    far = 1.0 - np.searchsorted(spoof, uk, side="left") / spoof.size
    frr = np.searchsorted(live, uk, side="left") / live.size
    gap = np.abs(far - frr)
    k = int(np.lexsort((np.arange(uk.size), far + frr, gap))[0])
    if k == 0:
        return float(u[0])
    if k == len(u):
        return float(np.nextafter(u[-1], np.inf))
    mid = (u[k - 1] + u[k]) / 2
    # adjacent floats: the midpoint rounds onto u[k-1], which lies outside the interval
    return float(mid if mid > u[k - 1] else u[k])


def domain_metrics(s: ScoreSet, tau: float) -> dict[str, float]:
    apcer, bpcer, acer = error_rates(s, tau)
    return {"apcer": apcer, "bpcer": bpcer, "acer": acer, "hter": hter(s, tau)}


@dataclass
class MetricsReport:
    method: str
    seeds: list[dict] = field(default_factory=list)

    def add_seed(self, seed: int, tau: float, per_domain: Mapping[str, Mapping[str, float]]):
        self.seeds.append({"seed": int(seed), "threshold": float(tau),
                           "per_domain": {d: dict(m) for d, m in per_domain.items()}})

    @property
    def domains(self) -> list[str]:
        return list(self.seeds[0]["per_domain"]) if self.seeds else []

    def values(self, domain: str, metric: str) -> np.ndarray:
        return np.array([s["per_domain"][domain][metric] for s in self.seeds])

    def mean(self, domain: str, metric: str) -> float:
        return float(self.values(domain, metric).mean())

    def std(self, domain: str, metric: str) -> float:
        return aggregate(self.values(domain, metric))[1]

    def to_dict(self) -> dict:
        # seed order must not influence the report
        seeds = sorted(self.seeds, key=lambda s: s["seed"])
        tables = {"mean": {}, "std": {}}
        for d in self.domains:
            metrics = [m for m in METRICS if m in self.seeds[0]["per_domain"][d]]
            agg = {m: aggregate([s["per_domain"][d][m] for s in seeds]) for m in metrics}
            tables["mean"][d] = {m: agg[m][0] for m in metrics}
            tables["std"][d] = {m: agg[m][1] for m in metrics}
        return {
            "method": self.method,
            "threshold": float(np.mean([s["threshold"] for s in seeds])) if seeds else 0.0,
            "threshold_criterion": THRESHOLD_CRITERION,
            "per_domain": tables["mean"],
            "seeds": seeds,
            "mean": tables["mean"],
            "std": tables["std"],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricsReport":
        return cls(d["method"], [dict(s) for s in d["seeds"]])


def aggregate(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (n - 1); a single value has std 0."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("nothing to aggregate")
    # summing in sorted order keeps the result independent of seed order
    mean = float(np.sum(np.sort(v))) / v.size
    std = float(np.sqrt(np.sum(np.sort((v - mean) ** 2)) / (v.size - 1))) if v.size > 1 else 0.0
    return mean, std


def evaluate(source_val: ScoreSet, source_test: ScoreSet, targets: Mapping[str, ScoreSet],
             tau: float | None = None) -> tuple[float, dict[str, dict[str, float]]]:
    """Metrics for one trained model.

    ``tau`` defaults to the EER threshold of ``source_val`` and is reused
    unchanged on every target.  With more than one target a ``target_avg`` row
    holds the mean HTER.
    """
    if tau is None:
        tau = select_threshold(source_val)
    per_domain = {"source": domain_metrics(source_test, tau)}
    for name, s in targets.items():
        per_domain[name] = domain_metrics(s, tau)
    if len(targets) > 1:
        per_domain["target_avg"] = {"hter": float(np.mean([per_domain[n]["hter"] for n in targets]))}
    return tau, per_domain


def _pct(mean: float, std: float, with_std: bool) -> str:
    return f"{100 * mean:.2f}±{100 * std:.2f}" if with_std else f"{100 * mean:.2f}"


def table_st(rows: Mapping[str, Mapping[str, MetricsReport]], with_std: bool = True) -> str:
    """CSV mirroring the single-target table: Protocols, Methods, source rates, target HTER."""
    out = io.StringIO()
    wr = csv.writer(out)
    wr.writerow(["Protocols", "Methods", "APCER(%)", "BPCER(%)", "ACER(%)", "HTER(%)"])
    for target, methods in rows.items():
        for method, rep in methods.items():
            src = [_pct(rep.mean("source", m), rep.std("source", m), with_std) for m in ("apcer", "bpcer", "acer")]
            wr.writerow([f"S -> {target}", method, *src,
                         _pct(rep.mean(target, "hter"), rep.std(target, "hter"), with_std)])
    return out.getvalue()


def table_mt(reports: Mapping[str, MetricsReport], targets: Sequence[str], with_std: bool = True) -> str:
    """CSV mirroring the multi-target table with per-target HTER and HTER_avg."""
    out = io.StringIO()
    wr = csv.writer(out)
    wr.writerow(["Methods", "APCER(%)", "BPCER(%)", "ACER(%)", *[f"HTER_{t}(%)" for t in targets], "HTER_avg(%)"])
    for method, rep in reports.items():
        src = [_pct(rep.mean("source", m), rep.std("source", m), with_std) for m in ("apcer", "bpcer", "acer")]
        tg = [_pct(rep.mean(t, "hter"), rep.std(t, "hter"), with_std) for t in targets]
        avg = rep.values("target_avg", "hter") if "target_avg" in rep.domains else \
            np.mean([rep.values(t, "hter") for t in targets], axis=0)
        m, s = aggregate(avg)
        wr.writerow([method, *src, *tg, _pct(m, s, with_std)])
    return out.getvalue()


# -- score files -----------------------------------------------------------------

def write_scores(path, sets: Sequence[ScoreSet]):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["sample_index", "domain", "label", "score"])
        for s in sets:
            for i, (lab, sc) in enumerate(zip(s.labels, s.scores)):
                wr.writerow([i, s.domain, int(lab), repr(float(sc))])


def read_scores(path) -> dict[str, ScoreSet]:
    groups: dict[str, tuple[list, list]] = {}
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        missing = {"sample_index", "domain", "label", "score"} - set(rd.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: score file lacks columns {sorted(missing)}")
        for row in rd:
            sc, lab = groups.setdefault(row["domain"], ([], []))
            sc.append(float(row["score"]))
            lab.append(int(row["label"]))
    return {d: ScoreSet(np.array(s), np.array(l), d) for d, (s, l) in groups.items()}


def write_report(path, report: MetricsReport):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(report.to_json())
