"""Batch evaluation: success rate, perceptual distance and FID-proxy per mode.

Report files are a pure function of the per-query results, so they are
byte-stable for a fixed seed. Wall-clock numbers live in a separate timing
file because they never repeat exactly.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .counterfact import MODES, CounterfactualResult, HyperParams, Models, explain_batch, invert
from .metrics import GaussStats, frechet_distance, success_rate

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("mode", "n", "n_failed", "success_rate", "mean_perceptual",
                  "fid_proxy_query", "fid_proxy_reference")
QUERY_COLUMNS = ("mode", "query", "label", "target", "status", "success", "prob_query",
                 "prob_counterfactual", "perceptual", "pixel_mse", "k_star", "neighborhood_size")
TIMING_COLUMNS = ("mode", "n", "total_seconds", "seconds_per_counterfactual")


@dataclass
class QueryRow:
    mode: str
    query: int
    label: int
    target: int
    status: str = "ok"
    success: bool = False
    prob_query: float = float("nan")
    prob_counterfactual: float = float("nan")
    perceptual: float = float("nan")
    pixel_mse: float = float("nan")
    k_star: int = -1
    neighborhood_size: int = 0
    pooled: np.ndarray | None = None


@dataclass
class EvalReport:
    rows: list
    queries: list
    timing: list
    config: dict
    seed: int

    def csv(self) -> str:
        return _csv(REPORT_COLUMNS, self.rows)

    def queries_csv(self) -> str:
        return _csv(QUERY_COLUMNS, self.queries)

    def timing_csv(self) -> str:
        return _csv(TIMING_COLUMNS, self.timing)

    def to_dict(self) -> dict:
        return {"schema": 1, "seed": self.seed, "config": self.config,
                "metric_labels": {"fid_proxy_query": "FID-proxy, queries vs counterfactuals",
                                  "fid_proxy_reference": "FID-proxy, reference corpus vs counterfactuals",
                                  "mean_perceptual": "perceptual-distance proxy, query vs counterfactual"},
                "rows": self.rows}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(self.csv())
        (out / "report.json").write_text(self.to_json())
        (out / "queries.csv").write_text(self.queries_csv())
        (out / "timing.csv").write_text(self.timing_csv())


def _fmt(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return repr(v)
    return v


def _csv(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def _pooled(models: Models, images) -> np.ndarray:
    with torch.no_grad():
        return models.classifier.perceptor.pooled(torch.as_tensor(images)).numpy()


def _fid(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    if len(a) < 2 or len(b) < 2:
        return float("nan")
    return frechet_distance(GaussStats.from_features(a), GaussStats.from_features(b))


def aggregate(queries: list[QueryRow], query_pooled: np.ndarray, reference_pooled=None) -> list[dict]:
    """One report row per mode; depends on nothing but its arguments."""
    rows = []
    for mode in dict.fromkeys(q.mode for q in queries):
        mine = [q for q in queries if q.mode == mode]
        ok = [q for q in mine if q.status == "ok"]
        cf = np.stack([q.pooled for q in ok]) if ok else np.zeros((0, query_pooled.shape[1]))
        ref = [] if reference_pooled is None else reference_pooled
        rows.append({
            "mode": mode,
            "n": len(mine),
            "n_failed": len(mine) - len(ok),
            "success_rate": success_rate([q.success for q in mine]),
            "mean_perceptual": float(np.mean([q.perceptual for q in ok])) if ok else float("nan"),
            "fid_proxy_query": _fid(query_pooled[[q.query for q in ok]], cf),
            "fid_proxy_reference": _fid(ref, cf),
        })
    return rows


def query_rows(results: list[CounterfactualResult], labels, models: Models) -> list[QueryRow]:
    perc = models.classifier.perceptor
    q = torch.from_numpy(np.stack([r.query for r in results]))
    c = torch.from_numpy(np.stack([r.counterfactual for r in results]))
    with torch.no_grad():
        dist = perc.perceptual_distance(q, c).numpy()
    pooled = _pooled(models, c)
    rows = []
    for i, r in enumerate(results):
        rows.append(QueryRow(
            mode=r.mode, query=i, label=int(labels[i]), target=r.target, success=r.success,
            prob_query=r.prob_query, prob_counterfactual=r.prob_counterfactual,
            perceptual=float(dist[i]), pixel_mse=float(np.mean((r.query - r.counterfactual) ** 2)),
            k_star=-1 if r.k_star is None else int(r.k_star),
            neighborhood_size=len(r.neighborhood), pooled=pooled[i],
        ))
    return rows


def _public(row: QueryRow) -> dict:
    return {c: getattr(row, c) for c in QUERY_COLUMNS}


@dataclass
class EvalOutput:
    report: EvalReport
    results: dict = field(default_factory=dict)


def evaluate_run(queries, labels, targets, modes, models: Models, hp: HyperParams,
                 seed: int = 0, reference=None, batch_size: int = 100) -> EvalOutput:
    """Explain every query in every mode and aggregate the metrics.

    The inversion is shared between modes (it does not depend on the mode).
    A mode whose optimisation fails gets rows marked ``failed`` instead of
    aborting the whole run.
    """
    queries = torch.as_tensor(np.asarray(queries, dtype=np.float64))
    labels = np.asarray(labels, dtype=int)
    targets = np.asarray(targets, dtype=int)
    n = queries.shape[0]
    if n == 0:
        raise ValueError("no queries")
    for m in modes:
        if m not in MODES:
            raise ValueError(f"unknown mode {m!r}")
    query_pooled = _pooled(models, queries)
    reference_pooled = None if reference is None else _pooled(models, reference)

    t0 = time.perf_counter()
    inversions = []
    for s in range(0, n, batch_size):
        inversions.append(invert(queries[s:s + batch_size], models, hp))
    inv_seconds = time.perf_counter() - t0

    all_rows, timing, results = [], [], {}
    for mode in modes:
        t0 = time.perf_counter()
        try:
            res = []
            for b, s in enumerate(range(0, n, batch_size)):
                sl = slice(s, s + batch_size)
                res += explain_batch(queries[sl], targets[sl], mode, models, hp, inversion=inversions[b])
            rows = query_rows(res, labels, models)
            results[mode] = res
        except (FloatingPointError, RuntimeError, ValueError) as exc:
            log.error("mode %s failed: %s", mode, exc)
            rows = [QueryRow(mode=mode, query=i, label=int(labels[i]), target=int(targets[i]),
                             status="failed") for i in range(n)]
        total = time.perf_counter() - t0 + inv_seconds
        all_rows += rows
        timing.append({"mode": mode, "n": n, "total_seconds": total,
                       "seconds_per_counterfactual": total / n})
        log.info("mode %s: %d queries in %.1f s", mode, n, total)

    report = EvalReport(
        rows=aggregate(all_rows, query_pooled, reference_pooled),
        queries=[_public(r) for r in all_rows],
        timing=timing,
        config=hp.to_dict(),
        seed=seed,
    )
    return EvalOutput(report=report, results=results)


def select_queries(labels, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` indices, class-balanced as far as the pool allows, interleaved 0, 1, 0, ..."""
    labels = np.asarray(labels, dtype=int)
    pools = [rng.permutation(np.flatnonzero(labels == c)).tolist() for c in (0, 1)]
    out = []
    while len(out) < n and (pools[0] or pools[1]):
        for pool in pools:
            if pool and len(out) < n:
                out.append(pool.pop(0))
    if len(out) < n:
        raise ValueError(f"asked for {n} queries, only {len(out)} available")
    return np.array(out, dtype=int)
