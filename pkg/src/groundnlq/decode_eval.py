"""Prediction decoding, soft-NMS, Recall@K@tIoU and ensembling."""

from __future__ import annotations

import json
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .config import DecodeConfig
from .data import DataError, Moment
from .heads_loss import HeadOutputs, level_centers

KS = (1, 5)
THETAS = (0.3, 0.5)


@dataclass(frozen=True)
class Candidate:
    start_sec: float
    end_sec: float
    score: float
    level: int = 0
    location: int = 0

    def __post_init__(self):
        if not self.start_sec < self.end_sec:
            raise DataError(f"candidate needs start < end, got [{self.start_sec}, {self.end_sec}]")
        if not self.score > 0:
            raise DataError(f"candidate score must be > 0, got {self.score}")

    def sort_key(self):
        return (-self.score, self.start_sec, self.level, self.location)


def _bounds(m) -> tuple[float, float]:
    if isinstance(m, (Moment,)):
        return m.start_sec, m.end_sec
    if isinstance(m, Candidate):
        return m.start_sec, m.end_sec
    return float(m[0]), float(m[1])


def temporal_iou(a, b) -> float:
    """Intersection over union of two closed intervals."""
    s1, e1 = _bounds(a)
    s2, e2 = _bounds(b)
    inter = max(0.0, min(e1, e2) - max(s1, s2))
    union = (e1 - s1) + (e2 - s2) - inter
    return inter / union if union > 0 else 0.0


def _iou_many(s: float, e: float, starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
    # same float operations as temporal_iou, elementwise
    inter = np.maximum(0.0, np.minimum(e, ends) - np.maximum(s, starts))
    union = (e - s) + (ends - starts) - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def decode_predictions(
    outputs: HeadOutputs,
    snippet_duration_sec: float,
    video_duration_sec: float,
    cfg: DecodeConfig,
) -> list[Candidate]:
    """Convert single-sample head outputs into score-sorted candidates in seconds."""
    starts, ends, scores, levels, locs = [], [], [], [], []
    for level, (lg, dist, mask) in enumerate(zip(outputs.logits, outputs.distances, outputs.masks)):
        stride = 2**level
        lg = lg[0].detach().to(torch.float64)
        prob = torch.sigmoid(lg).numpy()
        keep = (prob > cfg.score_threshold) & mask[0].numpy()
        if not keep.any():
            continue
        idx = np.nonzero(keep)[0]
        d = dist[0].detach().to(torch.float64).numpy()[idx]
        t = level_centers(len(prob), stride)[idx]
        st = np.clip((t - d[:, 0] * stride) * snippet_duration_sec, 0.0, video_duration_sec)
        en = np.clip((t + d[:, 1] * stride) * snippet_duration_sec, 0.0, video_duration_sec)
        ok = en > st
        starts.append(st[ok])
        ends.append(en[ok])
        scores.append(prob[idx][ok])
        levels.append(np.full(int(ok.sum()), level))
        locs.append(idx[ok])
    if not starts:
        return []
    st, en, sc = np.concatenate(starts), np.concatenate(ends), np.concatenate(scores)
    lv, lc = np.concatenate(levels), np.concatenate(locs)
    order = np.lexsort((lc, lv, st, -sc))[: cfg.pre_nms_topk]
    return [Candidate(float(st[i]), float(en[i]), float(sc[i]), int(lv[i]), int(lc[i])) for i in order]


def soft_nms(cands: Sequence[Candidate], cfg: DecodeConfig) -> list[Candidate]:
    """Greedy Gaussian soft-NMS (or hard NMS when ``cfg.nms == "hard"``).

    The highest-scoring remaining candidate is kept and every other score is
    multiplied by ``exp(-iou^2 / soft_sigma)``. Ties go to the earlier
    start, then the lower level, then the lower location. Stops after
    ``keep_topk`` survivors or once the best score drops below
    ``score_threshold``.
    """
    if not cands:
        return []
    starts = np.array([c.start_sec for c in cands])
    ends = np.array([c.end_sec for c in cands])
    scores = np.array([c.score for c in cands])
    levels = np.array([c.level for c in cands])
    locs = np.array([c.location for c in cands])
    alive = np.arange(len(cands))
    out = []
    while alive.size and len(out) < cfg.keep_topk:
        pick = np.lexsort((locs[alive], levels[alive], starts[alive], -scores[alive]))[0]
        best = alive[pick]
        if scores[best] < cfg.score_threshold:
            break
        out.append(replace(cands[best], score=float(scores[best])))
        alive = np.delete(alive, pick)
        if not alive.size:
            break
        iou = _iou_many(starts[best], ends[best], starts[alive], ends[alive])
        if cfg.nms == "hard":
            alive = alive[iou <= cfg.hard_iou]
        else:
            decay = np.array([math.exp(-(x * x) / cfg.soft_sigma) for x in iou.tolist()])
            scores[alive] = scores[alive] * decay
    return out


def ensemble_predictions(lists: Sequence[tuple[Sequence[Candidate], float]], cfg: DecodeConfig) -> list[Candidate]:
    """Weight each model's scores, pool all candidates and re-run NMS."""
    if not lists:
        raise ValueError("ensemble needs at least one prediction list")
    pooled = []
    for cands, weight in lists:
        if weight <= 0:
            raise ValueError(f"ensemble weights must be > 0, got {weight}")
        pooled.extend(c if weight == 1.0 else replace(c, score=c.score * weight) for c in cands)
    return soft_nms(pooled, cfg)


def recall_at_k(preds: Mapping[str, Sequence], gts: Mapping[str, Moment], K: int, theta: float) -> float:
    """Fraction of queries whose top-``K`` predictions contain one with tIoU >= ``theta``."""
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if not 0 < theta <= 1:
        raise ValueError(f"theta must lie in (0, 1], got {theta}")
    if not gts:
        return 0.0
    hits = 0
    for qid, gt in gts.items():
        if qid not in preds:
            raise KeyError(f"no predictions for query {qid!r}")
        if any(temporal_iou(p, gt) >= theta for p in list(preds[qid])[:K]):
            hits += 1
    return hits / len(gts)


@dataclass
class EvalResult:
    recall: dict[str, float] = field(default_factory=dict)
    n_queries: int = 0

    def __getitem__(self, key: str) -> float:
        return self.recall[key]

    def table(self) -> str:
        header = " | ".join(f"{k:>7}" for k in self.recall)
        row = " | ".join(f"{v:7.4f}" for v in self.recall.values())
        return f"{header}\n{row}\n(n_queries={self.n_queries})"


def metric_name(K: int, theta: float) -> str:
    return f"R{K}@{theta}"


def evaluate(
    preds: Mapping[str, Sequence],
    gts: Mapping[str, Moment],
    ks: Iterable[int] = KS,
    thetas: Iterable[float] = THETAS,
) -> EvalResult:
    recall = {metric_name(k, th): recall_at_k(preds, gts, k, th) for k in ks for th in thetas}
    return EvalResult(recall, len(gts))


# ------------------------------------------------------------------------ io


def write_predictions(path: str | Path, preds: Mapping[str, Sequence[Candidate]]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for qid, cands in preds.items():
            rows = [[c.start_sec, c.end_sec, c.score] for c in sorted(cands, key=Candidate.sort_key)]
            fh.write(json.dumps({"query_id": qid, "predictions": rows}) + "\n")


def read_predictions(path: str | Path) -> dict[str, list[Candidate]]:
    """Read prediction JSON Lines; file rank becomes the candidate location."""
    path = Path(path)
    out = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out[str(rec["query_id"])] = [
                    Candidate(float(s), float(e), float(sc), 0, rank)
                    for rank, (s, e, sc) in enumerate(rec["predictions"])
                ]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: malformed prediction record ({exc})") from exc
    return out
