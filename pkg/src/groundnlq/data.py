"""Annotation/feature ingestion, narration corpus building and synthetic data.

On-disk conventions
-------------------
* Annotations are JSON Lines. Each record has ``video_id``, ``query_id``,
  ``split`` and either ``start_sec``/``end_sec`` or (narrations) a single
  ``timestamp_sec``.
* A feature raster ``<key>.f32`` holds little-endian float32 values in
  row-major ``[T x D]`` order, next to a sidecar ``<key>.json`` of the form
  ``{"T": int, "D": int, "snippet_duration_sec": float}``. Query tokens use
  the same convention keyed by ``query_id``.
"""

from __future__ import annotations

import json
import logging
import math
import os
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import JitterConfig, SyntheticConfig

logger = logging.getLogger(__name__)

SPLITS = ("pretrain", "train", "val", "test")
DEFAULT_SNIPPET_SEC = 0.53
NUM_WORKERS_ENV = "GROUNDNLQ_NUM_WORKERS"
NARRATION_HALF_WINDOW = 4  # snippets on each side of a bound-less narration


class DataError(ValueError):
    """Invalid annotation or feature content."""


class FeatureFormatError(DataError):
    """Raster and sidecar disagree, or the sidecar is malformed."""


@dataclass(frozen=True)
class Moment:
    start_sec: float
    end_sec: float

    def __post_init__(self):
        if not (math.isfinite(self.start_sec) and math.isfinite(self.end_sec)):
            raise DataError(f"non-finite moment {self}")
        if not 0 <= self.start_sec < self.end_sec:
            raise DataError(f"moment must satisfy 0 <= start < end, got [{self.start_sec}, {self.end_sec}]")

    @property
    def width(self) -> float:
        return self.end_sec - self.start_sec

    @property
    def center(self) -> float:
        return 0.5 * (self.start_sec + self.end_sec)


def _check_raster(data: np.ndarray, mask: np.ndarray, what: str) -> None:
    if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
        raise DataError(f"{what}: expected a non-empty [N x D] array, got shape {data.shape}")
    if mask.shape != (data.shape[0],):
        raise DataError(f"{what}: mask shape {mask.shape} does not match {data.shape[0]} rows")
    if not np.isfinite(data).all():
        raise DataError(f"{what}: contains non-finite values")


@dataclass(eq=False)
class FeatureSequence:
    video_id: str
    data: np.ndarray
    snippet_duration_sec: float = DEFAULT_SNIPPET_SEC
    valid_mask: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.valid_mask is None:
            self.valid_mask = np.ones(self.data.shape[0], dtype=bool)
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        _check_raster(self.data, self.valid_mask, f"video {self.video_id}")
        n_valid = int(self.valid_mask.sum())
        if n_valid < 1 or not self.valid_mask[:n_valid].all():
            raise DataError(f"video {self.video_id}: valid positions must form a non-empty prefix")
        if self.snippet_duration_sec <= 0:
            raise DataError("snippet_duration_sec must be > 0")

    @property
    def T(self) -> int:
        return int(self.valid_mask.sum())

    @property
    def D(self) -> int:
        return self.data.shape[1]

    @property
    def duration_sec(self) -> float:
        return self.T * self.snippet_duration_sec


@dataclass(eq=False)
class QueryTokens:
    query_id: str
    data: np.ndarray
    valid_mask: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.valid_mask is None:
            self.valid_mask = np.ones(self.data.shape[0], dtype=bool)
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        _check_raster(self.data, self.valid_mask, f"query {self.query_id}")

    @property
    def L(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class GroundingSample:
    video_id: str
    query_id: str
    moment: Moment
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r}")

    def to_record(self) -> dict:
        return {
            "video_id": self.video_id,
            "query_id": self.query_id,
            "start_sec": self.moment.start_sec,
            "end_sec": self.moment.end_sec,
            "split": self.split,
        }


@dataclass(frozen=True)
class FeatureMeta:
    T: int
    D: int
    snippet_duration_sec: float = DEFAULT_SNIPPET_SEC

    @property
    def duration_sec(self) -> float:
        return self.T * self.snippet_duration_sec


# ---------------------------------------------------------------- annotations


def default_narration_window(timestamp_sec: float, snippet_sec: float, duration_sec: float | None = None) -> tuple[float, float]:
    half = NARRATION_HALF_WINDOW * snippet_sec
    start, end = max(0.0, timestamp_sec - half), timestamp_sec + half
    if duration_sec is not None:
        end = min(end, duration_sec)
    return start, end


def load_annotations(
    path: str | Path,
    feature_index: Mapping[str, FeatureMeta] | None = None,
) -> list[GroundingSample]:
    """Read a JSON Lines annotation file.

    Moments are clamped to ``[0, duration]`` for videos present in
    ``feature_index``. Narration records carrying only ``timestamp_sec``
    get the default +-4 snippet window.
    """
    path = Path(path)
    samples = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                video_id, query_id, split = str(rec["video_id"]), str(rec["query_id"]), str(rec["split"])
                meta = feature_index.get(video_id) if feature_index else None
                if "start_sec" in rec and "end_sec" in rec:
                    start, end = float(rec["start_sec"]), float(rec["end_sec"])
                elif "timestamp_sec" in rec:
                    snippet = meta.snippet_duration_sec if meta else DEFAULT_SNIPPET_SEC
                    start, end = default_narration_window(float(rec["timestamp_sec"]), snippet)
                else:
                    raise KeyError("start_sec/end_sec or timestamp_sec")
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: malformed annotation record ({exc})") from exc
            if meta is not None:
                start, end = max(0.0, start), min(end, meta.duration_sec)
            if not 0 <= start < end:
                raise DataError(f"{path}:{lineno}: empty moment after clamping: {rec}")
            if split not in SPLITS:
                raise DataError(f"{path}:{lineno}: unknown split {split!r}")
            samples.append(GroundingSample(video_id, query_id, Moment(start, end), split))
    return samples


def write_annotations(path: str | Path, samples: Iterable[GroundingSample]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_record()) + "\n")


# ------------------------------------------------------------------- rasters


def _raster_paths(path: str | Path) -> tuple[Path, Path]:
    path = Path(path)
    if path.suffix in (".f32", ".json"):
        path = path.with_suffix("")
    return path.with_name(path.name + ".f32"), path.with_name(path.name + ".json")


def write_raster(path: str | Path, data: np.ndarray, snippet_duration_sec: float | None = None) -> None:
    """Write ``data`` as ``<path>.f32`` plus its JSON sidecar."""
    raster, sidecar = _raster_paths(path)
    data = np.asarray(data, dtype="<f4")
    if data.ndim != 2:
        raise DataError(f"raster must be 2-D, got shape {data.shape}")
    meta = {"T": int(data.shape[0]), "D": int(data.shape[1])}
    if snippet_duration_sec is not None:
        meta["snippet_duration_sec"] = float(snippet_duration_sec)
    raster.parent.mkdir(parents=True, exist_ok=True)
    raster.write_bytes(np.ascontiguousarray(data).tobytes())
    sidecar.write_text(json.dumps(meta), encoding="utf-8")


def read_sidecar(path: str | Path) -> dict:
    _, sidecar = _raster_paths(path)
    try:
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
        T, D = int(meta["T"]), int(meta["D"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FeatureFormatError(f"{sidecar}: malformed sidecar ({exc})") from exc
    if T < 1 or D < 1:
        raise FeatureFormatError(f"{sidecar}: T and D must be >= 1, got T={T} D={D}")
    meta["T"], meta["D"] = T, D
    return meta


def read_raster(path: str | Path) -> tuple[np.ndarray, dict]:
    raster, _ = _raster_paths(path)
    meta = read_sidecar(path)
    blob = raster.read_bytes()
    expected = meta["T"] * meta["D"] * 4
    if len(blob) != expected:
        raise FeatureFormatError(
            f"{raster}: {len(blob)} bytes on disk, sidecar implies {expected} (T={meta['T']}, D={meta['D']})"
        )
    data = np.frombuffer(blob, dtype="<f4").reshape(meta["T"], meta["D"]).astype(np.float32)
    if not np.isfinite(data).all():
        raise DataError(f"{raster}: contains non-finite values")
    return data, meta


def load_feature_file(path: str | Path) -> FeatureSequence:
    data, meta = read_raster(path)
    raster, _ = _raster_paths(path)
    return FeatureSequence(
        video_id=raster.stem,
        data=data,
        snippet_duration_sec=float(meta.get("snippet_duration_sec", DEFAULT_SNIPPET_SEC)),
    )


def save_feature_file(path: str | Path, f: FeatureSequence) -> None:
    write_raster(path, f.data[: f.T], f.snippet_duration_sec)


def load_query_file(path: str | Path) -> QueryTokens:
    data, _ = read_raster(path)
    raster, _ = _raster_paths(path)
    return QueryTokens(query_id=raster.stem, data=data)


def load_feature_index(feature_dir: str | Path) -> dict[str, FeatureMeta]:
    """Read every sidecar in ``feature_dir`` without touching the rasters."""
    feature_dir = Path(feature_dir)
    if not feature_dir.is_dir():
        raise FileNotFoundError(f"feature directory not found: {feature_dir}")
    index = {}
    for sidecar in sorted(feature_dir.glob("*.json")):
        meta = read_sidecar(sidecar)
        index[sidecar.stem] = FeatureMeta(
            meta["T"], meta["D"], float(meta.get("snippet_duration_sec", DEFAULT_SNIPPET_SEC))
        )
    return index


# --------------------------------------------------------- narration corpus


def jitter_boundaries(
    moment: Moment,
    video_duration_sec: float,
    cfg: JitterConfig,
    rng: np.random.Generator,
    min_width_sec: float = DEFAULT_SNIPPET_SEC,
) -> Moment:
    """Randomly perturb a window's center and width, then clamp it to the video.

    The center moves by ``Normal(0, (center_sigma_frac * width)^2)`` and the
    width is scaled by ``Uniform[width_scale_min, width_scale_max]``. A
    window left narrower than ``min_width_sec`` is re-widened around its
    clamped center.
    """
    if video_duration_sec <= 0:
        raise DataError("video duration must be > 0")
    w = moment.width
    # both draws happen unconditionally so the stream does not depend on cfg
    delta = rng.normal(0.0, 1.0) * cfg.center_sigma_frac * w
    scale = rng.uniform(cfg.width_scale_min, cfg.width_scale_max)
    grow = 0.5 * (w * scale - w)
    start = min(max(moment.start_sec + delta - grow, 0.0), video_duration_sec)
    end = min(max(moment.end_sec + delta + grow, 0.0), video_duration_sec)
    min_width = min(min_width_sec, video_duration_sec)
    if end - start < min_width:
        c = min(max(moment.center + delta, 0.0), video_duration_sec)
        start = min(max(c - 0.5 * min_width, 0.0), video_duration_sec - min_width)
        end = min(start + min_width, video_duration_sec)
    return Moment(start, end)


@dataclass(frozen=True)
class Narration:
    video_id: str
    query_id: str
    timestamp_sec: float
    clip_bounds: tuple[float, float] | None = None


@dataclass
class CorpusBuild:
    samples: list[GroundingSample]
    skipped: int = 0
    skipped_video_ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)


def build_pretrain_corpus(
    narrations: Sequence[Narration],
    jitter: JitterConfig,
    feature_index: Mapping[str, FeatureMeta],
) -> CorpusBuild:
    """Turn timestamped narrations into jittered pretraining samples.

    The starting window is the clip's own bounds when given, otherwise a
    +-4 snippet window around the timestamp. Narrations of videos missing
    from ``feature_index`` are skipped and counted.
    """
    rng = np.random.default_rng(jitter.seed)
    out = CorpusBuild(samples=[])
    for n in narrations:
        meta = feature_index.get(n.video_id)
        if meta is None:
            out.skipped += 1
            out.skipped_video_ids.append(n.video_id)
            continue
        dur = meta.duration_sec
        if n.clip_bounds is not None:
            start, end = n.clip_bounds
        else:
            start, end = default_narration_window(n.timestamp_sec, meta.snippet_duration_sec)
        start, end = max(0.0, float(start)), min(float(end), dur)
        if end <= start:
            c = min(max(n.timestamp_sec, 0.0), dur)
            start, end = default_narration_window(c, meta.snippet_duration_sec, dur)
        moment = jitter_boundaries(Moment(start, end), dur, jitter, rng, meta.snippet_duration_sec)
        out.samples.append(GroundingSample(n.video_id, n.query_id, moment, "pretrain"))
    if out.skipped:
        logger.warning("skipped %d narrations without feature metadata", out.skipped)
    return out


def load_narrations(path: str | Path) -> list[Narration]:
    """Narration JSON Lines: ``video_id``, ``query_id``, ``timestamp_sec`` and
    optional ``start_sec``/``end_sec`` clip bounds."""
    path = Path(path)
    out = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                bounds = None
                if "start_sec" in rec and "end_sec" in rec:
                    bounds = (float(rec["start_sec"]), float(rec["end_sec"]))
                ts = float(rec["timestamp_sec"]) if "timestamp_sec" in rec else 0.5 * sum(bounds)
                out.append(Narration(str(rec["video_id"]), str(rec["query_id"]), ts, bounds))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: malformed narration record ({exc})") from exc
    return out


# ------------------------------------------------------------------ datasets


@dataclass
class GroundingDataset:
    """Features, query tokens and samples for one experiment."""

    features: dict[str, FeatureSequence]
    queries: dict[str, QueryTokens]
    samples: list[GroundingSample]

    def split(self, name: str) -> list[GroundingSample]:
        return [s for s in self.samples if s.split == name]

    def feature_index(self) -> dict[str, FeatureMeta]:
        return {k: FeatureMeta(f.T, f.D, f.snippet_duration_sec) for k, f in self.features.items()}

    def merged(self, other: "GroundingDataset") -> "GroundingDataset":
        return GroundingDataset(
            {**self.features, **other.features},
            {**self.queries, **other.queries},
            self.samples + other.samples,
        )

    def save(self, root: str | Path, annotations_name: str = "annotations.jsonl") -> None:
        root = Path(root)
        for key, f in self.features.items():
            save_feature_file(root / "features" / key, f)
        for key, q in self.queries.items():
            write_raster(root / "queries" / key, q.data)
        write_annotations(root / annotations_name, self.samples)

    @classmethod
    def load(cls, root: str | Path, annotations: str | Path | None = None) -> "GroundingDataset":
        root = Path(root)
        feat_dir, query_dir = root / "features", root / "queries"
        index = load_feature_index(feat_dir)
        if not query_dir.is_dir():
            raise FileNotFoundError(f"query directory not found: {query_dir}")
        samples = load_annotations(annotations or root / "annotations.jsonl", index)
        vids = sorted({s.video_id for s in samples})
        qids = sorted({s.query_id for s in samples})
        with ThreadPoolExecutor(max_workers=num_workers()) as pool:
            feats = list(pool.map(lambda v: load_feature_file(feat_dir / v), vids))
            toks = list(pool.map(lambda q: load_query_file(query_dir / q), qids))
        return cls(dict(zip(vids, feats)), dict(zip(qids, toks)), samples)


def num_workers() -> int:
    """Loader parallelism, capped by ``GROUNDNLQ_NUM_WORKERS`` (default 1)."""
    raw = os.environ.get(NUM_WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise DataError(f"{NUM_WORKERS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise DataError(f"{NUM_WORKERS_ENV} must be a positive integer, got {raw!r}")
    return n


def _place_windows(rng: np.random.Generator, T: int, n: int, cfg: SyntheticConfig) -> list[tuple[int, int]]:
    hi = max(cfg.min_width, int(cfg.max_width_frac * T))
    windows: list[tuple[int, int]] = []
    for _ in range(n):
        for attempt in range(100):
            # log-uniform widths so short and long moments both occur
            w = int(round(math.exp(rng.uniform(math.log(cfg.min_width), math.log(hi)))))
            w = min(max(w, cfg.min_width), T)
            a = int(rng.integers(0, T - w + 1))
            if all(a + w <= s or e <= a for s, e in windows) or attempt == 99:
                windows.append((a, a + w))
                break
    return windows


def generate_synthetic_dataset(
    cfg: SyntheticConfig,
) -> tuple[list[FeatureSequence], list[QueryTokens], list[GroundingSample]]:
    """Generate videos with query signatures planted inside their moments.

    Every query draws a latent signature ``s``; its tokens are ``s`` plus
    noise, and the video snippets inside its moment receive
    ``signal_gain * E @ s`` on top of Gaussian noise, with ``E`` a fixed
    random embedding determined by ``world_seed``.
    """
    world = np.random.default_rng([cfg.world_seed, 7919])
    embed = world.normal(size=(cfg.D, cfg.D_t)) / math.sqrt(cfg.D_t)
    rng = np.random.default_rng([cfg.seed, cfg.world_seed])
    features, queries, samples = [], [], []
    dt = cfg.snippet_duration_sec
    for v in range(cfg.num_videos):
        video_id = f"{cfg.split}-s{cfg.seed}-v{v:04d}"
        T = int(rng.integers(cfg.T_range[0], cfg.T_range[1] + 1))
        x = rng.normal(0.0, cfg.noise_sigma, size=(T, cfg.D))
        for k, (a, b) in enumerate(_place_windows(rng, T, cfg.queries_per_video, cfg)):
            sig = rng.normal(size=cfg.D_t)
            x[a:b] += cfg.signal_gain * (embed @ sig)
            L = int(rng.integers(cfg.L_range[0], cfg.L_range[1] + 1))
            tokens = sig + rng.normal(0.0, cfg.noise_sigma, size=(L, cfg.D_t))
            query_id = f"{video_id}-q{k}"
            queries.append(QueryTokens(query_id, tokens))
            samples.append(GroundingSample(video_id, query_id, Moment(a * dt, b * dt), cfg.split))
        features.append(FeatureSequence(video_id, x, dt))
    return features, queries, samples


def synthetic_dataset(cfg: SyntheticConfig) -> GroundingDataset:
    features, queries, samples = generate_synthetic_dataset(cfg)
    return GroundingDataset(
        {f.video_id: f for f in features}, {q.query_id: q for q in queries}, samples
    )


def narrations_from_samples(samples: Iterable[GroundingSample]) -> list[Narration]:
    """Narration view of annotated samples: midpoint timestamp, moment as clip bounds."""
    return [
        Narration(s.video_id, s.query_id, s.moment.center, (s.moment.start_sec, s.moment.end_sec))
        for s in samples
    ]
