"""Dataset hygiene: person-union cropping, clip manifests from frame labels,
cross-split near-duplicate scans, split statistics, and a synthetic
two-actor corpus for desk-scale training.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

LABEL_NAMES = {0: "violent", 1: "non-violent"}
LABEL_IDS = {v: k for k, v in LABEL_NAMES.items()}
IGNORE = -1


class DataFormatError(ValueError):
    """Malformed input file; message carries the path and line number."""


# ---------------------------------------------------------------------------
# cropping


@dataclass(frozen=True)
class Detection:
    frame: int
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    confidence: float = 1.0

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def validate(self, width: int, height: int) -> None:
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self.box}")
        if self.x_min < 0 or self.y_min < 0 or self.x_max > width or self.y_max > height:
            raise ValueError(f"box {self.box} outside {width}x{height} frame")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


def crop_union(width: int, height: int, detections: Sequence[Detection]):
    """Smallest box holding every detection; the full frame when there are none."""
    if not detections:
        return (0, 0, width, height)
    for d in detections:
        d.validate(width, height)
    return (min(d.x_min for d in detections), min(d.y_min for d in detections),
            max(d.x_max for d in detections), max(d.y_max for d in detections))


def clip_crop(width: int, height: int, detections: Iterable[Detection]):
    """One rectangle for the whole clip: the union of every frame's union.

    Frames without detections contribute nothing; a clip with no detections
    at all keeps the full frame.
    """
    by_frame: dict[int, list[Detection]] = defaultdict(list)
    for d in detections:
        by_frame[d.frame].append(d)
    boxes = [crop_union(width, height, ds) for ds in by_frame.values()]
    if not boxes:
        return (0, 0, width, height)
    return (min(b[0] for b in boxes), min(b[1] for b in boxes),
            max(b[2] for b in boxes), max(b[3] for b in boxes))


def apply_crop(video: np.ndarray, box, out_size: tuple[int, int] | None = None) -> np.ndarray:
    """Crop ``[3, T, H, W]`` to ``box`` on every frame, then nearest-resize."""
    x0, y0, x1, y1 = (int(round(v)) for v in box)
    out = video[..., y0:y1, x0:x1]
    if out_size is None:
        return out
    H, W = out_size
    rows = np.minimum((np.arange(H) + 0.5) * out.shape[-2] / H, out.shape[-2] - 1).astype(int)
    cols = np.minimum((np.arange(W) + 0.5) * out.shape[-1] / W, out.shape[-1] - 1).astype(int)
    return out[..., rows[:, None], cols[None, :]]


# ---------------------------------------------------------------------------
# clip manifests


@dataclass(frozen=True)
class ClipRecord:
    source: str
    start_s: float
    end_s: float
    label: str
    fps: float
    width: int = 0
    height: int = 0

    @property
    def duration(self) -> float:
        return self.end_s - self.start_s


MANIFEST_COLUMNS = ("source", "start_s", "end_s", "label", "fps", "width", "height")


def label_runs(labels: Sequence[int]) -> list[tuple[int, int, int]]:
    """Maximal runs (start, end_exclusive, value) of 0/1 labels; -1 breaks runs."""
    runs = []
    start = None
    for i, v in enumerate(list(labels) + [None]):
        if start is not None and v != labels[start]:
            runs.append((start, i, labels[start]))
            start = None
        if start is None and v in (0, 1):
            start = i
        elif v not in (0, 1, IGNORE, None):
            raise ValueError(f"frame {i}: label {v!r} not in {{0, 1, -1}}")
    return runs


def build_manifest(labels: Sequence[int], fps: float, source: str = "",
                   width: int = 0, height: int = 0) -> list[ClipRecord]:
    """One clip per maximal run of violent (0) or non-violent (1) frames."""
    if fps <= 0:
        raise ValueError("fps must be positive")
    return [ClipRecord(source, s / fps, e / fps, LABEL_NAMES[v], fps, width, height)
            for s, e, v in label_runs(list(labels))]


def expand_manifest(records: Sequence[ClipRecord], n_frames: int) -> list[int]:
    """Inverse of :func:`build_manifest` on one source: per-frame labels, -1 where no clip."""
    out = [IGNORE] * n_frames
    for r in records:
        s, e = int(round(r.start_s * r.fps)), int(round(r.end_s * r.fps))
        for i in range(s, e):
            if out[i] != IGNORE:
                raise ValueError(f"clips overlap at frame {i}")
            out[i] = LABEL_IDS[r.label]
    return out


def read_label_stream(path) -> tuple[list[int], float]:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].strip().startswith("fps="):
        raise DataFormatError(f"{path}:1: expected header 'fps=<real>'")
    try:
        fps = float(lines[0].strip()[4:])
    except ValueError:
        raise DataFormatError(f"{path}:1: bad fps value {lines[0]!r}") from None
    if fps <= 0:
        raise DataFormatError(f"{path}:1: fps must be positive")
    labels = []
    for n, raw in enumerate(lines[1:], 2):
        s = raw.strip()
        if not s:
            continue
        try:
            v = int(s)
        except ValueError:
            raise DataFormatError(f"{path}:{n}: not an integer label: {raw!r}") from None
        if v not in (0, 1, IGNORE):
            raise DataFormatError(f"{path}:{n}: label {v} not in {{0, 1, -1}}")
        labels.append(v)
    return labels, fps


def write_label_stream(path, labels: Sequence[int], fps: float) -> None:
    Path(path).write_text(f"fps={fps!r}\n" + "".join(f"{v}\n" for v in labels))


def write_manifest(path, records: Sequence[ClipRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for r in records:
            w.writerow([r.source, repr(r.start_s), repr(r.end_s), r.label, repr(r.fps), r.width, r.height])


def read_manifest(path) -> list[ClipRecord]:
    rows = _read_csv(path, MANIFEST_COLUMNS)
    out = []
    for n, row in rows:
        try:
            rec = ClipRecord(row["source"], float(row["start_s"]), float(row["end_s"]), row["label"],
                             float(row["fps"]), int(row["width"]), int(row["height"]))
        except ValueError as exc:
            raise DataFormatError(f"{path}:{n}: {exc}") from None
        if rec.label not in LABEL_IDS or not rec.start_s < rec.end_s:
            raise DataFormatError(f"{path}:{n}: bad record {row}")
        out.append(rec)
    return out


# ---------------------------------------------------------------------------
# detections


DETECTION_COLUMNS = ("frame", "x_min", "y_min", "x_max", "y_max", "confidence")


def read_detections(path, width: int | None = None, height: int | None = None) -> list[Detection]:
    out = []
    for n, row in _read_csv(path, DETECTION_COLUMNS):
        try:
            d = Detection(int(row["frame"]), float(row["x_min"]), float(row["y_min"]),
                          float(row["x_max"]), float(row["y_max"]), float(row["confidence"]))
            if width is not None and height is not None:
                d.validate(width, height)
        except ValueError as exc:
            raise DataFormatError(f"{path}:{n}: {exc}") from None
        out.append(d)
    return out


def write_detections(path, detections: Iterable[Detection]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DETECTION_COLUMNS)
        for d in detections:
            w.writerow([d.frame, d.x_min, d.y_min, d.x_max, d.y_max, d.confidence])


# ---------------------------------------------------------------------------
# near-duplicate scan


@dataclass
class FeatureVector:
    id: str
    split: str
    dataset: str
    values: np.ndarray


def cosine_similarity(a, b) -> float:
    a = np.asarray(getattr(a, "values", a), dtype=float)
    b = np.asarray(getattr(b, "values", b), dtype=float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


@dataclass(frozen=True)
class Flag:
    train_id: str
    test_id: str
    similarity: float


def leakage_scan(train: Sequence[FeatureVector], test: Sequence[FeatureVector],
                 threshold: float = 0.75) -> list[Flag]:
    """Every train/test pair at or above ``threshold``, most similar first.

    Pairs within one split are not compared. Flags are for review; nothing
    is removed here.
    """
    if not train or not test:
        raise ValueError("leakage scan needs non-empty train and test sets")
    if not 0 < threshold:
        raise ValueError("threshold must be positive")
    A = np.stack([np.asarray(f.values, dtype=float) for f in train])
    B = np.stack([np.asarray(f.values, dtype=float) for f in test])
    na, nb = np.linalg.norm(A, axis=1), np.linalg.norm(B, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise ValueError("zero-norm feature vector")
    S = np.clip((A / na[:, None]) @ (B / nb[:, None]).T, -1.0, 1.0)
    ii, jj = np.nonzero(S >= threshold)
    flags = [Flag(train[i].id, test[j].id, float(S[i, j])) for i, j in zip(ii, jj)]
    flags.sort(key=lambda f: (-f.similarity, f.train_id, f.test_id))
    return flags


def clip_features(video: np.ndarray, k_side: int = 16) -> np.ndarray:
    """Grayscale, time-averaged frame downsampled to ``k_side``² block means.

    The vector is mean-centred so that the shared brightness floor of
    unrelated clips does not read as similarity.
    """
    gray = np.asarray(video, dtype=float).mean(axis=0).mean(axis=0)
    H, W = gray.shape
    rows = np.array_split(np.arange(H), k_side) if H >= k_side else [np.array([min(i * H // k_side, H - 1)]) for i in range(k_side)]
    cols = np.array_split(np.arange(W), k_side) if W >= k_side else [np.array([min(i * W // k_side, W - 1)]) for i in range(k_side)]
    v = np.array([[gray[np.ix_(r, c)].mean() for c in cols] for r in rows]).reshape(-1)
    return v - v.mean()


def read_features(path) -> list[FeatureVector]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:3] != ["id", "split", "dataset"]:
            raise DataFormatError(f"{path}:1: header must start with id,split,dataset")
        k = len(header) - 3
        for n, row in enumerate(reader, 2):
            if len(row) != k + 3:
                raise DataFormatError(f"{path}:{n}: expected {k + 3} fields, got {len(row)}")
            try:
                vals = np.array([float(x) for x in row[3:]])
            except ValueError:
                raise DataFormatError(f"{path}:{n}: non-numeric feature value") from None
            if row[1] not in ("train", "test"):
                raise DataFormatError(f"{path}:{n}: split {row[1]!r} not train/test")
            out.append(FeatureVector(row[0], row[1], row[2], vals))
    return out


def write_features(path, feats: Sequence[FeatureVector]) -> None:
    k = len(feats[0].values) if feats else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "split", "dataset"] + [f"v{i}" for i in range(k)])
        for f in feats:
            w.writerow([f.id, f.split, f.dataset] + [repr(float(v)) for v in f.values])


def write_flags(path, flags: Sequence[Flag]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["train_id", "test_id", "similarity"])
        for f in flags:
            w.writerow([f.train_id, f.test_id, f"{f.similarity:.6f}"])


# ---------------------------------------------------------------------------
# split statistics


@dataclass(frozen=True)
class ClipEntry:
    id: str
    dataset: str
    split: str
    label: str


# train (violent, non-violent), test (violent, non-violent) per source dataset
PAPER_SPLITS = {
    "RWF-2000": ((800, 800), (200, 200)),
    "RLVS": ((800, 800), (200, 200)),
    "SURV": ((120, 120), (30, 30)),
    "VioPeru": ((112, 112), (28, 28)),
}


def entries_from_counts(dataset: str, splits) -> list[ClipEntry]:
    out = []
    for split, counts in zip(("train", "test"), splits):
        for label, n in zip(("violent", "non-violent"), counts):
            out += [ClipEntry(f"{dataset}/{split}/{label}/{i:05d}", dataset, split, label) for i in range(n)]
    return out


def combined_stats(entries: Sequence[ClipEntry], removals: Iterable[str] = ()) -> dict:
    """Per-dataset and total violent/non-violent counts per split after removals.

    Returns ``{dataset: {"train": [v, nv], "test": [v, nv]}, ..., "Total": ...}``.
    """
    by_id = {e.id: e for e in entries}
    if len(by_id) != len(entries):
        raise ValueError("duplicate clip ids")
    for rid in removals:
        if rid not in by_id:
            raise KeyError(f"cannot remove unknown clip {rid!r}")
        del by_id[rid]
    table: dict[str, dict[str, list[int]]] = {}
    for e in entries:
        table.setdefault(e.dataset, {"train": [0, 0], "test": [0, 0]})
    table["Total"] = {"train": [0, 0], "test": [0, 0]}
    for e in by_id.values():
        col = LABEL_IDS[e.label]
        table[e.dataset][e.split][col] += 1
        table["Total"][e.split][col] += 1
    return table


def format_stats(table: dict) -> str:
    lines = [f"{'dataset':<12} {'train_v':>8} {'train_nv':>8} {'test_v':>8} {'test_nv':>8}"]
    for name, row in table.items():
        lines.append(f"{name:<12} {row['train'][0]:>8} {row['train'][1]:>8} {row['test'][0]:>8} {row['test'][1]:>8}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass
class Corpus:
    ids: list[str]
    videos: np.ndarray                 # [n, 3, T, H, W] in [0, 1]
    labels: np.ndarray                 # 0 violent, 1 non-violent
    detections: list[list[Detection]]
    boxes: list[np.ndarray] = field(default_factory=list)   # per clip [T, 2, 4]

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, idx) -> "Corpus":
        idx = list(idx)
        return Corpus([self.ids[i] for i in idx], self.videos[idx], self.labels[idx],
                      [self.detections[i] for i in idx], [self.boxes[i] for i in idx] if self.boxes else [])


def _boxes_overlap(a, b) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def synth_corpus(seed: int, n_clips: int, dims: tuple[int, int, int] = (4, 16, 16),
                 blob: int | None = None, prefix: str = "synth") -> Corpus:
    """Two square 'actors' per clip over a faint static background texture.

    Violent clips: the actors travel to a shared meeting point, touch there
    (overlapping boxes) in a middle frame, then part. Non-violent clips: the
    actors stay in opposite horizontal halves and never touch. Actor 1 is
    drawn in red, actor 2 in green. Classes are balanced (odd ``n_clips``
    gives the extra clip to the violent class).
    """
    T_, H, W = dims
    s = blob or max(2, min(H, W) // 4)
    rng = np.random.default_rng(seed)
    labels = np.array([i % 2 for i in range(n_clips)])
    labels = labels[rng.permutation(n_clips)]
    videos = np.empty((n_clips, 3, T_, H, W))
    dets, all_boxes, ids = [], [], []
    for c, label in enumerate(labels):
        bg = 0.15 * rng.random((H, W))
        video = np.broadcast_to(bg, (3, T_, H, W)).copy()
        if label == 0:
            boxes = _colliding_track(rng, T_, H, W, s)
        else:
            boxes = _parallel_track(rng, T_, H, W, s)
        clip_dets = []
        for t in range(T_):
            for a, ch in ((0, 0), (1, 1)):
                x0, y0, x1, y1 = boxes[t, a]
                video[ch, t, y0:y1, x0:x1] = 0.9
                clip_dets.append(Detection(t, float(x0), float(y0), float(x1), float(y1),
                                           float(np.round(rng.uniform(0.5, 1.0), 3))))
        videos[c] = video
        dets.append(clip_dets)
        all_boxes.append(boxes)
        ids.append(f"{prefix}-{seed}-{c:04d}")
    return Corpus(ids, videos, labels, dets, all_boxes)


def _box(x, y, s):
    return [int(x), int(y), int(x) + s, int(y) + s]


def _colliding_track(rng, T_, H, W, s) -> np.ndarray:
    meet = (rng.integers(0, W - s + 1), rng.integers(0, H - s + 1))
    tc = int(rng.integers(T_ // 2 - (T_ > 2), T_ // 2 + 1)) if T_ > 1 else 0
    boxes = np.zeros((T_, 2, 4), dtype=int)
    for a in range(2):
        start = np.array([rng.integers(0, W - s + 1), rng.integers(0, H - s + 1)], dtype=float)
        end = np.array([rng.integers(0, W - s + 1), rng.integers(0, H - s + 1)], dtype=float)
        m = np.array(meet, dtype=float)
        for t in range(T_):
            if t <= tc:
                f = t / tc if tc else 1.0
                p = start + (m - start) * f
            else:
                f = (t - tc) / max(T_ - 1 - tc, 1)
                p = m + (end - m) * f
            boxes[t, a] = _box(round(p[0]), round(p[1]), s)
    return boxes


def _parallel_track(rng, T_, H, W, s) -> np.ndarray:
    boxes = np.zeros((T_, 2, 4), dtype=int)
    half = H // 2
    # actor 1 stays in rows [0, half - 1), actor 2 in [half + 1, H): a gap of 2 rows
    ys = (rng.integers(0, max(half - 1 - s, 0) + 1), rng.integers(half + 1, max(H - s, half + 1) + 1))
    for a in range(2):
        x0, x1 = rng.integers(0, W - s + 1, size=2)
        for t in range(T_):
            f = t / (T_ - 1) if T_ > 1 else 0.0
            boxes[t, a] = _box(round(x0 + (x1 - x0) * f), ys[a], s)
    return boxes


def any_overlap(boxes: np.ndarray) -> bool:
    return any(_boxes_overlap(b[0], b[1]) for b in boxes)


# ---------------------------------------------------------------------------
# on-disk corpora: one directory of PPM frames per clip plus index.csv


INDEX_COLUMNS = ("id", "label", "split", "frames", "width", "height")


def save_corpus(root, corpus: Corpus, split: Sequence[str] | None = None) -> None:
    from PIL import Image

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    split = split or ["train"] * len(corpus)
    with open(root / "index.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(INDEX_COLUMNS)
        for cid, video, label, sp, ds in zip(corpus.ids, corpus.videos, corpus.labels, split, corpus.detections):
            d = root / cid
            d.mkdir(exist_ok=True)
            frames = np.round(np.clip(video, 0, 1) * 255).astype(np.uint8)
            for t in range(frames.shape[1]):
                Image.fromarray(np.moveaxis(frames[:, t], 0, -1), "RGB").save(d / f"frame_{t:04d}.ppm")
            write_detections(d / "detections.csv", ds)
            w.writerow([cid, int(label), sp, frames.shape[1], frames.shape[3], frames.shape[2]])


def load_corpus(root) -> tuple[Corpus, list[str]]:
    """Read a corpus written by :func:`save_corpus`; returns (corpus, splits)."""
    from PIL import Image

    root = Path(root)
    index = root / "index.csv"
    if not index.exists():
        raise FileNotFoundError(f"no index.csv under {root}")
    ids, videos, labels, splits, dets = [], [], [], [], []
    for n, row in _read_csv(index, INDEX_COLUMNS):
        try:
            nf, label = int(row["frames"]), int(row["label"])
        except ValueError:
            raise DataFormatError(f"{index}:{n}: bad frames/label field") from None
        if label not in (0, 1):
            raise DataFormatError(f"{index}:{n}: label {label} not 0/1")
        d = root / row["id"]
        frames = [np.asarray(Image.open(d / f"frame_{t:04d}.ppm").convert("RGB")) for t in range(nf)]
        videos.append(np.moveaxis(np.stack(frames), -1, 0).astype(float) / 255.0)
        labels.append(label)
        ids.append(row["id"])
        splits.append(row["split"])
        det_path = d / "detections.csv"
        dets.append(read_detections(det_path) if det_path.exists() else [])
    return Corpus(ids, np.stack(videos), np.array(labels), dets), splits


def _read_csv(path, columns) -> list[tuple[int, dict]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != tuple(columns):
            raise DataFormatError(f"{path}:1: expected header {','.join(columns)}")
        rows = []
        for n, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != len(columns):
                raise DataFormatError(f"{path}:{n}: expected {len(columns)} fields, got {len(row)}")
            rows.append((n, dict(zip(columns, (x.strip() for x in row)))))
        return rows


def read_id_column(path, column: str) -> dict[str, int]:
    """Map id -> integer class from a two-column CSV (``id,<column>``).

    Values may be 0/1 or the label names.
    """
    out = {}
    for n, row in _read_csv(path, ("id", column)):
        v = row[column]
        if v in LABEL_IDS:
            out[row["id"]] = LABEL_IDS[v]
        elif v in ("0", "1"):
            out[row["id"]] = int(v)
        else:
            raise DataFormatError(f"{path}:{n}: {column} {v!r} not 0/1/violent/non-violent")
        if list(out).count(row["id"]) > 1:
            raise DataFormatError(f"{path}:{n}: duplicate id {row['id']!r}")
    return out
