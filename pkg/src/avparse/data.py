"""Dataset ingestion and the synthetic desk-scale generator.

File formats (all versioned, all deterministic given their inputs):

* feature files -- ``"AVMF" | version u32 | T u32 | D u32 | T*D f32 LE``;
* label CSV -- header ``video_id,modality,segment,labels`` with semicolon-
  joined category names, empty labels meaning a null (unannotated) row; the
  same schema carries pseudo-labels, ground truth and prediction dumps. The
  writer marks rows that are annotated as event-free with the ``NONE`` token
  so they survive a round trip without turning into nulls;
* annotation patches -- same columns, labels ``DISCARD`` flagging the whole
  video for exclusion from cross-modal combination;
* manifest -- ``key = value`` lines plus one ``video = id|audio|visual|labels``
  record per video, paths relative to the manifest.
"""

from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, FormatError, ParseError, PatchError

FEATURE_MAGIC = b"AVMF"
FEATURE_VERSION = 1
MANIFEST_FORMAT = "avparse-manifest"
MANIFEST_VERSION = 1
LABEL_CSV_HEADER = ["video_id", "modality", "segment", "labels"]
DISCARD_TOKEN = "DISCARD"
EMPTY_TOKEN = "NONE"  # annotated as event-free, as opposed to unannotated


# -- records -------------------------------------------------------------------


@dataclass
class VideoRecord:
    """One video: features, weak label, and per-modality pseudo-labels."""

    video_id: str
    audio: np.ndarray  # [T, d_a]
    visual: np.ndarray  # [T, d_v]
    video_label: np.ndarray  # [C] 0/1
    pseudo_a: np.ndarray  # [T, C] 0/1
    pseudo_v: np.ndarray
    null_a: np.ndarray  # [T] bool, true where the pseudo row is unannotated
    null_v: np.ndarray
    discard: bool = False
    visual_donor: str | None = None  # provenance, set on combined records
    audio_donor: str | None = None

    def validate(self) -> None:
        t = self.audio.shape[0]
        if self.visual.shape[0] != t or self.pseudo_a.shape[0] != t or self.pseudo_v.shape[0] != t:
            raise ContractError(f"{self.video_id}: segment counts disagree across fields")
        for name, arr in (("video_label", self.video_label),
                          ("pseudo_a", self.pseudo_a), ("pseudo_v", self.pseudo_v)):
            if not np.all((arr == 0) | (arr == 1)):
                raise ContractError(f"{self.video_id}: {name} must be 0/1-valued")
        for null, pseudo, name in ((self.null_a, self.pseudo_a, "a"),
                                   (self.null_v, self.pseudo_v, "v")):
            if np.any(pseudo[null] != 0):
                raise ContractError(f"{self.video_id}: null {name}-rows must be all-zero")

    def has_nulls(self) -> bool:
        return bool(self.null_a.any() or self.null_v.any())

    def pseudo_class_union(self) -> np.ndarray:
        """0/1 vector of classes present in any segment of either modality."""
        return ((self.pseudo_a.any(axis=0)) | (self.pseudo_v.any(axis=0))).astype(np.float64)


@dataclass
class Manifest:
    split: str
    n_segments: int
    classes: list[str]
    records: list[tuple[str, str, str, frozenset]]  # (id, audio path, visual path, labels)


# -- feature files ----------------------------------------------------------------


def write_feature_file(path, values: np.ndarray) -> None:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise FormatError(f"feature array must be 2-D, got shape {values.shape}")
    t, d = values.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", FEATURE_VERSION, t, d))
        fh.write(values.astype("<f4").tobytes())


def read_feature_file(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise FormatError(f"{path}: truncated header")
    if blob[:4] != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {FEATURE_MAGIC!r}")
    version, t, d = struct.unpack("<III", blob[4:16])
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if t == 0 or d == 0:
        raise FormatError(f"{path}: zero dimension in header (T={t}, D={d})")
    expected = 16 + 4 * t * d
    if len(blob) != expected:
        raise FormatError(f"{path}: payload is {len(blob) - 16} bytes, expected {4 * t * d}")
    values = np.frombuffer(blob[16:], dtype="<f4").astype(np.float64)
    return values.reshape(t, d)


# -- label CSVs --------------------------------------------------------------------


def _parse_label_field(raw: str) -> list[str]:
    raw = raw.strip()
    if not raw:
        return []
    return [part.strip() for part in raw.split(";")]


def parse_label_csv(path, vocabulary, n_segments: int | None = None):
    """Parse a label CSV into per-video, per-modality matrices.

    Returns ``(table, n_segments)`` where ``table[video_id][modality]`` is a
    ``(matrix [T, C], null_mask [T])`` pair. Rows absent from the file are
    treated as null.
    """
    class_index = {name: i for i, name in enumerate(vocabulary)}
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != LABEL_CSV_HEADER:
            raise ParseError(f"{path}: header must be {','.join(LABEL_CSV_HEADER)}")
        for row in reader:
            line = reader.line_num
            if len(row) != 4:
                raise ParseError(f"{path} line {line}: expected 4 columns, got {len(row)}")
            video_id, modality, seg_raw, labels_raw = row
            if modality not in ("a", "v"):
                raise ParseError(f"{path} line {line}: modality must be 'a' or 'v', got {modality!r}")
            try:
                segment = int(seg_raw)
            except ValueError:
                raise ParseError(f"{path} line {line}: segment {seg_raw!r} is not an integer") from None
            if segment < 0 or (n_segments is not None and segment >= n_segments):
                raise ParseError(f"{path} line {line}: segment {segment} out of range")
            if labels_raw.strip() == EMPTY_TOKEN:
                names: list[str] = []
                annotated = True
            else:
                names = _parse_label_field(labels_raw)
                annotated = bool(names)
                for name in names:
                    if name not in class_index:
                        raise ParseError(f"{path} line {line}: unknown category {name!r}")
            rows.append((line, video_id, modality, segment, names, annotated))
    t_len = n_segments if n_segments is not None else (
        max((seg for _, _, _, seg, _, _ in rows), default=-1) + 1)
    table: dict[str, dict[str, tuple[np.ndarray, np.ndarray]]] = {}
    seen: set[tuple[str, str, int]] = set()
    for line, video_id, modality, segment, names, annotated in rows:
        key = (video_id, modality, segment)
        if key in seen:
            raise ParseError(f"{path} line {line}: duplicate row for {key}")
        seen.add(key)
        per_video = table.setdefault(video_id, {})
        if modality not in per_video:
            per_video[modality] = (np.zeros((t_len, len(vocabulary))), np.ones(t_len, dtype=bool))
        matrix, null_mask = per_video[modality]
        null_mask[segment] = not annotated
        for name in names:
            matrix[segment, class_index[name]] = 1.0
    return table, t_len


def write_label_csv(path, table, vocabulary, n_segments: int) -> None:
    """Write one row per (video, modality, segment).

    ``table`` maps video_id to a dict with 'a'/'v' matrices, optionally as
    ``(matrix, null_mask)`` pairs. With a mask, unannotated rows are written
    as empty labels and annotated event-free rows as ``NONE``; without one,
    event-free rows are written empty (the convention for prediction dumps
    and ground truth, where the flag carries no meaning).
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LABEL_CSV_HEADER)
        for video_id in sorted(table):
            for modality in ("a", "v"):
                entry = table[video_id].get(modality)
                if entry is None:
                    continue
                matrix, null_mask = entry if isinstance(entry, tuple) else (entry, None)
                for t in range(n_segments):
                    names = [vocabulary[c] for c in np.flatnonzero(matrix[t])]
                    field = ";".join(names)
                    if not names and null_mask is not None and not null_mask[t]:
                        field = EMPTY_TOKEN
                    writer.writerow([video_id, modality, t, field])


def apply_annotation_patch(records: list[VideoRecord], patch_path, vocabulary) -> list[VideoRecord]:
    """Fix null pseudo rows from a patch CSV; ``DISCARD`` flags the video.

    Patching an already-labelled row is an error: patches exist to resolve
    nulls, never to overwrite annotations.
    """
    by_id = {r.video_id: r for r in records}
    class_index = {name: i for i, name in enumerate(vocabulary)}
    with open(patch_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != LABEL_CSV_HEADER:
            raise ParseError(f"{patch_path}: header must be {','.join(LABEL_CSV_HEADER)}")
        for row in reader:
            line = reader.line_num
            if len(row) != 4:
                raise ParseError(f"{patch_path} line {line}: expected 4 columns")
            video_id, modality, seg_raw, labels_raw = row
            record = by_id.get(video_id)
            if record is None:
                raise PatchError(f"{patch_path} line {line}: unknown video {video_id!r}")
            if modality not in ("a", "v"):
                raise ParseError(f"{patch_path} line {line}: bad modality {modality!r}")
            try:
                segment = int(seg_raw)
            except ValueError:
                raise ParseError(f"{patch_path} line {line}: bad segment {seg_raw!r}") from None
            if not 0 <= segment < record.pseudo_a.shape[0]:
                raise ParseError(f"{patch_path} line {line}: segment {segment} out of range")
            if labels_raw.strip() == DISCARD_TOKEN:
                record.discard = True
                continue
            names = _parse_label_field(labels_raw)
            if not names:
                raise ParseError(f"{patch_path} line {line}: empty patch labels")
            matrix, null_mask = ((record.pseudo_a, record.null_a) if modality == "a"
                                 else (record.pseudo_v, record.null_v))
            if not null_mask[segment]:
                raise PatchError(
                    f"{patch_path} line {line}: segment {segment} of {video_id}/{modality} "
                    "is already annotated; patches may only fill null rows")
            for name in names:
                if name not in class_index:
                    raise ParseError(f"{patch_path} line {line}: unknown category {name!r}")
                matrix[segment, class_index[name]] = 1.0
            null_mask[segment] = False
    return records


# -- manifest -----------------------------------------------------------------------


def write_manifest(path, split: str, n_segments: int, classes, records) -> None:
    """``records`` is an iterable of (video_id, audio_path, visual_path, label_names)."""
    lines = [
        f"format = {MANIFEST_FORMAT}",
        f"version = {MANIFEST_VERSION}",
        f"split = {split}",
        f"segments = {n_segments}",
        f"classes = {';'.join(classes)}",
    ]
    for video_id, audio_path, visual_path, labels in records:
        label_str = ";".join(sorted(labels))
        lines.append(f"video = {video_id}|{audio_path}|{visual_path}|{label_str}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def parse_manifest(path) -> Manifest:
    keys: dict[str, str] = {}
    videos: list[tuple[str, str, str, frozenset]] = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ParseError(f"{path} line {lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key == "video":
                parts = value.split("|")
                if len(parts) != 4:
                    raise ParseError(f"{path} line {lineno}: video record needs 4 '|' fields")
                vid, audio_path, visual_path, labels_raw = parts
                videos.append((vid, audio_path, visual_path,
                               frozenset(_parse_label_field(labels_raw))))
            else:
                keys[key] = value
    for required in ("format", "version", "split", "segments", "classes"):
        if required not in keys:
            raise ParseError(f"{path}: missing manifest key {required!r}")
    if keys["format"] != MANIFEST_FORMAT:
        raise ParseError(f"{path}: format is {keys['format']!r}, expected {MANIFEST_FORMAT!r}")
    if int(keys["version"]) != MANIFEST_VERSION:
        raise ParseError(f"{path}: unsupported manifest version {keys['version']}")
    classes = _parse_label_field(keys["classes"])
    if len(set(classes)) != len(classes):
        raise ParseError(f"{path}: duplicate class names")
    ids = [v[0] for v in videos]
    if len(set(ids)) != len(ids):
        raise ParseError(f"{path}: duplicate video ids")
    class_set = set(classes)
    for vid, _, _, labels in videos:
        unknown = labels - class_set
        if unknown:
            raise ParseError(f"{path}: video {vid} has unknown labels {sorted(unknown)}")
    return Manifest(keys["split"], int(keys["segments"]), classes, videos)


# -- synthetic dataset ----------------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    n_videos: int = 200
    n_val: int = 60
    n_segments: int = 10
    n_classes: int = 25
    d_audio: int = 64
    d_visual: int = 64
    noise: float = 0.1
    noise_audio: float | None = None  # per-modality override of `noise`
    noise_visual: float | None = None
    signal_audio: float = 1.0  # event activation magnitude per modality
    signal_visual: float = 1.0
    onset_ramp: float = 0.0  # 0.6 ramps activation from 0.4 at onset to 1.6 at the end
    flip_rate: float = 0.0
    correlation: float = 0.0  # chance a visual event is mirrored in audio
    shared_directions: bool = False  # same class directions in both modalities
    max_events: int = 3

    def __post_init__(self):
        for name in ("n_videos", "n_segments", "n_classes", "d_audio", "d_visual", "max_events"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.n_val < 0 or self.noise < 0 or not 0 <= self.flip_rate <= 1 or not 0 <= self.correlation <= 1:
            raise ConfigError("invalid synthetic-data options")
        for override in (self.noise_audio, self.noise_visual):
            if override is not None and override < 0:
                raise ConfigError("per-modality noise must be >= 0")
        if self.signal_audio < 0 or self.signal_visual < 0:
            raise ConfigError("signal magnitudes must be >= 0")
        if not 0 <= self.onset_ramp < 1:
            raise ConfigError("onset_ramp must be in [0, 1)")
        if self.shared_directions and self.d_audio != self.d_visual:
            raise ConfigError("shared_directions requires d_audio == d_visual")

    @property
    def sigma_audio(self) -> float:
        return self.noise if self.noise_audio is None else self.noise_audio

    @property
    def sigma_visual(self) -> float:
        return self.noise if self.noise_visual is None else self.noise_visual


@dataclass
class SyntheticDataset:
    config: SynthConfig
    classes: list[str]
    train: list[VideoRecord] = field(default_factory=list)
    val: list[VideoRecord] = field(default_factory=list)
    gt_train: dict = field(default_factory=dict)  # video_id -> (gt_a, gt_v)
    gt_val: dict = field(default_factory=dict)


def default_classes(n_classes: int) -> list[str]:
    return [f"event{i:02d}" for i in range(n_classes)]


def _sample_events(rng: np.random.Generator, cfg: SynthConfig, count: int):
    events = []
    for _ in range(count):
        c = int(rng.integers(cfg.n_classes))
        length = int(rng.integers(1, min(6, cfg.n_segments) + 1))
        start = int(rng.integers(0, cfg.n_segments - length + 1))
        events.append((c, start, start + length))
    return events


def _events_to_matrix(events, cfg: SynthConfig) -> np.ndarray:
    m = np.zeros((cfg.n_segments, cfg.n_classes))
    for c, start, end in events:
        m[start:end, c] = 1.0
    return m


def _activation_matrix(events, cfg: SynthConfig) -> np.ndarray:
    """Per-segment event activation; with ``onset_ramp`` the strength climbs
    linearly from (1 - ramp) at onset to (1 + ramp) at the event's last
    segment, so early segments are only detectable with lookahead."""
    act = np.zeros((cfg.n_segments, cfg.n_classes))
    ramp = cfg.onset_ramp
    for c, start, end in events:
        length = end - start
        for t in range(start, end):
            frac = 1.0 if length == 1 else (t - start) / (length - 1)
            act[t, c] = max(act[t, c], (1.0 - ramp) + 2.0 * ramp * frac)
    return act


def _corrupt(matrix: np.ndarray, rng: np.random.Generator, flip_rate: float) -> np.ndarray:
    """Per segment row, toggle one random class cell with probability flip_rate."""
    out = matrix.copy()
    if flip_rate <= 0:
        return out
    for t in range(out.shape[0]):
        if rng.random() < flip_rate:
            c = int(rng.integers(out.shape[1]))
            out[t, c] = 1.0 - out[t, c]
    return out


def make_synthetic(cfg: SynthConfig) -> SyntheticDataset:
    """Plant 1..max_events per modality on class-specific directions.

    Features are ``direction[class]`` summed over active events plus Gaussian
    noise, so the planted signal is linearly separable and an overfit run has
    a known-achievable optimum. The same planted truth feeds both the ground
    truth tables and the (optionally corrupted) pseudo-labels.
    """
    rng = np.random.default_rng(cfg.seed)
    classes = default_classes(cfg.n_classes)
    dirs_a = rng.standard_normal((cfg.n_classes, cfg.d_audio))
    dirs_a /= np.linalg.norm(dirs_a, axis=1, keepdims=True)
    if cfg.shared_directions:
        dirs_v = dirs_a
    else:
        dirs_v = rng.standard_normal((cfg.n_classes, cfg.d_visual))
        dirs_v /= np.linalg.norm(dirs_v, axis=1, keepdims=True)
    ds = SyntheticDataset(cfg, classes)
    total = cfg.n_videos + cfg.n_val
    for i in range(total):
        video_id = f"vid_{i:05d}"
        ev_v = _sample_events(rng, cfg, int(rng.integers(1, cfg.max_events + 1)))
        mirrored = [ev for ev in ev_v if rng.random() < cfg.correlation]
        if len(mirrored) >= cfg.max_events:
            n_private = 0
        elif mirrored:
            n_private = int(rng.integers(0, cfg.max_events - len(mirrored) + 1))
        else:
            n_private = int(rng.integers(1, cfg.max_events + 1))
        ev_a = mirrored + _sample_events(rng, cfg, n_private)
        gt_v = _events_to_matrix(ev_v, cfg)
        gt_a = _events_to_matrix(ev_a, cfg)
        audio = (cfg.signal_audio * _activation_matrix(ev_a, cfg) @ dirs_a
                 + rng.normal(0.0, cfg.sigma_audio, (cfg.n_segments, cfg.d_audio)))
        visual = (cfg.signal_visual * _activation_matrix(ev_v, cfg) @ dirs_v
                  + rng.normal(0.0, cfg.sigma_visual, (cfg.n_segments, cfg.d_visual)))
        label = (gt_a.any(axis=0) | gt_v.any(axis=0)).astype(np.float64)
        record = VideoRecord(
            video_id=video_id,
            audio=audio,
            visual=visual,
            video_label=label,
            pseudo_a=_corrupt(gt_a, rng, cfg.flip_rate),
            pseudo_v=_corrupt(gt_v, rng, cfg.flip_rate),
            null_a=np.zeros(cfg.n_segments, dtype=bool),
            null_v=np.zeros(cfg.n_segments, dtype=bool),
        )
        if i < cfg.n_videos:
            ds.train.append(record)
            ds.gt_train[video_id] = (gt_a, gt_v)
        else:
            ds.val.append(record)
            ds.gt_val[video_id] = (gt_a, gt_v)
    return ds


# -- dataset directories ----------------------------------------------------------------


def write_split(out_dir: str, split: str, records, gt, classes, n_segments: int) -> None:
    feature_dir = os.path.join(out_dir, "features")
    os.makedirs(feature_dir, exist_ok=True)
    manifest_records = []
    pseudo_table = {}
    for r in sorted(records, key=lambda r: r.video_id):
        audio_rel = os.path.join("features", f"{r.video_id}.audio.avmf")
        visual_rel = os.path.join("features", f"{r.video_id}.visual.avmf")
        write_feature_file(os.path.join(out_dir, audio_rel), r.audio)
        write_feature_file(os.path.join(out_dir, visual_rel), r.visual)
        labels = [classes[c] for c in np.flatnonzero(r.video_label)]
        manifest_records.append((r.video_id, audio_rel, visual_rel, labels))
        pseudo_table[r.video_id] = {"a": (r.pseudo_a, r.null_a), "v": (r.pseudo_v, r.null_v)}
    write_manifest(os.path.join(out_dir, f"manifest_{split}.txt"),
                   split, n_segments, classes, manifest_records)
    write_label_csv(os.path.join(out_dir, f"pseudo_{split}.csv"),
                    pseudo_table, classes, n_segments)
    if gt is not None:
        gt_table = {vid: {"a": m[0], "v": m[1]} for vid, m in gt.items()}
        write_label_csv(os.path.join(out_dir, f"gt_{split}.csv"), gt_table, classes, n_segments)


def generate_synthetic_dataset(cfg: SynthConfig, out_dir: str) -> SyntheticDataset:
    ds = make_synthetic(cfg)
    os.makedirs(out_dir, exist_ok=True)
    write_split(out_dir, "train", ds.train, ds.gt_train, ds.classes, cfg.n_segments)
    if ds.val:
        write_split(out_dir, "val", ds.val, ds.gt_val, ds.classes, cfg.n_segments)
    return ds


@dataclass
class LoadedSplit:
    split: str
    n_segments: int
    classes: list[str]
    records: list[VideoRecord]
    gt: dict | None  # video_id -> (gt_a, gt_v), when the split ships ground truth


def load_split(data_dir: str, split: str) -> LoadedSplit:
    manifest_path = os.path.join(data_dir, f"manifest_{split}.txt")
    if not os.path.exists(manifest_path):
        raise ParseError(f"no manifest for split {split!r} under {data_dir}")
    manifest = parse_manifest(manifest_path)
    base = os.path.dirname(os.path.abspath(manifest_path))
    class_index = {name: i for i, name in enumerate(manifest.classes)}
    pseudo_path = os.path.join(data_dir, f"pseudo_{split}.csv")
    pseudo_table: dict = {}
    if os.path.exists(pseudo_path):
        pseudo_table, _ = parse_label_csv(pseudo_path, manifest.classes, manifest.n_segments)
    t, c = manifest.n_segments, len(manifest.classes)
    records = []
    for vid, audio_rel, visual_rel, labels in manifest.records:
        audio = read_feature_file(os.path.join(base, audio_rel))
        visual = read_feature_file(os.path.join(base, visual_rel))
        label_vec = np.zeros(c)
        for name in labels:
            label_vec[class_index[name]] = 1.0
        entry = pseudo_table.get(vid, {})
        pa, na = entry.get("a", (np.zeros((t, c)), np.ones(t, dtype=bool)))
        pv, nv = entry.get("v", (np.zeros((t, c)), np.ones(t, dtype=bool)))
        records.append(VideoRecord(vid, audio, visual, label_vec,
                                   pa.copy(), pv.copy(), na.copy(), nv.copy()))
    gt = None
    gt_path = os.path.join(data_dir, f"gt_{split}.csv")
    if os.path.exists(gt_path):
        gt_table, _ = parse_label_csv(gt_path, manifest.classes, manifest.n_segments)
        gt = {}
        for vid, entry in gt_table.items():
            ga = entry.get("a", (np.zeros((t, c)), None))[0]
            gv = entry.get("v", (np.zeros((t, c)), None))[0]
            gt[vid] = (ga, gv)
    return LoadedSplit(split, manifest.n_segments, manifest.classes, records, gt)
