"""Dataset model, synthetic session generator, on-disk format, and sampling.

A dataset is a set of one-on-one conversation sessions. Each session pairs
exactly two subjects and follows a noise schedule: the background level
switches every 25-35 seconds between quiet and three noisy levels (55, 65,
75 dBA), balanced within the session. Each subject's recording is cut into
one segment per schedule entry, and a segment is a (frames x feature_dim)
matrix of per-frame feature vectors.

The synthetic generator plants a known structure into those features:

    x_frame = style_gain * u_subj
            + age_leak_gain * age_norm * g_dir
            + response(level) * (normal_gain + hearing_gain * h) * w_subj
            + frame noise

with u_subj, w_subj, g_dir fixed unit vectors. The hearing signal lives
only in the quiet-vs-noisy displacement (response(quiet) = 0), while the
age component leaks into every frame, which is exactly the confound the
training pipeline is supposed to remove.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .seeding import STREAM_GENERATOR, substream

__all__ = [
    "InvalidConfig",
    "InsufficientFrames",
    "FormatError",
    "NoQuietSegment",
    "NoiseLevel",
    "NOISY_LEVELS",
    "Segment",
    "SubjectRecord",
    "SessionRecord",
    "DatasetManifest",
    "Dataset",
    "Triplet",
    "GeneratorConfig",
    "generate_synthetic",
    "segment_stream",
    "save_dataset",
    "load_dataset",
    "datasets_equal",
    "sample_triplets",
    "select_anchor",
]

FORMAT_VERSION = 1


class InvalidConfig(ValueError):
    """Generator configuration violates its invariants."""


class InsufficientFrames(ValueError):
    """A frame stream is shorter than its schedule requires."""


class FormatError(ValueError):
    """On-disk data is malformed or violates dataset invariants."""


class NoQuietSegment(LookupError):
    """A subject's session contains no quiet segment to anchor on."""


class NoiseLevel(Enum):
    QUIET = "quiet"
    DB55 = "db55"
    DB65 = "db65"
    DB75 = "db75"

    @property
    def dba(self) -> int | None:
        """Noise level in dBA; None for the quiet condition."""
        return {"quiet": None, "db55": 55, "db65": 65, "db75": 75}[self.value]

    @property
    def is_quiet(self) -> bool:
        return self is NoiseLevel.QUIET


NOISY_LEVELS = (NoiseLevel.DB55, NoiseLevel.DB65, NoiseLevel.DB75)


@dataclass
class Segment:
    """One constant-noise-level clip of one subject; the unit of prediction."""

    session_id: str
    subject_id: str
    order_index: int
    noise_level: NoiseLevel
    frames: np.ndarray  # (T, feature_dim)

    @property
    def segment_id(self) -> str:
        return f"{self.session_id}/{self.subject_id}/{self.order_index}"


@dataclass
class SubjectRecord:
    subject_id: str
    age: int
    hearing_status: int  # 1 = hearing loss


@dataclass
class SessionRecord:
    session_id: str
    subject_ids: tuple[str, str]
    schedule: list[tuple[NoiseLevel, int]]  # (level, duration in seconds)


@dataclass
class DatasetManifest:
    format_version: int
    feature_dim: int
    fps: int
    min_frames: int
    max_frames: int
    age_min: int
    age_max: int
    n_subjects: int
    n_sessions: int
    n_segments: int
    generator_config: dict | None = None


@dataclass
class Dataset:
    manifest: DatasetManifest
    subjects: dict[str, SubjectRecord]
    sessions: dict[str, SessionRecord]
    segments: list[Segment]

    def subject_ids(self) -> list[str]:
        return sorted(self.subjects)

    def session_ids(self) -> list[str]:
        return sorted(self.sessions)

    def segments_by_subject(self) -> dict[str, list[Segment]]:
        """Segments grouped per subject, ordered by position in the session."""
        grouped: dict[str, list[Segment]] = {sid: [] for sid in self.subject_ids()}
        for seg in self.segments:
            grouped[seg.subject_id].append(seg)
        for segs in grouped.values():
            segs.sort(key=lambda s: (s.session_id, s.order_index))
        return grouped

    def subset_by_sessions(self, session_ids: Iterable[str]) -> "Dataset":
        """The sub-dataset covering exactly the given sessions."""
        keep = set(session_ids)
        missing = keep - set(self.sessions)
        if missing:
            raise KeyError(f"unknown session ids: {sorted(missing)}")
        sessions = {sid: self.sessions[sid] for sid in sorted(keep)}
        subject_ids = {s for sess in sessions.values() for s in sess.subject_ids}
        subjects = {sid: self.subjects[sid] for sid in sorted(subject_ids)}
        segments = [seg for seg in self.segments if seg.session_id in keep]
        manifest = replace(
            self.manifest,
            n_subjects=len(subjects),
            n_sessions=len(sessions),
            n_segments=len(segments),
        )
        return Dataset(manifest, subjects, sessions, segments)

    def validate(self) -> None:
        """Check every invariant; raises FormatError instead of repairing."""
        m = self.manifest
        if m.format_version != FORMAT_VERSION:
            raise FormatError(f"unsupported format version {m.format_version}")
        if (len(self.subjects), len(self.sessions), len(self.segments)) != (
            m.n_subjects, m.n_sessions, m.n_segments,
        ):
            raise FormatError("manifest counts do not match the record files")
        seen_subject_session: dict[str, str] = {}
        for sess in self.sessions.values():
            if len(sess.subject_ids) != 2 or len(set(sess.subject_ids)) != 2:
                raise FormatError(f"session {sess.session_id} must pair exactly two subjects")
            for sid in sess.subject_ids:
                if sid not in self.subjects:
                    raise FormatError(f"session {sess.session_id} references unknown subject {sid}")
                if sid in seen_subject_session:
                    raise FormatError(f"subject {sid} appears in more than one session")
                seen_subject_session[sid] = sess.session_id
            counts = {level: 0 for level in NoiseLevel}
            for level, duration in sess.schedule:
                counts[level] += 1
                if not (m.min_frames <= duration * m.fps <= m.max_frames):
                    raise FormatError(
                        f"session {sess.session_id} entry duration {duration}s out of bounds"
                    )
            if sess.schedule and max(counts.values()) - min(counts.values()) > 1:
                raise FormatError(f"session {sess.session_id} noise levels unbalanced")
        for rec in self.subjects.values():
            if rec.hearing_status not in (0, 1):
                raise FormatError(f"subject {rec.subject_id} has non-binary hearing status")
            if not (m.age_min <= rec.age <= m.age_max):
                raise FormatError(f"subject {rec.subject_id} age {rec.age} outside manifest range")
        seen_orders: set[tuple[str, str, int]] = set()
        for seg in self.segments:
            if seg.session_id not in self.sessions:
                raise FormatError(f"segment references unknown session {seg.session_id}")
            if seg.subject_id not in self.subjects:
                raise FormatError(f"segment references unknown subject {seg.subject_id}")
            if seen_subject_session.get(seg.subject_id) != seg.session_id:
                raise FormatError(
                    f"segment of {seg.subject_id} not in that subject's session"
                )
            if seg.frames.ndim != 2 or seg.frames.shape[1] != m.feature_dim:
                raise FormatError(
                    f"segment {seg.segment_id} frames have shape {seg.frames.shape}, "
                    f"expected (*, {m.feature_dim})"
                )
            if not (m.min_frames <= seg.frames.shape[0] <= m.max_frames):
                raise FormatError(f"segment {seg.segment_id} frame count out of bounds")
            if not np.isfinite(seg.frames).all():
                raise FormatError(f"segment {seg.segment_id} contains non-finite values")
            key = (seg.session_id, seg.subject_id, seg.order_index)
            if key in seen_orders:
                raise FormatError(f"duplicate order_index for {seg.segment_id}")
            seen_orders.add(key)


@dataclass
class Triplet:
    """One noisy and two quiet segments of the same subject.

    The derived variation pairs are (s_n, s_q1) for the anchor embedding,
    (s_n, s_q2) for the positive, and (s_q1, s_q2) for the negative.
    """

    s_n: Segment
    s_q1: Segment
    s_q2: Segment

    @property
    def anchor_pair(self) -> tuple[Segment, Segment]:
        return (self.s_n, self.s_q1)

    @property
    def positive_pair(self) -> tuple[Segment, Segment]:
        return (self.s_n, self.s_q2)

    @property
    def negative_pair(self) -> tuple[Segment, Segment]:
        return (self.s_q1, self.s_q2)

    def validate(self) -> None:
        if self.s_n.noise_level.is_quiet:
            raise ValueError("s_n must be a noisy segment")
        if not (self.s_q1.noise_level.is_quiet and self.s_q2.noise_level.is_quiet):
            raise ValueError("s_q1 and s_q2 must be quiet segments")
        if self.s_q1 is self.s_q2:
            raise ValueError("s_q1 and s_q2 must be distinct segments")
        ids = {self.s_n.subject_id, self.s_q1.subject_id, self.s_q2.subject_id}
        if len(ids) != 1:
            raise ValueError("triplet segments must share one subject")


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------


def _default_noise_response() -> dict[NoiseLevel, float]:
    return {
        NoiseLevel.QUIET: 0.0,
        NoiseLevel.DB55: 0.5,
        NoiseLevel.DB65: 0.75,
        NoiseLevel.DB75: 1.0,
    }


@dataclass
class GeneratorConfig:
    """Knobs for the synthetic dataset; defaults give a desk-scale corpus.

    `age_leak_gain` = 0 produces the clean dataset (hearing signal only in
    the noise response); setting it > 0 plants the age confound on top of
    the age-correlated positive rates.
    """

    n_subjects: int = 60
    seed: int = 0
    feature_dim: int = 16
    fps: int = 5
    entries_per_session: int = 12
    min_entry_seconds: int = 25
    max_entry_seconds: int = 35
    age_ranges: tuple[tuple[int, int], ...] = ((18, 39), (40, 56), (57, 88))
    positive_rates: tuple[float, ...] = (0.18, 0.52, 0.76)
    hearing_variation_gain: float = 0.7
    normal_variation_gain: float = 0.3
    age_leak_gain: float = 0.0
    subject_style_gain: float = 1.0
    frame_noise_std: float = 0.5
    noise_response: dict[NoiseLevel, float] = field(default_factory=_default_noise_response)

    def validate(self) -> None:
        if self.n_subjects < 2 or self.n_subjects % 2:
            raise InvalidConfig("n_subjects must be even and at least 2")
        if self.seed < 0:
            raise InvalidConfig("seed must be non-negative")
        if self.feature_dim < 1 or self.fps < 1 or self.entries_per_session < 1:
            raise InvalidConfig("feature_dim, fps and entries_per_session must be positive")
        if not (0 < self.min_entry_seconds <= self.max_entry_seconds):
            raise InvalidConfig("entry duration bounds invalid")
        if len(self.age_ranges) != 3 or len(self.positive_rates) != 3:
            raise InvalidConfig("exactly three age groups are expected")
        for lo, hi in self.age_ranges:
            if lo > hi:
                raise InvalidConfig(f"age range ({lo}, {hi}) inverted")
        for a, b in zip(self.age_ranges, self.age_ranges[1:]):
            if a[1] >= b[0]:
                raise InvalidConfig("age ranges must be increasing and disjoint")
        if any(not (0.0 <= r <= 1.0) for r in self.positive_rates):
            raise InvalidConfig("positive rates must lie in [0, 1]")
        gains = (
            self.hearing_variation_gain, self.normal_variation_gain,
            self.age_leak_gain, self.subject_style_gain, self.frame_noise_std,
        )
        if any(not np.isfinite(g) or g < 0 for g in gains):
            raise InvalidConfig("gains must be finite and non-negative")
        resp = self.noise_response
        if set(resp) != set(NoiseLevel):
            raise InvalidConfig("noise_response must cover all four levels")
        if resp[NoiseLevel.QUIET] != 0.0:
            raise InvalidConfig("noise_response must be zero in the quiet condition")
        ordered = [resp[l] for l in (NoiseLevel.QUIET,) + NOISY_LEVELS]
        if any(b < a for a, b in zip(ordered, ordered[1:])):
            raise InvalidConfig("noise_response must be non-decreasing in dBA")

    def to_dict(self) -> dict:
        return {
            "n_subjects": self.n_subjects,
            "seed": self.seed,
            "feature_dim": self.feature_dim,
            "fps": self.fps,
            "entries_per_session": self.entries_per_session,
            "min_entry_seconds": self.min_entry_seconds,
            "max_entry_seconds": self.max_entry_seconds,
            "age_ranges": [list(r) for r in self.age_ranges],
            "positive_rates": list(self.positive_rates),
            "hearing_variation_gain": self.hearing_variation_gain,
            "normal_variation_gain": self.normal_variation_gain,
            "age_leak_gain": self.age_leak_gain,
            "subject_style_gain": self.subject_style_gain,
            "frame_noise_std": self.frame_noise_std,
            "noise_response": {l.value: v for l, v in self.noise_response.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        if "age_ranges" in d:
            d["age_ranges"] = tuple(tuple(r) for r in d["age_ranges"])
        if "positive_rates" in d:
            d["positive_rates"] = tuple(d["positive_rates"])
        if "noise_response" in d:
            d["noise_response"] = {NoiseLevel(k): float(v) for k, v in d["noise_response"].items()}
        return cls(**d)


def _unit_vector(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    norm = np.linalg.norm(v)
    while norm < 1e-9:  # essentially impossible, but stay well-defined
        v = rng.standard_normal(dim)
        norm = np.linalg.norm(v)
    return v / norm


def _balanced_schedule(rng: np.random.Generator, config: GeneratorConfig) -> list[tuple[NoiseLevel, int]]:
    levels: list[NoiseLevel] = []
    all_levels = (NoiseLevel.QUIET,) + NOISY_LEVELS
    for i in range(config.entries_per_session):
        levels.append(all_levels[i % len(all_levels)])
    # Pseudo-random order without immediate repeats, so every entry is a
    # real noise-level change.
    for _ in range(1000):
        perm = [levels[i] for i in rng.permutation(len(levels))]
        if all(a is not b for a, b in zip(perm, perm[1:])):
            levels = perm
            break
    else:
        raise InvalidConfig("could not build a repeat-free schedule")
    durations = rng.integers(config.min_entry_seconds, config.max_entry_seconds + 1, len(levels))
    return [(level, int(dur)) for level, dur in zip(levels, durations)]


def generate_synthetic(config: GeneratorConfig) -> Dataset:
    """Build a synthetic dataset; bit-identical for identical configs."""
    config.validate()
    demo_rng = substream(config.seed, STREAM_GENERATOR, 0)
    latent_rng = substream(config.seed, STREAM_GENERATOR, 1)
    schedule_rng = substream(config.seed, STREAM_GENERATOR, 2)
    frame_rng = substream(config.seed, STREAM_GENERATOR, 3)

    d = config.feature_dim
    g_dir = _unit_vector(latent_rng, d)
    age_lo = config.age_ranges[0][0]
    age_hi = config.age_ranges[-1][1]
    age_mid = 0.5 * (age_lo + age_hi)
    age_half = 0.5 * (age_hi - age_lo)

    subjects: dict[str, SubjectRecord] = {}
    latents: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for i in range(config.n_subjects):
        sid = f"s{i:04d}"
        group = i % 3
        lo, hi = config.age_ranges[group]
        age = int(demo_rng.integers(lo, hi + 1))
        hearing = int(demo_rng.random() < config.positive_rates[group])
        subjects[sid] = SubjectRecord(sid, age, hearing)
        latents[sid] = (_unit_vector(latent_rng, d), _unit_vector(latent_rng, d))

    sessions: dict[str, SessionRecord] = {}
    segments: list[Segment] = []
    subject_ids = sorted(subjects)
    for pair_index in range(config.n_subjects // 2):
        cid = f"c{pair_index:04d}"
        pair = (subject_ids[2 * pair_index], subject_ids[2 * pair_index + 1])
        schedule = _balanced_schedule(schedule_rng, config)
        sessions[cid] = SessionRecord(cid, pair, schedule)
        for sid in pair:
            rec = subjects[sid]
            u_subj, w_subj = latents[sid]
            age_norm = (rec.age - age_mid) / age_half
            response_gain = config.normal_variation_gain + config.hearing_variation_gain * rec.hearing_status
            base_static = (
                config.subject_style_gain * u_subj
                + config.age_leak_gain * age_norm * g_dir
            )
            chunks = []
            for level, duration in schedule:
                n_frames = duration * config.fps
                mean = base_static + config.noise_response[level] * response_gain * w_subj
                chunks.append(mean + config.frame_noise_std * frame_rng.standard_normal((n_frames, d)))
            stream = np.concatenate(chunks, axis=0)
            segments.extend(segment_stream(stream, schedule, config.fps, session_id=cid, subject_id=sid))

    manifest = DatasetManifest(
        format_version=FORMAT_VERSION,
        feature_dim=d,
        fps=config.fps,
        min_frames=config.min_entry_seconds * config.fps,
        max_frames=config.max_entry_seconds * config.fps,
        age_min=age_lo,
        age_max=age_hi,
        n_subjects=len(subjects),
        n_sessions=len(sessions),
        n_segments=len(segments),
        generator_config=config.to_dict(),
    )
    dataset = Dataset(manifest, subjects, sessions, segments)
    dataset.validate()
    return dataset


def segment_stream(
    frames: np.ndarray,
    schedule: Sequence[tuple[NoiseLevel, float]],
    fps: int,
    session_id: str = "",
    subject_id: str = "",
) -> list[Segment]:
    """Cut a continuous frame stream into one segment per schedule entry.

    Boundaries fall at floor(cumulative seconds * fps); trailing frames
    beyond the schedule are ignored.
    """
    frames = np.asarray(frames, dtype=np.float64)
    total = sum(duration for _, duration in schedule)
    required = int(total * fps)
    if frames.shape[0] < required:
        raise InsufficientFrames(
            f"stream has {frames.shape[0]} frames, schedule requires {required}"
        )
    segments = []
    cumulative = 0.0
    start = 0
    for order, (level, duration) in enumerate(schedule):
        cumulative += duration
        stop = int(cumulative * fps)
        segments.append(
            Segment(
                session_id=session_id,
                subject_id=subject_id,
                order_index=order,
                noise_level=level,
                frames=frames[start:stop].copy(),
            )
        )
        start = stop
    return segments


# ---------------------------------------------------------------------------
# On-disk format: manifest.json + three .jsonl record files
# ---------------------------------------------------------------------------


def save_dataset(dataset: Dataset, path) -> None:
    """Write the dataset directory; floats serialize via repr, losslessly."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifest = dataset.manifest
    (root / "manifest.json").write_text(
        json.dumps(
            {
                "format_version": manifest.format_version,
                "feature_dim": manifest.feature_dim,
                "fps": manifest.fps,
                "min_frames": manifest.min_frames,
                "max_frames": manifest.max_frames,
                "age_min": manifest.age_min,
                "age_max": manifest.age_max,
                "counts": {
                    "subjects": manifest.n_subjects,
                    "sessions": manifest.n_sessions,
                    "segments": manifest.n_segments,
                },
                "generator_config": manifest.generator_config,
            },
            indent=2,
            sort_keys=True,
        )
        + "\n"
    )
    with open(root / "subjects.jsonl", "w") as fh:
        for sid in dataset.subject_ids():
            rec = dataset.subjects[sid]
            fh.write(json.dumps(
                {"subject_id": rec.subject_id, "age": rec.age, "hearing_status": rec.hearing_status}
            ) + "\n")
    with open(root / "sessions.jsonl", "w") as fh:
        for cid in dataset.session_ids():
            sess = dataset.sessions[cid]
            fh.write(json.dumps({
                "session_id": sess.session_id,
                "subject_ids": list(sess.subject_ids),
                "schedule": [[level.value, duration] for level, duration in sess.schedule],
            }) + "\n")
    with open(root / "segments.jsonl", "w") as fh:
        for seg in dataset.segments:
            fh.write(json.dumps({
                "session_id": seg.session_id,
                "subject_id": seg.subject_id,
                "order_index": seg.order_index,
                "noise_level": seg.noise_level.value,
                "frames": seg.frames.tolist(),
            }) + "\n")


def load_dataset(path) -> Dataset:
    """Read a dataset directory; any invariant violation raises FormatError."""
    root = Path(path)
    try:
        raw = json.loads((root / "manifest.json").read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest.json is not valid JSON: {exc}") from exc
    try:
        manifest = DatasetManifest(
            format_version=raw["format_version"],
            feature_dim=raw["feature_dim"],
            fps=raw["fps"],
            min_frames=raw["min_frames"],
            max_frames=raw["max_frames"],
            age_min=raw["age_min"],
            age_max=raw["age_max"],
            n_subjects=raw["counts"]["subjects"],
            n_sessions=raw["counts"]["sessions"],
            n_segments=raw["counts"]["segments"],
            generator_config=raw.get("generator_config"),
        )
    except KeyError as exc:
        raise FormatError(f"manifest.json missing key {exc}") from exc

    def read_jsonl(name: str) -> list[dict]:
        out = []
        with open(root / name) as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise FormatError(f"{name}:{lineno} is not valid JSON") from exc
        return out

    try:
        subjects = {
            r["subject_id"]: SubjectRecord(r["subject_id"], int(r["age"]), int(r["hearing_status"]))
            for r in read_jsonl("subjects.jsonl")
        }
        sessions = {
            r["session_id"]: SessionRecord(
                r["session_id"],
                tuple(r["subject_ids"]),
                [(NoiseLevel(level), duration) for level, duration in r["schedule"]],
            )
            for r in read_jsonl("sessions.jsonl")
        }
        segments = [
            Segment(
                session_id=r["session_id"],
                subject_id=r["subject_id"],
                order_index=int(r["order_index"]),
                noise_level=NoiseLevel(r["noise_level"]),
                frames=np.asarray(r["frames"], dtype=np.float64),
            )
            for r in read_jsonl("segments.jsonl")
        ]
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"malformed record: {exc}") from exc

    dataset = Dataset(manifest, subjects, sessions, segments)
    dataset.validate()
    return dataset


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    """Bit-exact equality, including every frame value."""
    if a.manifest != b.manifest:
        return False
    if a.subjects != b.subjects:
        return False
    if a.sessions != b.sessions:
        return False
    if len(a.segments) != len(b.segments):
        return False
    for sa, sb in zip(a.segments, b.segments):
        if (sa.session_id, sa.subject_id, sa.order_index, sa.noise_level) != (
            sb.session_id, sb.subject_id, sb.order_index, sb.noise_level,
        ):
            return False
        if sa.frames.shape != sb.frames.shape or not np.array_equal(sa.frames, sb.frames):
            return False
    return True


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def sample_triplets(
    segments: Sequence[Segment],
    noise_filter: Iterable[NoiseLevel],
    count: int,
    rng: np.random.Generator,
) -> list[Triplet]:
    """Sample up to `count` distinct (noisy, quiet, quiet) triplets.

    Sampling is uniform over the valid (s_n, {q_i, q_j}) combinations
    without replacement; the orientation of the quiet pair is then chosen
    uniformly. A subject lacking a noisy segment in the filter or two quiet
    segments simply yields no triplets.
    """
    noise_filter = frozenset(noise_filter)
    if not noise_filter:
        raise InvalidConfig("noise_filter must not be empty")
    if any(level.is_quiet for level in noise_filter):
        raise InvalidConfig("noise_filter may only contain noisy levels")
    subject_ids = {s.subject_id for s in segments}
    if len(subject_ids) > 1:
        raise ValueError(f"segments span multiple subjects: {sorted(subject_ids)}")
    ordered = sorted(segments, key=lambda s: (s.session_id, s.order_index))
    quiet = [s for s in ordered if s.noise_level.is_quiet]
    noisy = [s for s in ordered if s.noise_level in noise_filter]
    if len(quiet) < 2 or not noisy:
        return []
    combos = [
        (n, i, j)
        for n in range(len(noisy))
        for i in range(len(quiet))
        for j in range(i + 1, len(quiet))
    ]
    k = min(count, len(combos))
    picks = rng.permutation(len(combos))[:k]
    triplets = []
    for p in picks:
        n, i, j = combos[p]
        if rng.random() < 0.5:
            i, j = j, i
        triplets.append(Triplet(s_n=noisy[n], s_q1=quiet[i], s_q2=quiet[j]))
    return triplets


def select_anchor(segments: Sequence[Segment]) -> Segment:
    """The subject's first quiet segment in the session (minimal order_index)."""
    quiet = [s for s in segments if s.noise_level.is_quiet]
    if not quiet:
        sid = segments[0].subject_id if segments else "?"
        raise NoQuietSegment(f"subject {sid} has no quiet segment")
    return min(quiet, key=lambda s: s.order_index)
