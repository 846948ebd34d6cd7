"""Corpus manifests, sex-balanced batching and precomputed feature sets."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .signal import LOG_FLOOR, AudioClip, compute_mel, estimate_f0, read_wav

log = logging.getLogger(__name__)

SEX_CODES = {"M": 0, "F": 1}
SPLITS = ("train", "valid", "eval")


@dataclass(frozen=True)
class ManifestEntry:
    clip_path: str
    speaker_id: str
    sex: str
    split: str
    transcript: str | None = None

    @property
    def label(self) -> int:
        return SEX_CODES[self.sex]


def load_manifest(path, check_files: bool = True) -> list[ManifestEntry]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    entries, seen = [], set()
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            entry = ManifestEntry(
                clip_path=str(rec["clip_path"]),
                speaker_id=str(rec["speaker_id"]),
                sex=rec["sex"],
                split=rec["split"],
                transcript=rec.get("transcript"),
            )
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ValueError(f"{path}:{lineno}: malformed manifest line ({exc})") from None
        if entry.sex not in SEX_CODES:
            raise ValueError(f"{path}:{lineno}: sex must be M or F, got {entry.sex!r}")
        if entry.split not in SPLITS:
            raise ValueError(f"{path}:{lineno}: unknown split {entry.split!r}")
        clip = Path(entry.clip_path)
        if not clip.is_absolute():
            clip = path.parent / clip
        if check_files and not clip.exists():
            raise ValueError(f"{path}:{lineno}: clip not found: {clip}")
        if entry.clip_path in seen:
            raise ValueError(f"{path}:{lineno}: duplicate clip {entry.clip_path!r}")
        seen.add(entry.clip_path)
        entries.append(entry)
    counts = Counter((e.sex, e.split) for e in entries)
    log.info("manifest %s: %s", path, dict(sorted(counts.items())))
    return entries


def write_manifest(path, entries: Sequence[ManifestEntry]) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as f:
        for e in entries:
            f.write(json.dumps({k: v for k, v in asdict(e).items() if v is not None}) + "\n")
    tmp.replace(path)


def resolve_clip(manifest_path, entry: ManifestEntry) -> Path:
    p = Path(entry.clip_path)
    return p if p.is_absolute() else Path(manifest_path).parent / p


def balanced_batches(labels: Sequence[int], batch_size: int, seed: int, epoch: int = 0) -> Iterator[list[int]]:
    """Index batches with equal counts per sex; the minority class is oversampled.

    Ordering depends only on (labels, batch_size, seed, epoch).
    """
    if batch_size < 2:
        raise ValueError("batch_size must be at least 2")
    labels = np.asarray(labels)
    groups = [np.flatnonzero(labels == c) for c in (0, 1)]
    if any(g.size == 0 for g in groups):
        raise ValueError("both sexes must be present")
    return _balanced(groups, batch_size, np.random.default_rng([seed, epoch]))


def _balanced(groups, batch_size, rng):
    major = int(np.argmax([g.size for g in groups]))
    minor = 1 - major
    per = [batch_size // 2, batch_size - batch_size // 2]
    if per[major] < per[minor]:
        per.reverse()
    major_idx = rng.permutation(groups[major])
    n_batches = -(-major_idx.size // per[major])
    need = n_batches * per[minor]
    reps = -(-need // groups[minor].size)
    minor_idx = np.concatenate([rng.permutation(groups[minor]) for _ in range(reps)])[:need]
    pm, pn = per[major], per[minor]
    for b in range(n_batches):
        a = major_idx[b * pm:(b + 1) * pm]
        k = pn if len(a) == pm else len(a)
        batch = np.concatenate([a, minor_idx[b * pn:b * pn + k]])
        yield rng.permutation(batch).tolist()


@dataclass
class FeatureSet:
    """Fixed-length analysis features for a list of clips."""

    ids: list[str]
    mels: np.ndarray  # [N, 80, T] float32
    f0: np.ndarray  # [N, T]
    voiced: np.ndarray  # [N, T] bool
    labels: np.ndarray  # [N]
    transcripts: list[str | None]

    def __len__(self):
        return len(self.ids)

    def subset(self, idx) -> "FeatureSet":
        idx = np.asarray(idx)
        return FeatureSet(
            [self.ids[i] for i in idx], self.mels[idx], self.f0[idx], self.voiced[idx],
            self.labels[idx], [self.transcripts[i] for i in idx],
        )

    @classmethod
    def from_clips(cls, clips: Sequence[AudioClip], labels, ids, transcripts=None,
                   n_frames: int | None = None) -> "FeatureSet":
        mels, f0s, vs = [], [], []
        for clip in clips:
            m = compute_mel(clip).values
            p = estimate_f0(clip)
            mels.append(m)
            f0s.append(p.f0_hz)
            vs.append(p.voiced)
        T = n_frames or min(m.shape[1] for m in mels)
        mels = np.stack([_fit(m, T, LOG_FLOOR) for m in mels]).astype(np.float32)
        f0 = np.stack([_fit(f[None], T, 0.0)[0] for f in f0s])
        voiced = np.stack([_fit(v[None], T, False)[0] for v in vs])
        transcripts = list(transcripts) if transcripts is not None else [None] * len(ids)
        return cls(list(ids), mels, f0, voiced, np.asarray(labels, dtype=np.int64), transcripts)

    @classmethod
    def from_manifest(cls, manifest_path, entries: Sequence[ManifestEntry], n_frames=None) -> "FeatureSet":
        clips = [read_wav(resolve_clip(manifest_path, e)) for e in entries]
        return cls.from_clips(clips, [e.label for e in entries], [e.clip_path for e in entries],
                              [e.transcript for e in entries], n_frames)


def _fit(a: np.ndarray, T: int, fill) -> np.ndarray:
    if a.shape[1] >= T:
        return a[:, :T]
    pad = np.full((a.shape[0], T - a.shape[1]), fill, dtype=a.dtype)
    return np.concatenate([a, pad], axis=1)
