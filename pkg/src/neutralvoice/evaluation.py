"""Privacy and utility metrics and the two attacker protocols."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch

from .adversary import MFCCExtractor, SexClassifier, finetune_classifier
from .data import FeatureSet
from .signal import AudioClip, FormantMoments, MelSpectrogram, compute_mel, estimate_f0, extract_formants, \
    formant_statistics, invert_mel


def _split_trials(trials, labels=None) -> tuple[np.ndarray, np.ndarray]:
    if labels is None:
        pairs = list(trials)
        scores = np.array([s for s, _ in pairs], dtype=np.float64)
        labels = np.array([l for _, l in pairs])
    else:
        scores = np.asarray(trials, dtype=np.float64)
        labels = np.asarray(labels)
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    pos, neg = scores[labels == 1], scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("EER needs trials of both labels")
    return pos, neg


def compute_eer(trials, labels=None) -> float:
    """EER in percent. `trials` is a list of (score, label) pairs, or scores with `labels`.

    Rule: score > threshold predicts label 1. Operating points are taken at
    every distinct score (plus below the minimum); the FAR/FRR crossing is
    linearly interpolated between adjacent points.
    """
    pos, neg = _split_trials(trials, labels)
    pos, neg = np.sort(pos), np.sort(neg)
    thresholds = np.unique(np.concatenate([pos, neg]))
    far = np.r_[1.0, (neg.size - np.searchsorted(neg, thresholds, side="right")) / neg.size]
    frr = np.r_[0.0, np.searchsorted(pos, thresholds, side="right") / pos.size]
    diff = far - frr
    j = int(np.argmax(diff <= 0))
    if diff[j] == 0:
        return 100.0 * far[j]
    a = diff[j - 1] / (diff[j - 1] - diff[j])
    return 100.0 * (far[j - 1] + a * (far[j] - far[j - 1]))


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def compute_wer(ref_tokens, hyp_tokens) -> float:
    ref = ref_tokens.split() if isinstance(ref_tokens, str) else list(ref_tokens)
    hyp = hyp_tokens.split() if isinstance(hyp_tokens, str) else list(hyp_tokens)
    if not ref:
        raise ValueError("reference is empty")
    return 100.0 * edit_distance(ref, hyp) / len(ref)


def corpus_wer(refs, hyps) -> float:
    errors = sum(edit_distance(r.split(), h.split()) for r, h in zip(refs, hyps, strict=True))
    words = sum(len(r.split()) for r in refs)
    if words == 0:
        raise ValueError("reference is empty")
    return 100.0 * errors / words


class TemplateRecognizer:
    """Nearest-template vowel recognizer for fixed-count token sequences.

    The active region of a clip is cut into `n_tokens` equal segments; each
    segment's mean cepstrum (c1..c12) is matched against per-token centroids
    under a pooled within-class covariance (Mahalanobis distance).
    """

    def __init__(self, n_tokens: int = 4, active_drop: float = 3.0):
        self.n_tokens = n_tokens
        self.active_drop = active_drop
        self.extractor = MFCCExtractor()
        self.templates: dict[str, np.ndarray] = {}
        self.precision = np.eye(12)

    def _segments(self, mel: np.ndarray) -> np.ndarray:
        ceps = self.extractor.extract(MelSpectrogram(mel))[1:13]
        energy = mel.mean(axis=0)
        active = np.flatnonzero(energy > energy.max() - self.active_drop)
        lo, hi = (active[0], active[-1] + 1) if active.size else (0, mel.shape[1])
        edges = np.linspace(lo, hi, self.n_tokens + 1)
        out = []
        for a, b in zip(edges[:-1], edges[1:]):
            pad = 0.2 * (b - a)
            s, e = int(round(a + pad)), max(int(round(b - pad)), int(round(a + pad)) + 1)
            out.append(ceps[:, s:e].mean(axis=1))
        return np.asarray(out)

    def fit(self, mels, transcripts) -> "TemplateRecognizer":
        acc: dict[str, list] = {}
        for mel, text in zip(mels, transcripts):
            tokens = text.split()
            if len(tokens) != self.n_tokens:
                continue
            for tok, vec in zip(tokens, self._segments(np.asarray(mel))):
                acc.setdefault(tok, []).append(vec)
        if not acc:
            raise ValueError("no usable training transcripts")
        self.templates = {k: np.mean(v, axis=0) for k, v in sorted(acc.items())}
        resid = np.concatenate([np.asarray(v) - self.templates[k] for k, v in acc.items()])
        cov = resid.T @ resid / max(len(resid) - len(acc), 1)
        self.precision = np.linalg.pinv(cov + 1e-6 * np.trace(cov) / len(cov) * np.eye(len(cov)))
        return self

    def recognize(self, mel) -> str:
        names = list(self.templates)
        cents = np.stack([self.templates[k] for k in names])
        segs = self._segments(mel.values if isinstance(mel, MelSpectrogram) else np.asarray(mel))
        diff = segs[:, None] - cents[None]
        d = np.einsum("tki,ij,tkj->tk", diff, self.precision, diff)
        return " ".join(names[i] for i in d.argmin(axis=1))


# -- attacks ---------------------------------------------------------------


@dataclass(frozen=True)
class AttackReport:
    attack_mode: str
    eer_percent: float
    n_trials: int
    classifier_description: str

    def __post_init__(self):
        if self.attack_mode not in ("ignorant", "semi_informed"):
            raise ValueError(f"unknown attack mode {self.attack_mode!r}")
        if not 0.0 <= self.eer_percent <= 100.0:
            raise ValueError("EER out of range")

    def to_json(self, **extra) -> str:
        return json.dumps({"record": "attack", **extra, **asdict(self)})


def male_trials(classifier, mels, labels) -> tuple[np.ndarray, np.ndarray]:
    """Per-utterance trials: score p_male, target label 1 for male speakers."""
    scores = classifier.classify(mels)
    return scores, (np.asarray(labels) == 0).astype(int)


def ignorant_attack(classifier, mels, labels, description: str = "proxy classifier trained on raw speech") -> AttackReport:
    scores, target = male_trials(classifier, mels, labels)
    return AttackReport("ignorant", compute_eer(scores, target), len(target), description)


def semi_informed_attack(base: SexClassifier, train_mels, train_labels, train_ids,
                         eval_mels, eval_labels, eval_ids, finetune_epochs: int = 4,
                         seed: int = 0) -> AttackReport:
    overlap = set(train_ids) & set(eval_ids)
    if overlap:
        raise ValueError(f"attacker train and eval sets share clips: {sorted(overlap)[:3]}")
    tuned = finetune_classifier(base, train_mels, train_labels, epochs=finetune_epochs, seed=seed)
    scores, target = male_trials(tuned, eval_mels, eval_labels)
    return AttackReport("semi_informed", compute_eer(scores, target), len(target),
                        f"proxy classifier fine-tuned {finetune_epochs} epochs on obfuscated speech")


# -- conversion and neutrality ---------------------------------------------


def convert_features(generator, data: FeatureSet, mu_neutral: float, batch_size: int = 32) -> np.ndarray:
    """Generated mels [N, 80, T] with the neutral target style."""
    generator.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(data), batch_size):
            sl = slice(i, i + batch_size)
            y = generator(
                torch.as_tensor(data.mels[sl]), torch.as_tensor(data.labels[sl]),
                torch.as_tensor(data.f0[sl], dtype=torch.float32), torch.as_tensor(data.voiced[sl]),
                mu_neutral, generator.s_neutral,
            )
            out.append(y.numpy())
    return np.concatenate(out).astype(np.float32)


def resynthesize(mels: np.ndarray, iterations: int = 60) -> list[AudioClip]:
    return [invert_mel(MelSpectrogram(m), iterations) for m in mels]


@dataclass(frozen=True)
class NeutralityReport:
    mean_f0_hz: float
    mu_neutral_hz: float
    f0_gap_hz: float
    formant_mean_gap_hz: tuple[float, float, float]
    formant_std_gap_hz: tuple[float, float, float]
    mean_abs_p_male_offset: float

    def __post_init__(self):
        vals = [self.mean_f0_hz, self.f0_gap_hz, self.mean_abs_p_male_offset,
                *self.formant_mean_gap_hz, *self.formant_std_gap_hz]
        if not all(np.isfinite(vals)):
            raise ValueError("neutrality report has non-finite fields")

    def to_json(self) -> str:
        return json.dumps({"record": "neutrality", **asdict(self)})


def neutrality_report(clips: Sequence[AudioClip], mu_neutral: float, neutral_formants: FormantMoments,
                      classifier) -> NeutralityReport:
    """Acoustic neutrality of (already converted) audio against the neutral statistics."""
    if len(clips) == 0:
        raise ValueError("empty corpus")
    means, tracks, mels = [], [], []
    for clip in clips:
        pitch = estimate_f0(clip)
        if pitch.voiced.any():
            means.append(pitch.mean_f0())
        tracks.append(extract_formants(clip, pitch=pitch))
        mels.append(compute_mel(clip).values)
    mean_f0 = float(np.mean(means)) if means else 0.0
    stats = formant_statistics(tracks)
    n = min(m.shape[1] for m in mels)
    p = classifier.classify(np.stack([m[:, :n] for m in mels]))
    return NeutralityReport(
        mean_f0_hz=mean_f0,
        mu_neutral_hz=float(mu_neutral),
        f0_gap_hz=abs(mean_f0 - mu_neutral),
        formant_mean_gap_hz=tuple(float(v) for v in np.abs(stats.mean - neutral_formants.mean)),
        formant_std_gap_hz=tuple(float(v) for v in np.abs(stats.std - neutral_formants.std)),
        mean_abs_p_male_offset=float(np.mean(np.abs(p - 0.5))),
    )


def summary_table(rows: Sequence[dict]) -> str:
    """Plain-text table: model, ignorant EER, WER, semi-informed EER."""
    head = f"{'Model':<24}{'Ignorant EER (%)':>18}{'WER (%)':>10}{'Semi-informed EER (%)':>24}"
    lines = [head, "-" * len(head)]
    for r in rows:
        semi = "--" if r.get("semi_informed_eer") is None else f"{r['semi_informed_eer']:.2f}"
        lines.append(f"{r['model']:<24}{r['ignorant_eer']:>18.2f}{r['wer']:>10.2f}{semi:>24}")
    return "\n".join(lines)


# -- full protocol ---------------------------------------------------------


@dataclass
class EvaluationResult:
    raw_attack: AttackReport
    ignorant: AttackReport
    semi_informed: AttackReport
    neutrality: NeutralityReport
    wer_raw: float
    wer_obfuscated: float
    closer_to_chance: float  # fraction of eval clips whose |p_male - 0.5| shrank

    def to_jsonl(self) -> str:
        lines = [
            self.raw_attack.to_json(condition="raw"),
            self.ignorant.to_json(condition="obfuscated"),
            self.semi_informed.to_json(condition="obfuscated"),
            self.neutrality.to_json(),
            json.dumps({"record": "wer", "raw": self.wer_raw, "obfuscated": self.wer_obfuscated}),
            json.dumps({"record": "per_clip", "closer_to_chance": self.closer_to_chance}),
        ]
        return "\n".join(lines) + "\n"

    def table_rows(self) -> list[dict]:
        return [
            {"model": "Raw speech", "ignorant_eer": self.raw_attack.eer_percent, "wer": self.wer_raw,
             "semi_informed_eer": None},
            {"model": "Obfuscated", "ignorant_eer": self.ignorant.eer_percent, "wer": self.wer_obfuscated,
             "semi_informed_eer": self.semi_informed.eer_percent},
        ]


def rows_from_jsonl(text: str) -> list[dict]:
    attacks, wer = {}, None
    for line in text.splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec["record"] == "attack":
            attacks[(rec["condition"], rec["attack_mode"])] = rec["eer_percent"]
        elif rec["record"] == "wer":
            wer = rec
    if wer is None or ("raw", "ignorant") not in attacks:
        raise ValueError("report is missing attack or WER records")
    return [
        {"model": "Raw speech", "ignorant_eer": attacks[("raw", "ignorant")], "wer": wer["raw"],
         "semi_informed_eer": None},
        {"model": "Obfuscated", "ignorant_eer": attacks[("obfuscated", "ignorant")], "wer": wer["obfuscated"],
         "semi_informed_eer": attacks.get(("obfuscated", "semi_informed"))},
    ]


def obfuscate(generator, data: FeatureSet, mu_neutral: float, gl_iterations: int = 60):
    """Convert, resynthesize and re-analyse: (audio clips, FeatureSet of the obfuscated audio)."""
    clips = resynthesize(convert_features(generator, data, mu_neutral), gl_iterations)
    feats = FeatureSet.from_clips(clips, data.labels, data.ids, data.transcripts, n_frames=data.mels.shape[2])
    return clips, feats


def evaluate(generator, mu_neutral: float, neutral_formants: FormantMoments, classifier,
             attack_train: FeatureSet, eval_set: FeatureSet, recognizer: TemplateRecognizer,
             finetune_epochs: int = 4, seed: int = 0, gl_iterations: int = 60) -> EvaluationResult:
    """Both attacker protocols, acoustic neutrality and WER on one generator."""
    eval_clips, obf_eval = obfuscate(generator, eval_set, mu_neutral, gl_iterations)
    _, obf_train = obfuscate(generator, attack_train, mu_neutral, gl_iterations)
    refs = eval_set.transcripts
    raw_off = np.abs(classifier.classify(eval_set.mels) - 0.5)
    obf_off = np.abs(classifier.classify(obf_eval.mels) - 0.5)
    return EvaluationResult(
        raw_attack=ignorant_attack(classifier, eval_set.mels, eval_set.labels),
        ignorant=ignorant_attack(classifier, obf_eval.mels, obf_eval.labels),
        semi_informed=semi_informed_attack(classifier, obf_train.mels, obf_train.labels, obf_train.ids,
                                           obf_eval.mels, obf_eval.labels, obf_eval.ids,
                                           finetune_epochs=finetune_epochs, seed=seed),
        neutrality=neutrality_report(eval_clips, mu_neutral, neutral_formants, classifier),
        wer_raw=corpus_wer(refs, [recognizer.recognize(m) for m in eval_set.mels]),
        wer_obfuscated=corpus_wer(refs, [recognizer.recognize(m) for m in obf_eval.mels]),
        closer_to_chance=float(np.mean(obf_off < raw_off)),
    )
