"""Generator and discriminator objectives.

Every term takes plain sequences, numpy arrays or tensors and returns a 0-d
tensor, so the same code serves training (autograd) and offline evaluation.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .signal import FormantMoments, MelSpectrogram, PitchTrack

TERMS = ("adv", "sex", "content", "f0", "formant", "cyc")


@dataclass(frozen=True)
class LossWeights:
    alpha1: float = 1.0
    alpha2: float = 5.0
    alpha3: float = 10.0
    alpha4: float = 2.0
    alpha5: float = 1.0
    alpha6: float = 10.0
    lambda_rel: float = 0.8
    beta: float = 0.3
    soft_real: float = 0.95
    soft_fake: float = 0.05

    def __post_init__(self):
        if any(v <= 0 for v in asdict(self).values()):
            raise ValueError("loss weights must be positive")
        if not self.soft_fake < self.soft_real:
            raise ValueError("soft_fake must be below soft_real")

    def term_weights(self) -> dict[str, float]:
        return dict(zip(TERMS, (self.alpha1, self.alpha2, self.alpha3, self.alpha4, self.alpha5, self.alpha6)))


DEFAULT_WEIGHTS = LossWeights()


@dataclass
class LossReport:
    terms: dict[str, float] = field(default_factory=dict)

    def __getitem__(self, key):
        return self.terms[key]

    def __len__(self):
        return len(self.terms)

    def to_json(self, step: int | None = None) -> str:
        rec = {"step": step} if step is not None else {}
        rec.update(self.terms)
        return json.dumps(rec, sort_keys=False)

    @classmethod
    def from_json(cls, line: str) -> tuple[int | None, "LossReport"]:
        rec = json.loads(line)
        step = rec.pop("step", None)
        return step, cls({k: float(v) for k, v in rec.items()})


def _t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _nonempty(x, what: str) -> torch.Tensor:
    x = _t(x)
    if x.numel() == 0:
        raise ValueError(f"{what} is empty")
    return x


def adv_loss_d(scores_real, scores_fake, weights: LossWeights = DEFAULT_WEIGHTS) -> torch.Tensor:
    real = _nonempty(scores_real, "real scores")
    fake = _nonempty(scores_fake, "fake scores")
    return 0.5 * ((real - weights.soft_real) ** 2).mean() + 0.5 * ((fake - weights.soft_fake) ** 2).mean()


def adv_loss_g(scores_fake, weights: LossWeights = DEFAULT_WEIGHTS) -> torch.Tensor:
    fake = _nonempty(scores_fake, "fake scores")
    return 0.5 * ((fake - weights.soft_real) ** 2).mean()


def sex_ambiguity_loss(p_male, eps: float = 1e-6) -> torch.Tensor:
    """Mean of p log p + (1-p) log(1-p): minimal (-ln 2) at p = 0.5."""
    p = _nonempty(p_male, "probabilities").clamp(eps, 1.0 - eps)
    return (p * torch.log(p) + (1 - p) * torch.log(1 - p)).mean()


def _l1(a, b) -> torch.Tensor:
    a, b = _t(a), _t(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def content_loss(feat_orig, feat_gen) -> torch.Tensor:
    return _l1(feat_orig, feat_gen)


def cycle_loss(x, x_cycled) -> torch.Tensor:
    if isinstance(x, MelSpectrogram):
        x = x.values
    if isinstance(x_cycled, MelSpectrogram):
        x_cycled = x_cycled.values
    return _l1(x, x_cycled)


def f0_loss(f0_gen, f0_org, mu_neu, voiced=None, weights: LossWeights = DEFAULT_WEIGHTS) -> torch.Tensor:
    """Per-utterance mean-F0 alignment plus relative-contour preservation, batch-averaged.

    Tracks are PitchTracks or [T] / [B, T] arrays; `voiced` (same shape) marks
    frames usable on both sides and defaults to where both tracks are positive.
    """
    if isinstance(f0_gen, PitchTrack):
        f0_gen = f0_gen.f0_hz
    if isinstance(f0_org, PitchTrack):
        f0_org = f0_org.f0_hz
    g, o = _t(f0_gen), _t(f0_org)
    if g.shape != o.shape:
        raise ValueError("pitch tracks are not aligned")
    if g.ndim == 1:
        g, o = g[None], o[None]
        voiced = None if voiced is None else _t(voiced)[None]
    mask = (g > 0) & (o > 0)
    if voiced is not None:
        mask = mask & _t(voiced).bool()
    counts = mask.sum(dim=1)
    if (counts == 0).any():
        raise ValueError("no common voiced frames")
    m = mask.to(g.dtype)
    # log of masked-out frames is never used; keep it finite for autograd
    g_safe = torch.where(mask, g, torch.ones_like(g))
    o_safe = torch.where(mask, o, torch.ones_like(o))
    mean_g = (g_safe * m).sum(1) / counts
    mean_o = (o_safe * m).sum(1) / counts
    dl_g = torch.log(g_safe) - torch.log(mean_g)[:, None]
    dl_o = torch.log(o_safe) - torch.log(mean_o)[:, None]
    rel = ((dl_g - dl_o).abs() * m).sum(1) / counts
    mu = _t(mu_neu).to(g.dtype)
    return ((mean_g - mu).abs() + weights.lambda_rel * rel).mean()


def _moments(stats) -> tuple[torch.Tensor, torch.Tensor]:
    if isinstance(stats, FormantMoments):
        mean, std = stats.mean, stats.std
    else:
        mean, std = stats
    mean, std = _t(mean), _t(std)
    if mean.shape[-1:] != (3,) or std.shape[-1:] != (3,):
        raise ValueError("formant statistics need F1..F3 means and stds")
    return mean, std


def formant_loss(gen_stats, neutral_stats, weights: LossWeights = DEFAULT_WEIGHTS) -> torch.Tensor:
    """Sum over F1..F3 of |mean gap| + beta |std gap|; leading batch dims are averaged."""
    gm, gs = _moments(gen_stats)
    nm, ns = _moments(neutral_stats)
    per = ((gm - nm).abs() + weights.beta * (gs - ns).abs()).sum(-1)
    return per.mean()


def total_generator_loss(terms, weights: LossWeights = DEFAULT_WEIGHTS):
    """Weighted sum of the six generator terms; raises naming any non-finite term."""
    total = 0.0
    for name, w in weights.term_weights().items():
        if name not in terms:
            raise KeyError(f"missing loss term {name!r}")
        v = terms[name]
        if not math.isfinite(float(v.detach() if torch.is_tensor(v) else v)):
            raise FloatingPointError(f"loss term {name!r} is not finite")
        total = total + w * v
    return total
