"""Sex-feature suppression generator.

Content is encoded by strided residual blocks; the lower 40 mel bands are
re-weighted by a sex-conditioned gain; the pitch contour is moved to the
neutral mean by a log-domain shift; and an AdaIN decoder conditioned on the
target style embedding renders a residual on top of the pitch-shifted input.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .adversary import normalize_input
from .signal import (
    F0_MAX,
    F0_MIN,
    LOW_BANDS,
    N_MELS,
    RIPPLE_GRID,
    MelSpectrogram,
    PitchTrack,
    ripple_table,
)

EMB_DIM = 64
LATENT_CHANNELS = 256
LATENT_HEIGHT = 10
GAIN_MIN, GAIN_MAX = 0.1, 4.0


def _check_label(label) -> None:
    vals = torch.as_tensor(label).flatten().tolist()
    if any(v not in (0, 1) for v in vals):
        raise ValueError(f"sex label must be 0 or 1, got {vals}")


def apply_formant_gain(x: torch.Tensor, emb: torch.Tensor, proj: torch.Tensor) -> torch.Tensor:
    """x [B, 80, T]; emb [B, 64]; proj [40, 64]. Scales rows [0, 40) by 1 + proj @ emb."""
    gain = (1.0 + emb @ proj.T).clamp(GAIN_MIN, GAIN_MAX)  # [B, 40]
    low = x[:, :LOW_BANDS] * gain[:, :, None]
    return torch.cat([low, x[:, LOW_BANDS:]], dim=1)


def shift_f0(f0: torch.Tensor, voiced: torch.Tensor, mu) -> torch.Tensor:
    """Log-domain shift of each row so its voiced mean becomes `mu` (scalar or [B])."""
    mu = torch.as_tensor(mu, dtype=f0.dtype)
    if (mu <= 0).any():
        raise ValueError("neutral F0 must be positive")
    mu = mu.expand(f0.shape[0]) if mu.ndim == 0 else mu
    m = voiced.to(f0.dtype)
    count = m.sum(1)
    mean = (f0 * m).sum(1) / count.clamp_min(1)
    has = count > 0
    log_ratio = torch.where(has, torch.log(mu) - torch.log(mean.clamp_min(1e-12)), torch.zeros_like(mean))
    shifted = torch.exp(torch.log(f0.clamp_min(1e-12)) + log_ratio[:, None])
    return torch.where(voiced, shifted, torch.zeros_like(f0))


class _AdaIN(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.InstanceNorm2d(channels, affine=False)
        self.style = nn.Linear(EMB_DIM, 2 * channels)
        nn.init.zeros_(self.style.weight)
        nn.init.zeros_(self.style.bias)

    def forward(self, x, s):
        gamma, beta = self.style(s).chunk(2, dim=1)
        return (1 + gamma[:, :, None, None]) * self.norm(x) + beta[:, :, None, None]


class _ResDown(nn.Module):
    def __init__(self, cin, cout, mid=None, second_kernel=3):
        super().__init__()
        mid = mid or cout
        self.conv1 = nn.Conv2d(cin, mid, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(mid, cout, second_kernel, padding=second_kernel // 2)
        self.skip = nn.Conv2d(cin, cout, 1)

    def forward(self, x):
        h = self.conv2(F.leaky_relu(self.conv1(x), 0.2))
        s = self.skip(F.avg_pool2d(x, 2, ceil_mode=True))
        return F.leaky_relu(h + s, 0.2) / math.sqrt(2)


class _ResUp(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.norm1 = _AdaIN(cin)
        self.conv1 = nn.Conv2d(cin, cout, 1)
        self.norm2 = _AdaIN(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1)

    def forward(self, x, s):
        h = self.conv1(F.leaky_relu(self.norm1(x, s), 0.2))
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.conv2(F.leaky_relu(self.norm2(h, s), 0.2))
        skip = F.interpolate(self.skip(x), scale_factor=2, mode="nearest")
        return (h + skip) / math.sqrt(2)


class Generator(nn.Module):
    def __init__(self, seed: int | None = None):
        super().__init__()
        if seed is not None:
            torch.manual_seed(seed)
        self.embedding = nn.Embedding(2, EMB_DIM)
        # zero W: modulation starts as the identity for both labels
        self.formant_proj = nn.Parameter(torch.zeros(LOW_BANDS, EMB_DIM))
        with torch.no_grad():
            self.s_neutral = nn.Parameter(self.embedding.weight.mean(0).clone())

        self.encoder = nn.ModuleList([
            _ResDown(1, 32),
            _ResDown(32, 64),
            _ResDown(64, LATENT_CHANNELS, mid=128, second_kernel=1),
        ])
        self.low_conv = nn.Conv2d(1, 16, 3, padding=1)
        self.low_proj = nn.Conv2d(16, 32, 1)
        self.attn_conv = nn.Conv2d(32, 1, 1)
        self.attn_style = nn.Linear(EMB_DIM, LATENT_HEIGHT)
        self.f0_proj = nn.Conv1d(2, 16, 1)
        self.fuse = nn.Conv2d(LATENT_CHANNELS + 32 + 16, LATENT_CHANNELS, 1)
        self.decoder = nn.ModuleList([_ResUp(LATENT_CHANNELS, 64), _ResUp(64, 32), _ResUp(32, 16)])
        self.refine = nn.Conv2d(16 + 2, 16, 3, padding=1)
        self.out = nn.Conv2d(16, 1, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

        table = torch.as_tensor(ripple_table(), dtype=torch.float32)
        self.register_buffer("ripple_table", table, persistent=False)
        self.register_buffer("ripple_logf", torch.as_tensor(np.log(RIPPLE_GRID), dtype=torch.float32),
                             persistent=False)

    # -- pieces --------------------------------------------------------

    def sex_embedding(self, label) -> torch.Tensor:
        _check_label(label)
        return self.embedding(torch.as_tensor(label, dtype=torch.long))

    def modulate(self, x: torch.Tensor, label) -> torch.Tensor:
        return apply_formant_gain(x, self.sex_embedding(label), self.formant_proj)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] == 0:
            raise ValueError("mel has no frames")
        h = normalize_input(x).unsqueeze(1)
        for block in self.encoder:
            h = block(h)
        return h

    def ripple(self, f0: torch.Tensor) -> torch.Tensor:
        """Harmonic ripple template per frame, [B, 80, T]; zero on unvoiced frames."""
        logf = torch.log(f0.clamp(F0_MIN, F0_MAX))
        grid = self.ripple_logf.to(f0.dtype)
        step = grid[1] - grid[0]
        pos = ((logf - grid[0]) / step).clamp(0, grid.numel() - 1)
        i0 = pos.floor().long().clamp(max=grid.numel() - 2)
        w = (pos - i0).unsqueeze(-1)
        table = self.ripple_table.to(f0.dtype)
        out = (1 - w) * table[i0] + w * table[i0 + 1]
        out = out * (f0 > 0).unsqueeze(-1).to(f0.dtype)
        return out.transpose(1, 2)

    # -- forward -------------------------------------------------------

    def forward(self, x, labels, f0, voiced, mu, style):
        """x [B, 80, T]; labels [B]; f0/voiced [B, T]; mu scalar or [B]; style [B, 64] or [64]."""
        B, n_mels, T = x.shape
        if n_mels != N_MELS:
            raise ValueError(f"expected {N_MELS} mel bands")
        if f0.shape != (B, T) or voiced.shape != (B, T):
            raise ValueError("pitch track is not aligned with mel frames")
        if style.ndim == 1:
            style = style.expand(B, -1)
        f0 = f0.to(x.dtype)

        content = self.encode(x)
        x_mod = self.modulate(x, labels)
        f0_new = shift_f0(f0, voiced, mu)
        base = x_mod + self.ripple(f0_new) - self.ripple(f0)

        W = content.shape[-1]
        low = F.leaky_relu(self.low_conv(normalize_input(x_mod[:, :LOW_BANDS]).unsqueeze(1)), 0.2)
        low = self.low_proj(F.adaptive_avg_pool2d(low, (LATENT_HEIGHT, W)))
        attn = torch.sigmoid(self.attn_conv(low) + self.attn_style(style)[:, None, :, None])

        logf = torch.where(voiced, torch.log(f0_new.clamp_min(1.0)) - math.log(150.0), torch.zeros_like(f0_new))
        pitch = torch.stack([logf, voiced.to(x.dtype)], dim=1)
        pitch = F.avg_pool1d(pitch, 8, ceil_mode=True)[..., :W]
        pitch = self.f0_proj(pitch).unsqueeze(2).expand(-1, -1, LATENT_HEIGHT, -1)

        h = self.fuse(torch.cat([content * attn, low, pitch], dim=1))
        for block in self.decoder:
            h = block(h, style)
        h = h[..., :N_MELS, :T]
        guide = torch.stack([normalize_input(x_mod), normalize_input(base)], dim=1)
        h = F.leaky_relu(self.refine(torch.cat([h, guide], dim=1)), 0.2)
        return base + 4.0 * self.out(h).squeeze(1)


# -- single-utterance API --------------------------------------------------


def sex_embedding(gen: Generator, label: int) -> np.ndarray:
    with torch.no_grad():
        return gen.sex_embedding(label).numpy()


def modulate_formants(mel: MelSpectrogram, emb, W) -> MelSpectrogram:
    emb = torch.as_tensor(np.asarray(emb, dtype=np.float64))
    if not torch.isfinite(emb).all():
        raise ValueError("embedding has non-finite entries")
    W = torch.as_tensor(np.asarray(W, dtype=np.float64))
    x = torch.as_tensor(mel.values.astype(np.float64))[None]
    out = apply_formant_gain(x, emb[None], W)[0].numpy()
    # untouched rows are copied bit-for-bit
    out[LOW_BANDS:] = mel.values[LOW_BANDS:]
    return MelSpectrogram(out)


def neutralize_f0(pitch: PitchTrack, mu_neutral: float) -> PitchTrack:
    if mu_neutral <= 0:
        raise ValueError("neutral F0 must be positive")
    if not pitch.voiced.any():
        return pitch
    log_ratio = np.log(mu_neutral) - np.log(pitch.f0_hz[pitch.voiced].mean())
    f0 = np.where(pitch.voiced, np.exp(np.log(np.where(pitch.voiced, pitch.f0_hz, 1.0)) + log_ratio), 0.0)
    return PitchTrack(f0, pitch.voiced.copy())


def encode_content(gen: Generator, mel: MelSpectrogram) -> np.ndarray:
    with torch.no_grad():
        return gen.encode(torch.as_tensor(mel.values)[None])[0].numpy()


def generate(gen: Generator, mel: MelSpectrogram, label: int, pitch: PitchTrack,
             mu_neutral: float, target_style=None) -> MelSpectrogram:
    """One utterance through the generator; target_style None means the neutral style."""
    if len(pitch) != mel.n_frames:
        raise ValueError(f"pitch has {len(pitch)} frames, mel has {mel.n_frames}")
    with torch.no_grad():
        style = gen.s_neutral if target_style is None else torch.as_tensor(np.asarray(target_style), dtype=torch.float32)
        out = gen(
            torch.as_tensor(mel.values)[None],
            torch.tensor([label]),
            torch.as_tensor(pitch.f0_hz, dtype=torch.float32)[None],
            torch.as_tensor(pitch.voiced)[None],
            mu_neutral,
            style,
        )
    return MelSpectrogram(out[0].numpy())
