"""Real/fake discriminator, proxy sex classifier and content-feature extractors."""

from __future__ import annotations

import copy
import hashlib
import math

import numpy as np
import scipy.fft
import torch
import torch.nn as nn
import torch.nn.functional as F

from .signal import LOG_FLOOR, N_MELS, MelSpectrogram


def as_batch(mels) -> torch.Tensor:
    """Accepts a MelSpectrogram, list of them, or an array/tensor; returns [B, 80, T] float32."""
    if isinstance(mels, MelSpectrogram):
        mels = [mels]
    if isinstance(mels, (list, tuple)):
        mels = np.stack([m.values if isinstance(m, MelSpectrogram) else np.asarray(m) for m in mels])
    x = torch.as_tensor(mels)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1] != N_MELS:
        raise ValueError(f"expected [B, {N_MELS}, T] mels, got {tuple(x.shape)}")
    return x.float()


def normalize_input(x: torch.Tensor) -> torch.Tensor:
    # log-mel values live in [log 1e-5, ~3]; map to roughly unit scale
    return (x - LOG_FLOOR / 2) / 4.0


def checksum(module: nn.Module) -> str:
    """Order-stable digest of every tensor in the state dict."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class SNConv2d(nn.Conv2d):
    """Conv whose kernel is divided by its exact largest singular value on every call."""

    def normalized_weight(self) -> torch.Tensor:
        w = self.weight
        sigma = torch.linalg.matrix_norm(w.flatten(1), ord=2)
        return w / sigma.clamp_min(1e-12)

    def forward(self, x):
        return self._conv_forward(x, self.normalized_weight(), self.bias)


class _ScaleHead(nn.Module):
    def __init__(self, width=32):
        super().__init__()
        self.layers = nn.ModuleList([
            SNConv2d(1, width, 3, stride=2, padding=1),
            SNConv2d(width, 2 * width, 3, stride=2, padding=1),
            SNConv2d(2 * width, 2 * width, 3, stride=2, padding=1),
            SNConv2d(2 * width, 1, 3, padding=1),
        ])

    def forward(self, x):
        for layer in self.layers[:-1]:
            x = F.leaky_relu(layer(x), 0.2)
        return self.layers[-1](x).mean(dim=(1, 2, 3))


class Discriminator(nn.Module):
    """Two-scale spectrally normalized conv critic: full mel and 2x time-pooled."""

    def __init__(self, width=32):
        super().__init__()
        self.scales = nn.ModuleList([_ScaleHead(width), _ScaleHead(width)])

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        x = normalize_input(mel).unsqueeze(1)
        full = self.scales[0](x)
        pooled = F.avg_pool2d(x, (1, 2), ceil_mode=True) if x.shape[-1] > 1 else x
        return 0.5 * (full + self.scales[1](pooled))

    def sn_layers(self):
        return [m for m in self.modules() if isinstance(m, SNConv2d)]


def discriminate(disc: Discriminator, mels) -> torch.Tensor:
    with torch.no_grad():
        return disc(as_batch(mels))


def power_iteration_sigma(weight: torch.Tensor, iters: int = 200) -> float:
    w = weight.detach().flatten(1).double()
    v = torch.ones(w.shape[1], dtype=w.dtype) / math.sqrt(w.shape[1])
    for _ in range(iters):
        u = w @ v
        u = u / u.norm().clamp_min(1e-30)
        v = w.T @ u
        v = v / v.norm().clamp_min(1e-30)
    return float((w @ v).norm())


class SexClassifier(nn.Module):
    """Proxy attribute classifier: p_male for a log-mel batch."""

    def __init__(self, width=16):
        super().__init__()
        self.convs = nn.ModuleList([
            nn.Conv2d(1, width, 3, stride=(2, 1), padding=1),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1),
            nn.Conv2d(2 * width, 2 * width, 3, stride=2, padding=1),
            nn.Conv2d(2 * width, 1, 3, padding=1),
        ])
        self.trainable = True

    def logits(self, mel: torch.Tensor) -> torch.Tensor:
        x = normalize_input(mel).unsqueeze(1)
        for conv in self.convs[:-1]:
            x = F.relu(conv(x))
        return self.convs[-1](x).mean(dim=(1, 2, 3))

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(mel))

    def classify(self, mels) -> np.ndarray:
        with torch.no_grad():
            return self(as_batch(mels)).numpy().astype(np.float64)

    def freeze(self) -> "SexClassifier":
        self.trainable = False
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self


def _train_classifier(clf, mels, labels, epochs, seed, lr, batch_size):
    x = as_batch(mels)
    # target is p_male: sex label 0 (male) -> 1
    y = 1.0 - torch.as_tensor(np.asarray(labels), dtype=torch.float32)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(clf.parameters(), lr=lr)
    clf.train()
    for _ in range(epochs):
        order = torch.randperm(x.shape[0], generator=gen)
        for i in range(0, x.shape[0], batch_size):
            idx = order[i:i + batch_size]
            loss = F.binary_cross_entropy_with_logits(clf.logits(x[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    clf.eval()
    return clf


def proxy_classifier_train(mels, labels, epochs: int = 5, seed: int = 0,
                           lr: float = 1e-3, batch_size: int = 32) -> SexClassifier:
    labels = np.asarray(labels)
    if len(set(labels.tolist())) < 2:
        raise ValueError("classifier training needs both sexes")
    torch.manual_seed(seed)
    clf = SexClassifier()
    return _train_classifier(clf, mels, labels, epochs, seed, lr, batch_size)


def finetune_classifier(base: SexClassifier, mels, labels, epochs: int = 3, seed: int = 0,
                        lr: float = 5e-4, batch_size: int = 32) -> SexClassifier:
    """Trains a copy of `base`; the original is left untouched."""
    if len(set(np.asarray(labels).tolist())) < 2:
        raise ValueError("fine-tuning needs both sexes")
    clf = copy.deepcopy(base)
    clf.trainable = True
    for p in clf.parameters():
        p.requires_grad_(True)
    return _train_classifier(clf, mels, labels, epochs, seed, lr, batch_size)


class ContentFeatureExtractor(nn.Module):
    """Interface: log-mel [B, 80, T] -> features [B, D, T']."""

    dim: int

    def extract(self, mel) -> np.ndarray:
        with torch.no_grad():
            out = self(as_batch(mel))
        return out[0].numpy() if isinstance(mel, MelSpectrogram) else out.numpy()


class MFCCExtractor(ContentFeatureExtractor):
    """13 cepstral coefficients from the log-mel plus deltas and delta-deltas (D = 39)."""

    dim = 39

    def __init__(self, n_ceps: int = 13, delta_width: int = 2):
        super().__init__()
        dct = scipy.fft.dct(np.eye(N_MELS), type=2, norm="ortho", axis=0)[:n_ceps]
        self.register_buffer("dct", torch.as_tensor(dct, dtype=torch.float32))
        taps = np.arange(-delta_width, delta_width + 1, dtype=np.float64)
        taps = taps / (2 * np.sum(np.arange(1, delta_width + 1) ** 2))
        # conv1d is cross-correlation: d[t] = sum_n n * c[t+n] / norm
        self.register_buffer("delta_kernel", torch.as_tensor(taps, dtype=torch.float32))
        self.delta_width = delta_width

    def _delta(self, c: torch.Tensor) -> torch.Tensor:
        b, d, t = c.shape
        padded = F.pad(c.reshape(b * d, 1, t), (self.delta_width, self.delta_width), mode="replicate")
        k = self.delta_kernel.to(c.dtype).view(1, 1, -1)
        return F.conv1d(padded, k).reshape(b, d, t)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        c = torch.einsum("cm,bmt->bct", self.dct.to(mel.dtype), mel)
        d1 = self._delta(c)
        return torch.cat([c, d1, self._delta(d1)], dim=1)


def extract_content_features(extractor: ContentFeatureExtractor, mel) -> np.ndarray:
    return extractor.extract(mel)
