"""Alternating adversarial optimisation with EMA tracking of the neutral F0 mean."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.fft
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import losses as L
from .adversary import Discriminator, MFCCExtractor, SexClassifier, checksum, proxy_classifier_train
from .data import FeatureSet, balanced_batches
from .generator import Generator, shift_f0
from .signal import LOW_BANDS, N_MELS, RIPPLE_GRID, FormantMoments, mel_band_edges, ripple_table

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NeutralState:
    mu_neutral_hz: float = 150.0
    gamma: float = 0.99
    formant_moments: FormantMoments | None = None
    proxy_formant_moments: FormantMoments | None = None

    def __post_init__(self):
        if not self.mu_neutral_hz > 0:
            raise ValueError("mu_neutral_hz must be positive")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")

    def to_dict(self) -> dict:
        def mom(m):
            return None if m is None else {"mean": list(map(float, m.mean)), "std": list(map(float, m.std))}
        return {"mu_neutral_hz": self.mu_neutral_hz, "gamma": self.gamma,
                "formant_moments": mom(self.formant_moments),
                "proxy_formant_moments": mom(self.proxy_formant_moments)}

    @classmethod
    def from_dict(cls, d: dict) -> "NeutralState":
        def mom(m):
            return None if m is None else FormantMoments(np.asarray(m["mean"]), np.asarray(m["std"]))
        return cls(d["mu_neutral_hz"], d["gamma"], mom(d.get("formant_moments")), mom(d.get("proxy_formant_moments")))


def update_mu_neutral(state: NeutralState, batch_mean_f0: float) -> NeutralState:
    if not (math.isfinite(batch_mean_f0) and batch_mean_f0 > 0):
        log.warning("batch without voiced frames; neutral F0 left at %.2f Hz", state.mu_neutral_hz)
        return state
    mu = state.gamma * state.mu_neutral_hz + (1 - state.gamma) * batch_mean_f0
    return dataclasses.replace(state, mu_neutral_hz=float(mu))


@dataclass(frozen=True)
class TrainingConfig:
    lr_generator: float = 1e-5
    lr_discriminator: float = 1e-4
    batch_size: int = 16
    max_epochs: int = 150
    early_stop_patience: int = 10
    weight_decay: float = 0.01
    seed: int = 0
    classifier_epochs: int = 6
    steps_per_epoch: int = 0  # 0 = full pass over the training set

    def __post_init__(self):
        if self.lr_generator <= 0 or self.lr_discriminator <= 0:
            raise ValueError("learning rates must be positive")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


# -- differentiable acoustic proxies ---------------------------------------


class PitchProxy(nn.Module):
    """Soft F0 (Hz) per frame from the harmonic ripple of the lower mel bands."""

    def __init__(self, temperature: float = 0.03):
        super().__init__()
        tmpl = torch.as_tensor(ripple_table()[:, :LOW_BANDS], dtype=torch.float32)
        tmpl = self._highpass(tmpl)
        self.register_buffer("templates", tmpl / tmpl.norm(dim=1, keepdim=True))
        self.register_buffer("logf", torch.as_tensor(np.log(RIPPLE_GRID), dtype=torch.float32))
        self.temperature = temperature

    @staticmethod
    def _highpass(x: torch.Tensor) -> torch.Tensor:
        flat = x.reshape(-1, 1, x.shape[-1])
        smooth = F.avg_pool1d(F.pad(flat, (2, 2), mode="replicate"), 5, stride=1)
        return (flat - smooth).reshape(x.shape)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        frames = self._highpass(mel[:, :LOW_BANDS].transpose(1, 2))  # [B, T, 40]
        frames = frames / frames.norm(dim=-1, keepdim=True).clamp_min(1e-6)
        sim = frames @ self.templates.to(mel.dtype).T
        w = torch.softmax(sim / self.temperature, dim=-1)
        return torch.exp(w @ self.logf.to(mel.dtype))


class FormantProxy(nn.Module):
    """Soft F1..F3 (Hz) per frame from a cepstrally smoothed log-mel envelope.

    Each formant is a softmax-weighted band frequency inside a fixed region, so
    the estimate moves smoothly with the envelope peak and always exists.
    """

    REGIONS_HZ = ((200.0, 1000.0), (800.0, 2500.0), (2000.0, 3400.0))

    def __init__(self, n_ceps: int = 13, temperature: float = 0.3):
        super().__init__()
        basis = torch.as_tensor(scipy.fft.dct(np.eye(N_MELS), type=2, norm="ortho", axis=0)[:n_ceps])
        self.register_buffer("lifter", basis.T @ basis)
        centres = torch.as_tensor(mel_band_edges()[1:-1])
        self.register_buffer("centres", centres)
        self.register_buffer("regions", torch.stack([(centres >= lo) & (centres <= hi) for lo, hi in self.REGIONS_HZ]))
        self.temperature = temperature

    def forward(self, frames: torch.Tensor):
        """frames [N, 80] log-mel -> (formants [N, 3], confident [N])."""
        env = frames.to(torch.float64) @ self.lifter
        out = []
        for region in self.regions:
            w = torch.softmax(env[:, region] / self.temperature, dim=1)
            out.append(w @ self.centres[region])
        fm = torch.stack(out, dim=1)
        return fm, torch.ones(fm.shape[0], dtype=torch.bool)


def _moments(fm: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    mean = fm.mean(0)
    std = torch.sqrt(((fm - mean) ** 2).mean(0) + 1e-6)
    return mean, std


def grouped_formant_moments(proxy: FormantProxy, mel: torch.Tensor, voiced: torch.Tensor,
                            labels: torch.Tensor, stride: int = 2):
    """Per-sex moments of proxy formants over voiced frames of a batch: {label: (mean, std)}."""
    out = {}
    for c in (0, 1):
        sel = labels == c
        if not sel.any():
            continue
        frames = mel[sel].transpose(1, 2)[voiced[sel]][::stride]
        if frames.shape[0] == 0:
            continue
        fm, ok = proxy(frames)
        if ok.sum() < 2:
            continue
        out[c] = _moments(fm[ok])
    return out


def proxy_neutral_moments(proxy: FormantProxy, data: FeatureSet, stride: int = 4) -> FormantMoments:
    with torch.no_grad():
        frames = torch.as_tensor(data.mels).transpose(1, 2)[torch.as_tensor(data.voiced)][::stride]
        fm, ok = proxy(frames)
        mean, std = _moments(fm[ok])
    return FormantMoments(mean.numpy(), std.numpy())


# -- state -----------------------------------------------------------------


@dataclass
class TrainState:
    config: TrainingConfig
    generator: Generator
    discriminator: Discriminator
    classifier: SexClassifier
    neutral: NeutralState
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    extractor: MFCCExtractor = field(default_factory=MFCCExtractor)
    epoch: int = 0
    step: int = 0
    best_val: float = math.inf
    history: list = field(default_factory=list)
    weights: L.LossWeights = L.DEFAULT_WEIGHTS
    # running per-sex proxy formant moments {label: (mean, std)}, detached
    formant_running: dict = field(default_factory=dict)
    formant_momentum: float = 0.9

    def __post_init__(self):
        self.pitch_proxy = PitchProxy()
        self.formant_proxy = FormantProxy()


def init_state(config: TrainingConfig, classifier: SexClassifier, neutral: NeutralState | None = None) -> TrainState:
    torch.manual_seed(config.seed)
    gen = Generator(seed=config.seed)
    disc = Discriminator()
    opt_g = torch.optim.AdamW(gen.parameters(), lr=config.lr_generator, weight_decay=config.weight_decay)
    opt_d = torch.optim.AdamW(disc.parameters(), lr=config.lr_discriminator, weight_decay=config.weight_decay)
    return TrainState(config, gen, disc, classifier.freeze(), neutral or NeutralState(), opt_g, opt_d)


@dataclass
class Batch:
    mel: torch.Tensor
    labels: torch.Tensor
    f0: torch.Tensor
    voiced: torch.Tensor

    @classmethod
    def from_features(cls, data: FeatureSet, idx) -> "Batch":
        idx = np.asarray(idx)
        return cls(
            torch.as_tensor(data.mels[idx]),
            torch.as_tensor(data.labels[idx]),
            torch.as_tensor(data.f0[idx], dtype=torch.float32),
            torch.as_tensor(data.voiced[idx]),
        )

    def mean_f0(self) -> float:
        v = self.voiced
        return float(self.f0[v].double().mean()) if v.any() else float("nan")


def _snapshot(module: nn.Module, opt: torch.optim.Optimizer):
    return copy.deepcopy(module.state_dict()), copy.deepcopy(opt.state_dict())


def _all_finite(module: nn.Module) -> bool:
    return all(torch.isfinite(p).all() for p in module.parameters())


def discriminator_step(state: TrainState, real: torch.Tensor, fake: torch.Tensor) -> L.LossReport:
    if real.shape[0] == 0 or fake.shape[0] == 0:
        raise ValueError("empty batch")
    before = _snapshot(state.discriminator, state.opt_d)
    d = state.discriminator
    d.train()
    loss = L.adv_loss_d(d(real), d(fake.detach()), state.weights)
    if not torch.isfinite(loss):
        raise FloatingPointError("discriminator loss is not finite")
    state.opt_d.zero_grad(set_to_none=True)
    loss.backward()
    state.opt_d.step()
    if not _all_finite(d):
        d.load_state_dict(before[0])
        state.opt_d.load_state_dict(before[1])
        raise FloatingPointError("discriminator update produced non-finite parameters")
    return L.LossReport({"adv_d": loss.item()})


def generator_terms(state: TrainState, batch: Batch, mu: float, running_out: dict | None = None
                    ) -> dict[str, torch.Tensor]:
    """The six generator loss terms on one batch.

    Per-sex formant moments of a 16-clip batch swing by hundreds of Hz with
    vowel content, so each group's moments are blended with a detached running
    average before the loss; the gradient flows through the batch share only.
    The blended values are written to `running_out` when given.
    """
    g = state.generator
    x, y, f0, voiced = batch.mel, batch.labels, batch.f0, batch.voiced
    fake = g(x, y, f0, voiced, mu, g.s_neutral)

    f0_new = shift_f0(f0, voiced, mu)
    m = voiced.to(f0.dtype)
    src_mean = (f0 * m).sum(1) / m.sum(1).clamp_min(1)
    src_mean = torch.where(m.sum(1) > 0, src_mean, torch.full_like(src_mean, mu))
    cycled = g(fake, y, f0_new, voiced, src_mean, g.sex_embedding(y))

    terms = {
        "adv": L.adv_loss_g(state.discriminator(fake), state.weights),
        "sex": L.sex_ambiguity_loss(state.classifier(fake)),
        "content": L.content_loss(state.extractor(x), state.extractor(fake)),
    }
    has_voice = voiced.any(1)
    if has_voice.any():
        f0_gen = state.pitch_proxy(fake)
        terms["f0"] = L.f0_loss(f0_gen[has_voice], f0[has_voice], mu, voiced[has_voice], state.weights)
    else:
        terms["f0"] = fake.new_zeros(())
    groups = grouped_formant_moments(state.formant_proxy, fake, voiced, y)
    neutral = state.neutral.proxy_formant_moments
    if groups and neutral is not None:
        rho = state.formant_momentum
        blended = {}
        for c, (mean, std) in groups.items():
            if c in state.formant_running:
                run_mean, run_std = state.formant_running[c]
                mean, std = rho * run_mean + (1 - rho) * mean, rho * run_std + (1 - rho) * std
            blended[c] = (mean, std)
        if running_out is not None:
            running_out.update({c: (m.detach(), s.detach()) for c, (m, s) in blended.items()})
        terms["formant"] = torch.stack([
            L.formant_loss((mean, std), neutral, state.weights) for mean, std in blended.values()
        ]).mean()
    else:
        terms["formant"] = fake.new_zeros(())
    terms["cyc"] = L.cycle_loss(x, cycled)
    return terms


def _combine(terms: dict[str, torch.Tensor], weights: L.LossWeights) -> tuple[torch.Tensor, L.LossReport]:
    values = {k: v.item() for k, v in terms.items()}
    for k, v in values.items():
        if not math.isfinite(v):
            raise FloatingPointError(f"generator loss term {k!r} is not finite: {values}")
    total = L.total_generator_loss({k: v.double() for k, v in terms.items()}, weights)
    values["total"] = total.item()
    return total, L.LossReport(values)


def generator_step(state: TrainState, batch: Batch) -> L.LossReport:
    before = _snapshot(state.generator, state.opt_g)
    state.generator.train()
    state.discriminator.eval()
    running = {}
    terms = generator_terms(state, batch, state.neutral.mu_neutral_hz, running)
    total, report = _combine(terms, state.weights)
    state.opt_g.zero_grad(set_to_none=True)
    state.discriminator.zero_grad(set_to_none=True)
    total.backward()
    state.opt_g.step()
    state.discriminator.zero_grad(set_to_none=True)
    if not _all_finite(state.generator):
        state.generator.load_state_dict(before[0])
        state.opt_g.load_state_dict(before[1])
        raise FloatingPointError(f"generator update produced non-finite parameters: {report.terms}")
    state.formant_running = {**state.formant_running, **running}
    state.neutral = update_mu_neutral(state.neutral, batch.mean_f0())
    state.step += 1
    return report


def train_step(state: TrainState, batch: Batch) -> tuple[L.LossReport, L.LossReport]:
    with torch.no_grad():
        state.generator.eval()
        fake = state.generator(batch.mel, batch.labels, batch.f0, batch.voiced,
                               state.neutral.mu_neutral_hz, state.generator.s_neutral)
    d_report = discriminator_step(state, batch.mel, fake)
    g_report = generator_step(state, batch)
    return d_report, g_report


def validation_loss(state: TrainState, data: FeatureSet, batch_size: int = 32) -> float:
    state.generator.eval()
    state.discriminator.eval()
    totals, n = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(data), batch_size):
            idx = np.arange(i, min(i + batch_size, len(data)))
            terms = generator_terms(state, Batch.from_features(data, idx), state.neutral.mu_neutral_hz)
            _, report = _combine(terms, state.weights)
            totals += report["total"] * len(idx)
            n += len(idx)
    return totals / n


def fit(config: TrainingConfig, train: FeatureSet, valid: FeatureSet,
        classifier: SexClassifier | None = None, neutral: NeutralState | None = None,
        log_path=None) -> TrainState:
    """Train until max_epochs or `early_stop_patience` epochs without validation improvement.

    Batch order is a pure function of (seed, epoch), so reruns are bit-identical.
    Returns the state holding the best-validation generator and discriminator.
    """
    if len(set(train.labels.tolist())) < 2:
        raise ValueError("training corpus must contain both sexes")
    if set(train.ids) & set(valid.ids):
        raise ValueError("validation split overlaps training split")
    torch.use_deterministic_algorithms(True)
    if classifier is None:
        classifier = proxy_classifier_train(train.mels, train.labels, epochs=config.classifier_epochs,
                                            seed=config.seed)
    state = init_state(config, classifier, neutral)
    if state.neutral.proxy_formant_moments is None:
        state.neutral = dataclasses.replace(
            state.neutral, proxy_formant_moments=proxy_neutral_moments(state.formant_proxy, train))

    log_file = open(log_path, "a") if log_path else None
    try:
        val = validation_loss(state, valid)
        state.history.append({"epoch": 0, "valid_total": val, "mu_neutral_hz": state.neutral.mu_neutral_hz})
        # epoch 0 is only a reference point; the best checkpoint is chosen among trained epochs
        best = None
        state.best_val = math.inf
        stale = 0
        for epoch in range(1, config.max_epochs + 1):
            state.epoch = epoch
            for i, idx in enumerate(balanced_batches(train.labels, config.batch_size, config.seed, epoch)):
                if config.steps_per_epoch and i >= config.steps_per_epoch:
                    break
                d_rep, g_rep = train_step(state, Batch.from_features(train, idx))
                if log_file:
                    rec = L.LossReport({**g_rep.terms, **d_rep.terms, "mu_neutral_hz": state.neutral.mu_neutral_hz})
                    log_file.write(rec.to_json(state.step) + "\n")
            val = validation_loss(state, valid)
            state.history.append({"epoch": epoch, "valid_total": val, "mu_neutral_hz": state.neutral.mu_neutral_hz})
            log.info("epoch %d valid_total %.4f mu %.2f", epoch, val, state.neutral.mu_neutral_hz)
            if val < state.best_val:
                state.best_val = val
                best = _best_copy(state)
                stale = 0
            else:
                stale += 1
                if stale >= config.early_stop_patience:
                    log.info("early stop after epoch %d", epoch)
                    break
    finally:
        if log_file:
            log_file.close()
    _restore_best(state, best)
    return state


def _best_copy(state: TrainState) -> dict:
    return {
        "generator": copy.deepcopy(state.generator.state_dict()),
        "discriminator": copy.deepcopy(state.discriminator.state_dict()),
        "opt_g": copy.deepcopy(state.opt_g.state_dict()),
        "opt_d": copy.deepcopy(state.opt_d.state_dict()),
        "neutral": state.neutral,
        "formant_running": dict(state.formant_running),
        "epoch": state.epoch,
        "step": state.step,
    }


def _restore_best(state: TrainState, best: dict) -> None:
    state.generator.load_state_dict(best["generator"])
    state.discriminator.load_state_dict(best["discriminator"])
    state.opt_g.load_state_dict(best["opt_g"])
    state.opt_d.load_state_dict(best["opt_d"])
    state.neutral = best["neutral"]
    state.formant_running = best["formant_running"]
    state.best_epoch = best["epoch"]


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(path, state: TrainState) -> None:
    """Atomic write: temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "generator": state.generator.state_dict(),
        "discriminator": state.discriminator.state_dict(),
        "classifier": state.classifier.state_dict(),
        "opt_g": state.opt_g.state_dict(),
        "opt_d": state.opt_d.state_dict(),
        "neutral": state.neutral.to_dict(),
        "formant_running": state.formant_running,
        "config": asdict(state.config),
        "config_hash": state.config.digest(),
        "epoch": state.epoch,
        "step": state.step,
        "best_val": state.best_val,
        "history": state.history,
    }
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path) -> TrainState:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    config = TrainingConfig(**payload["config"])
    clf = SexClassifier()
    clf.load_state_dict(payload["classifier"])
    state = init_state(config, clf, NeutralState.from_dict(payload["neutral"]))
    state.generator.load_state_dict(payload["generator"])
    state.discriminator.load_state_dict(payload["discriminator"])
    state.opt_g.load_state_dict(payload["opt_g"])
    state.opt_d.load_state_dict(payload["opt_d"])
    state.epoch = payload["epoch"]
    state.step = payload["step"]
    state.best_val = payload["best_val"]
    state.history = payload["history"]
    state.formant_running = payload["formant_running"]
    return state


def state_checksums(state: TrainState) -> dict[str, str]:
    return {
        "generator": checksum(state.generator),
        "discriminator": checksum(state.discriminator),
        "classifier": checksum(state.classifier),
    }
