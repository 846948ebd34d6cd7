import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from neutralvoice.generator import (
    EMB_DIM,
    Generator,
    encode_content,
    generate,
    modulate_formants,
    neutralize_f0,
    sex_embedding,
)
from neutralvoice.signal import LOW_BANDS, MelSpectrogram, PitchTrack


@pytest.fixture(scope="module")
def gen():
    return Generator(seed=0).eval()


def random_mel(T, seed=0):
    rng = np.random.default_rng(seed)
    return MelSpectrogram(rng.uniform(-11.0, 1.0, size=(80, T)).astype(np.float32))


def voiced_track(T, f0=140.0, seed=0):
    rng = np.random.default_rng(seed)
    voiced = rng.random(T) > 0.2
    voiced[0] = True
    return PitchTrack(np.where(voiced, f0 * (1 + 0.05 * rng.standard_normal(T)), 0.0), voiced)


# -- embedding -------------------------------------------------------------


def test_sex_embedding_rows(gen):
    a, b = sex_embedding(gen, 0), sex_embedding(gen, 0)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (EMB_DIM,)
    assert not np.array_equal(a, sex_embedding(gen, 1))


def test_sex_embedding_rejects_label_2(gen):
    with pytest.raises(ValueError):
        sex_embedding(gen, 2)


def test_s_neutral_initialised_at_mean(gen):
    fresh = Generator(seed=3)
    np.testing.assert_allclose(fresh.s_neutral.detach().numpy(), fresh.embedding.weight.detach().mean(0).numpy(), atol=1e-7)


# -- formant modulation ----------------------------------------------------


def test_modulate_zero_embedding_identity():
    mel = random_mel(20)
    out = modulate_formants(mel, np.zeros(EMB_DIM), np.random.default_rng(0).normal(size=(40, EMB_DIM)))
    np.testing.assert_array_equal(out.values, mel.values)


def test_modulate_half_gain():
    mel = random_mel(20, seed=1)
    W = np.zeros((40, EMB_DIM))
    W[:, 0] = -0.5
    emb = np.zeros(EMB_DIM)
    emb[0] = 1.0
    out = modulate_formants(mel, emb, W)
    np.testing.assert_allclose(out.values[:LOW_BANDS], 0.5 * mel.values[:LOW_BANDS], rtol=1e-6)
    np.testing.assert_array_equal(out.values[LOW_BANDS:], mel.values[LOW_BANDS:])


def test_modulate_gain_clamped():
    mel = random_mel(5, seed=2)
    W = np.zeros((40, EMB_DIM))
    W[:, 0] = 100.0
    emb = np.zeros(EMB_DIM)
    emb[0] = 1.0
    np.testing.assert_allclose(modulate_formants(mel, emb, W).values[:LOW_BANDS], 4.0 * mel.values[:LOW_BANDS], rtol=1e-6)
    np.testing.assert_allclose(modulate_formants(mel, -emb, W).values[:LOW_BANDS], 0.1 * mel.values[:LOW_BANDS], rtol=1e-6)


def test_modulate_rejects_nonfinite_embedding():
    emb = np.zeros(EMB_DIM)
    emb[3] = np.nan
    with pytest.raises(ValueError):
        modulate_formants(random_mel(5), emb, np.zeros((40, EMB_DIM)))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), scale=st.floats(0.0, 50.0))
def test_modulate_upper_rows_bit_equal(seed, scale):
    rng = np.random.default_rng(seed)
    mel = random_mel(7, seed=seed % 1000)
    out = modulate_formants(mel, scale * rng.normal(size=EMB_DIM), rng.normal(size=(40, EMB_DIM)))
    assert out.values[LOW_BANDS:].tobytes() == mel.values[LOW_BANDS:].tobytes()


# -- F0 neutralisation -----------------------------------------------------


def test_neutralize_constant_track():
    out = neutralize_f0(PitchTrack(np.full(10, 200.0), np.ones(10, bool)), 150.0)
    np.testing.assert_allclose(out.f0_hz, 150.0)


def test_neutralize_worked_example():
    # frames 220 and 180 have mean 200; 220 * 150 / 200 = 165
    out = neutralize_f0(PitchTrack(np.array([220.0, 180.0]), np.ones(2, bool)), 150.0)
    assert out.f0_hz[0] == pytest.approx(165.0, abs=1e-9)


def test_neutralize_keeps_unvoiced():
    out = neutralize_f0(PitchTrack(np.array([220.0, 0.0, 180.0]), np.array([True, False, True])), 150.0)
    assert out.f0_hz[1] == 0.0 and not out.voiced[1]


def test_neutralize_errors_and_unvoiced_passthrough():
    track = PitchTrack(np.zeros(4), np.zeros(4, bool))
    assert neutralize_f0(track, 150.0) is track
    with pytest.raises(ValueError):
        neutralize_f0(voiced_track(5), 0.0)


@given(st.lists(st.floats(50, 500), min_size=1, max_size=40), st.floats(60, 400))
def test_neutralize_idempotent_and_hits_mean(f0s, mu):
    track = PitchTrack(np.asarray(f0s), np.ones(len(f0s), bool))
    once = neutralize_f0(track, mu)
    twice = neutralize_f0(once, mu)
    assert once.mean_f0() == pytest.approx(mu, rel=1e-9)
    np.testing.assert_allclose(twice.f0_hz, once.f0_hz, rtol=1e-9)


# -- encoder ---------------------------------------------------------------


def test_encode_shape(gen):
    assert encode_content(gen, random_mel(101)).shape == (256, 10, 13)


def test_encode_deterministic_and_nonlinear(gen):
    mel = random_mel(40, seed=4)
    a, b = encode_content(gen, mel), encode_content(gen, mel)
    np.testing.assert_array_equal(a, b)
    doubled = encode_content(gen, MelSpectrogram(2 * mel.values))
    assert not np.allclose(doubled, a)
    assert not np.allclose(doubled, 2 * a)


def test_encode_rejects_empty(gen):
    with pytest.raises(ValueError):
        gen.encode(torch.zeros(1, 80, 0))


# -- full forward ----------------------------------------------------------


def test_generate_shape_and_determinism(gen):
    mel, pitch = random_mel(101, seed=5), voiced_track(101)
    a = generate(gen, mel, 0, pitch, 150.0)
    b = generate(gen, mel, 0, pitch, 150.0)
    assert a.values.shape == (80, 101)
    np.testing.assert_array_equal(a.values, b.values)
    assert np.all(np.isfinite(a.values))


def test_generate_rejects_misaligned_pitch(gen):
    with pytest.raises(ValueError):
        generate(gen, random_mel(30), 1, voiced_track(29), 150.0)


@settings(max_examples=10, deadline=None)
@given(T=st.integers(8, 130), label=st.integers(0, 1))
def test_generate_preserves_shape(gen, T, label):
    out = generate(gen, random_mel(T, seed=T), label, voiced_track(T, seed=T), 150.0,
                   target_style=sex_embedding(gen, 1 - label))
    assert out.values.shape == (80, T)


def test_fresh_generator_keeps_envelope(gen):
    # zero-initialised output head: only the modulation and the pitch swap act
    mel, pitch = random_mel(30, seed=6), PitchTrack(np.zeros(30), np.zeros(30, bool))
    out = generate(gen, mel, 0, pitch, 150.0)
    np.testing.assert_array_equal(out.values[LOW_BANDS:], mel.values[LOW_BANDS:])


def test_gradients_match_finite_differences():
    """Directional derivative per learnable tensor, float64, T = 16."""
    torch.manual_seed(0)
    g = Generator(seed=1).double()
    # break the zero initialisations so every tensor sits on the gradient path
    for m in g.modules():
        if isinstance(m, nn.Linear) or m is g.out:
            nn.init.normal_(m.weight, std=0.05)
            nn.init.normal_(m.bias, std=0.05)
    T = 16
    x = torch.empty(2, 80, T, dtype=torch.float64).uniform_(-10, 1)
    labels = torch.tensor([0, 1])
    f0 = torch.tensor(np.vstack([voiced_track(T, 120, 1).f0_hz, voiced_track(T, 210, 2).f0_hz]))
    voiced = f0 > 0
    probe = torch.randn(2, 80, T, dtype=torch.float64)

    def loss():
        return (g(x, labels, f0, voiced, 150.0, g.s_neutral) * probe).sum()

    g.zero_grad()
    loss().backward()
    # small step: wider stencils straddle LeakyReLU kinks somewhere in the batch
    h = 1e-7
    for name, p in g.named_parameters():
        v = torch.randn_like(p)
        analytic = (p.grad * v).sum().item()
        with torch.no_grad():
            p.add_(h * v)
            up = loss().item()
            p.sub_(2 * h * v)
            down = loss().item()
            p.add_(h * v)
        numeric = (up - down) / (2 * h)
        # biases feeding an instance norm have an exactly zero gradient; the floor absorbs roundoff
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-2)
        assert rel < 1e-4, (name, analytic, numeric)
