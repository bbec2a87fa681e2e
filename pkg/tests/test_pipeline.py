import math
import random

import numpy as np
import pytest

from proxyview.imagegeo import RgbImage
from proxyview.pipeline import (
    SamplerConfig,
    SamplingTrace,
    ToyDenoiser,
    ConditionBundle,
    ValidationError,
    add_noise,
    baseline_embedding,
    decode_latent,
    embed_cross_modal,
    encode_latent,
    extract_features,
    make_noise_schedule,
    _latent_codec,
    sample_multiview,
)
from proxyview.render import CameraPose
from proxyview.schedule import lambda_geo

INPUT = CameraPose(10.0, 10.0)
SMALL = SamplerConfig(T=6, latent_size=16, layers=2, channels=16, heads=2)


def _image(seed, size=32):
    return RgbImage(np.random.default_rng(seed).random((size, size, 3)))


def test_alpha_bar_properties():
    s = make_noise_schedule(50)
    assert s.alpha_bars[0] == 1.0
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert np.all((s.betas > 0) & (s.betas < 1)) and np.all(np.diff(s.betas) > 0)


def test_alpha_bar_final_value_for_T1000():
    s = make_noise_schedule(1000)
    direct = 1.0
    for i in range(1000):
        direct *= 1.0 - (1e-4 + (0.02 - 1e-4) * i / 999)
    assert s.alpha_bars[1000] == pytest.approx(direct, rel=1e-10)
    assert 2e-5 < s.alpha_bars[1000] < 8e-5


def test_noise_schedule_validation():
    with pytest.raises(ValueError):
        make_noise_schedule(10, beta_start=0.1, beta_end=0.01)


def test_add_noise_at_zero_is_identity_and_deterministic():
    s = make_noise_schedule(50)
    x0 = np.random.default_rng(0).standard_normal((1, 9, 4))
    assert (add_noise(x0, 0, s, 3) == x0).all()
    assert add_noise(x0, 20, s, 3).tobytes() == add_noise(x0, 20, s, 3).tobytes()
    assert not np.array_equal(add_noise(x0, 20, s, 3), add_noise(x0, 20, s, 4))
    with pytest.raises(ValueError):
        add_noise(x0, 51, s, 0)


def test_add_noise_monte_carlo_variance():
    s = make_noise_schedule(50)
    samples = add_noise(np.zeros(100_000), 50, s, 7)
    assert abs(samples.var() / (1 - s.alpha_bars[50]) - 1) < 0.03


def test_features_token_count_and_determinism():
    img = _image(0, 320)
    feats = extract_features(img, 5)
    assert len(feats) == 4
    assert all(f.shape == (1, 1600, 64) for f in feats)
    again = extract_features(img, 5)
    assert all(a.tobytes() == b.tobytes() for a, b in zip(feats, again))


def test_constant_image_gives_identical_tokens():
    feats = extract_features(RgbImage.filled(24, 24, (0.2, 0.7, 0.4)), 1)
    for f in feats:
        np.testing.assert_array_equal(f[0], np.broadcast_to(f[0, :1], f[0].shape))


def test_feature_locality():
    a = _image(1, 32)
    data = a.data.copy()
    data[8:16, 16:24] = 0.123  # one 8x8 patch: row 1, column 2 of a 4x4 grid
    b = RgbImage(data)
    for fa, fb in zip(extract_features(a, 2), extract_features(b, 2)):
        changed = np.nonzero(np.any(fa[0] != fb[0], axis=1))[0]
        assert changed.tolist() == [1 * 4 + 2]


def test_features_reject_indivisible_size():
    with pytest.raises(ValueError):
        extract_features(_image(0, 20), 0)


def test_embedding_shape_baseline_and_determinism():
    base = baseline_embedding()
    assert base.shape == (64,) and np.isfinite(base).all()
    assert np.array_equal(base, embed_cross_modal("", RgbImage.filled(8, 8)))
    img = _image(3)
    assert np.array_equal(embed_cross_modal("a red chair", img), embed_cross_modal("a red chair", img))
    assert not np.array_equal(embed_cross_modal("a red chair", img), embed_cross_modal("a red chair", _image(4)))


def test_embedding_word_swaps_change_vector():
    rng = random.Random(0)
    alphabet = "abcdefghijklmnopqrstuvwxyz"
    img = RgbImage.filled(8, 8)
    for _ in range(1000):
        words = ["".join(rng.choices(alphabet, k=rng.randint(1, 8))) for _ in range(rng.randint(1, 6))]
        i = rng.randrange(len(words))
        swapped = list(words)
        while swapped[i] == words[i]:
            swapped[i] = "".join(rng.choices(alphabet, k=rng.randint(1, 8)))
        assert not np.array_equal(embed_cross_modal(" ".join(words), img), embed_cross_modal(" ".join(swapped), img))


def test_latent_codec_round_trip():
    codec = _latent_codec(0, 16)
    np.testing.assert_allclose(codec @ codec.T, np.eye(3) * 16 / 3, atol=1e-12)
    pooled = RgbImage(np.kron(np.random.default_rng(0).random((2, 2, 3)), np.ones((8, 8, 1))))
    back = decode_latent(encode_latent(pooled, codec), codec, 16)
    np.testing.assert_allclose(back.data, pooled.data, atol=1e-12)


def test_toy_denoiser_finite_and_deterministic():
    model = ToyDenoiser.from_seed(1, 2, 16, 2)
    rng = np.random.default_rng(0)
    bundle = ConditionBundle(rng.standard_normal(64), [rng.standard_normal((1, 4, 16))] * 2, [rng.standard_normal((1, 4, 16))] * 2)
    x = rng.standard_normal((1, 4, 16))
    out = model(x, 10, bundle, 0.2)
    assert out.shape == x.shape and np.isfinite(out).all()
    assert out.tobytes() == ToyDenoiser.from_seed(1, 2, 16, 2)(x, 10, bundle, 0.2).tobytes()


def _run(geo, poses, cfg=SMALL, trace=None, text="a toy"):
    return sample_multiview(_image(9), text, geo, poses, INPUT, cfg, trace)


def _poses(*azimuths):
    return [CameraPose(a, 0.0) for a in azimuths]


def test_sampler_is_deterministic():
    geo = [_image(10), _image(11)]
    a = _run(geo, _poses(30, 90))
    b = _run(geo, _poses(30, 90))
    assert len(a) == 2 and all(x.data.shape == (16, 16, 3) for x in a)
    assert all(x.data.tobytes() == y.data.tobytes() for x, y in zip(a, b))


def test_zero_lambda_ignores_geometry_images():
    cfg = SamplerConfig(**{**SMALL.__dict__, "lambda_override": 0.0})
    a = _run([_image(10), _image(11)], _poses(30, 330), cfg)
    b = _run([_image(98), RgbImage.filled(32, 32, (0, 0, 0))], _poses(30, 330), cfg)
    assert all(x.data.tobytes() == y.data.tobytes() for x, y in zip(a, b))


def test_geometry_changes_output_when_active():
    cfg = SamplerConfig(**{**SMALL.__dict__, "lambda_override": 0.5})
    a = _run([_image(10)], _poses(30), cfg)
    b = _run([_image(12)], _poses(30), cfg)
    assert a[0].data.tobytes() != b[0].data.tobytes()


def test_perpendicular_view_equals_zero_lambda_run():
    pose = [CameraPose(90.0, 0.0)]
    inp = CameraPose(0.0, 0.0)
    zero = SamplerConfig(**{**SMALL.__dict__, "T": 50, "lambda_override": 0.0})
    trace = SamplingTrace()
    a = sample_multiview(_image(9), "x", [_image(10)], pose, inp, SamplerConfig(**{**zero.__dict__, "lambda_override": None}), trace)
    b = sample_multiview(_image(9), "x", [_image(13)], pose, inp, zero)
    assert trace.views[0].mask_scale == 0.0
    assert a[0].data.tobytes() == b[0].data.tobytes()


def test_trace_contracts():
    cfg = SamplerConfig(T=50, latent_size=40)
    trace = SamplingTrace()
    azimuths = (30, 90, 150, 210, 270, 330)
    _run([_image(10 + i, 40) for i in range(6)], _poses(*azimuths), cfg, trace)
    sched = make_noise_schedule(50)
    for vt in trace.views:
        assert vt.steps == list(range(50, 0, -1))
        assert len(set(vt.geo_checksums)) == 1
        assert vt.scheduled_lambda == [lambda_geo(t, cfg.schedule) for t in vt.steps]
        expected = vt.scheduled_lambda if vt.mask_scale > 0 else [0.0] * 50
        assert vt.applied_lambda == expected
    # each step pools 6 views x 25 tokens x 64 channels x 4 layers of noise samples
    pooled = np.mean([vt.image_noise_var for vt in trace.views], axis=0)
    ratios = pooled / (1 - sched.alpha_bars[trace.views[0].steps])
    assert np.all(np.abs(ratios - 1) < 0.05)


def test_swapping_views_permutes_outputs():
    geo = [_image(10), _image(11), _image(12)]
    poses = _poses(30, 150, 330)
    a = _run(geo, poses)
    b = _run(geo[::-1], poses[::-1])
    assert [x.data.tobytes() for x in a] == [x.data.tobytes() for x in b[::-1]]


def test_mismatched_view_counts():
    with pytest.raises(ValidationError):
        _run([_image(10)], _poses(30, 90))


def test_sampler_config_validation():
    with pytest.raises(ValidationError):
        SamplerConfig(latent_size=20)
    with pytest.raises(ValidationError):
        SamplerConfig(lambda_override=2.0)


def test_default_sampler_output_shape():
    out = sample_multiview(_image(9, 64), "", [_image(1, 64)], _poses(30), INPUT, SamplerConfig(T=2))
    assert out[0].data.shape == (40, 40, 3)
    assert math.isfinite(float(out[0].data.sum()))
