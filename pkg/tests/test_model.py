import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from avse import data
from avse.autograd import grad_check
from avse.errors import DataError, ShapeError
from avse.losses import LossKind, stoi_loss
from avse.model import (
    ModelConfig, build, enhance, forward, ideal_ratio_mask, load_checkpoint, masked,
    save_checkpoint, upsample_visual,
)
from avse.train import TrainConfig, load_examples, train

SMALL = dict(channels=3, visual_dim=4)


def mags(rng, T=40, F=257):
    return rng.gamma(2.0, 1.0, (F, T))


def expected_param_count(cfg: ModelConfig) -> int:
    C, D, Din = cfg.channels, cfg.visual_dim, cfg.visual_in
    skip = C if cfg.skip_connections else 0
    n = (C * 16 + C) + (cfg.down_layers - 1) * (C * C * 16 + C)   # strided encoder
    n += cfg.conv_blocks * 2 * (C * C * 9 + C)                     # conv blocks
    if cfg.use_visual:
        n += D * Din * 2 * cfg.time_factor + D + 2 * (D * D + D)   # visual branch
    n += (C + D + skip) * C * 9 + C + (C * C * 9 + C)              # first up-block
    n += (cfg.up_blocks - 1) * ((C + skip) * C * 9 + C + C * C * 9 + C)
    n += (cfg.down_layers - 1) * ((C + skip) * C * 16 + C) + (C + skip) * 16 + 1
    return n


# ------------------------------------------------------------------------ build


def test_default_build_and_count():
    m = build(ModelConfig())
    assert m.num_parameters() == expected_param_count(ModelConfig()) == 54817


@pytest.mark.parametrize("kw", [dict(), dict(skip_connections=False), dict(use_visual=False),
                                dict(channels=5, down_layers=1, conv_blocks=2, up_blocks=2)])
def test_param_count_arithmetic(kw):
    cfg = ModelConfig(**kw)
    assert build(cfg).num_parameters() == expected_param_count(cfg)


def test_build_is_seeded():
    a, b = build(ModelConfig(seed=4)), build(ModelConfig(seed=4))
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].values, b.params[k].values)
    c = build(ModelConfig(seed=5))
    assert not np.array_equal(a.params["enc.down0.w"].values, c.params["enc.down0.w"].values)


def test_params_are_float32_representable():
    for p in build(ModelConfig()).parameters():
        np.testing.assert_array_equal(p.values, p.values.astype(np.float32))


def test_geometry_errors():
    with pytest.raises(ShapeError):
        ModelConfig(input_bins=63)
    with pytest.raises(ShapeError):
        ModelConfig(up_blocks=2)
    with pytest.raises(DataError):
        ModelConfig(visual_dim=0)
    with pytest.raises(DataError):
        ModelConfig.from_dict({"chanels": 3})


# ------------------------------------------------------------- upsample_visual


def track(n, D=3):
    return data.VisualFeatureTrack(np.arange(n * D, dtype=float).reshape(n, D), 25.0)


def test_upsample_visual_repeats_four_times():
    out = upsample_visual(track(25), 100, 0.01)
    assert out.shape == (100, 3)
    for v in range(25):
        assert np.all(out[4 * v:4 * v + 4] == track(25).features[v])


def test_upsample_visual_clamps_tail():
    out = upsample_visual(track(25), 103, 0.01)
    last = np.all(out == track(25).features[-1], axis=1)
    assert last.sum() == 7 and np.all(last[-7:])


def test_upsample_visual_single_frame():
    out = upsample_visual(track(1), 17, 0.01)
    assert np.all(out == out[0])


def test_upsample_visual_errors():
    with pytest.raises(DataError):
        upsample_visual(track(3), 0, 0.01)


# ---------------------------------------------------------------------- forward


@given(st.integers(1, 70), st.integers(0, 50))
def test_forward_shape_and_range(T, seed):
    r = np.random.default_rng(seed)
    m = build(ModelConfig(**SMALL, visual_in=5))
    noisy = mags(r, T)
    mask = forward(m, noisy, r.standard_normal((T, 5))).values
    assert mask.shape == noisy.shape
    assert np.all((mask > 0) & (mask < 1))
    assert np.all(masked(noisy, forward(m, noisy)).values <= noisy)


@given(st.sampled_from([1, 2, 3]), st.sampled_from([1, 2, 3]), st.booleans(), st.integers(1, 4))
def test_shape_closure_over_configs(down, blocks, skips, C):
    F = 2 ** (down + blocks) * 2
    cfg = ModelConfig(input_bins=F, down_layers=down, conv_blocks=blocks, up_blocks=blocks,
                      channels=C, skip_connections=skips, visual_in=2, visual_dim=2)
    T = 11
    out = forward(build(cfg), np.ones((F + 1, T)), np.zeros((T, 2)))
    assert out.shape == (F + 1, T)


def test_forward_shape_errors(rng):
    m = build(ModelConfig(**SMALL, visual_in=5))
    with pytest.raises(ShapeError):
        forward(m, mags(rng, 20, F=256))
    with pytest.raises(ShapeError):
        forward(m, mags(rng, 20), np.zeros((19, 5)))


def test_zeroed_visual_av_equals_ao(rng):
    av = build(ModelConfig(**SMALL, visual_in=5, use_visual=True, seed=9))
    av.zero_visual()
    ao = build(ModelConfig(**SMALL, visual_in=5, use_visual=False, seed=9))
    noisy, vis = mags(rng, 37), rng.standard_normal((37, 5))
    np.testing.assert_array_equal(forward(av, noisy, vis).values, forward(ao, noisy).values)


def test_visual_track_influences_mask(rng):
    m = build(ModelConfig(**SMALL, visual_in=5))
    noisy, vis = mags(rng, 24), rng.standard_normal((24, 5))
    assert np.max(np.abs(forward(m, noisy, vis).values - forward(m, noisy, np.zeros_like(vis)).values)) > 0


def test_model_loss_grad_check():
    r = np.random.default_rng(0)
    m = build(ModelConfig(input_bins=32, channels=4, visual_in=6, visual_dim=4))
    # zero-initialised biases put some ReLUs exactly on their kink; move off it
    for k, p in m.params.items():
        if k.endswith(".b"):
            p.values = r.uniform(-0.1, 0.1, p.shape)
    clean = r.gamma(2, 1, (33, 32))
    noisy = clean + r.gamma(1, 1, (33, 32))
    vis = r.standard_normal((32, 6))

    def f():
        return stoi_loss(masked(noisy, forward(m, noisy, vis)), clean, sample_rate=2000, fft_size=64)

    assert grad_check(f, m.parameters(), eps=1e-6, coords=4) < 1e-3


# ---------------------------------------------------------------------- enhance


def _forced(bias):
    m = build(ModelConfig(**SMALL, use_visual=False))
    for k, p in m.params.items():
        p.values = np.zeros_like(p.values)
    m.params[f"dec.out{m.config.down_layers - 1}.b"].values = np.array([bias])
    return m


def test_identity_mask_passthrough(utterance):
    out = enhance(_forced(40.0), utterance)
    ref = data.extract_features(utterance).reconstruct()
    assert len(out) == len(ref)
    sl = slice(400, len(ref) - 400)
    err = np.linalg.norm(out.samples[sl] - ref.samples[sl]) / np.linalg.norm(ref.samples[sl])
    assert err < 1e-3


def test_zero_mask_silences(utterance):
    out = enhance(_forced(-40.0), utterance)
    assert np.sum(out.samples**2) < 1e-4 * np.sum(utterance.samples**2)


def test_enhance_errors(utterance):
    m = build(ModelConfig(**SMALL, use_visual=False))
    with pytest.raises(DataError):
        enhance(m, utterance.with_samples(utterance.samples[:100]))


# -------------------------------------------------------------------------- IRM


def test_irm_closed_forms(rng):
    c = rng.uniform(0.1, 1, (5, 6))
    np.testing.assert_allclose(ideal_ratio_mask(c, np.zeros_like(c)), 1.0, atol=1e-9)
    np.testing.assert_allclose(ideal_ratio_mask(c, c), 1 / np.sqrt(2), atol=1e-9)
    with pytest.raises(ShapeError):
        ideal_ratio_mask(c, c[:4])


@given(st.integers(0, 10_000))
def test_irm_range(seed):
    r = np.random.default_rng(seed)
    m = ideal_ratio_mask(r.uniform(0, 1, (4, 4)) * r.integers(0, 2, (4, 4)), r.uniform(0, 1, (4, 4)))
    assert np.all((m >= 0) & (m <= 1))


# ------------------------------------------------------------------ checkpoints


def test_checkpoint_round_trip(tmp_path, rng, small_corpus):
    examples = load_examples(small_corpus, "train")[:2]
    cfg = ModelConfig(**SMALL, visual_in=examples[0].visual.shape[1])
    result = train(build(cfg), examples, examples, TrainConfig(epochs=1, loss="mse"))
    save_checkpoint(result.last, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.config == result.last.config and back.epoch == 1
    assert back.extra == result.last.extra
    noisy, vis = mags(rng, 33), rng.standard_normal((33, cfg.visual_in))
    np.testing.assert_array_equal(forward(result.last.model(), noisy, vis).values,
                                  forward(back.model(), noisy, vis).values)
    for k in result.last.optimizer["m"]:
        np.testing.assert_array_equal(back.optimizer["m"][k], result.last.optimizer["m"][k])


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(DataError):
        load_checkpoint(p)


def test_resume_is_bit_identical(tmp_path, small_corpus):
    tr = load_examples(small_corpus, "train")[:3]
    va = load_examples(small_corpus, "val")[:1]
    cfg = ModelConfig(**SMALL, visual_in=tr[0].visual.shape[1])
    tcfg = TrainConfig(loss="stoi", epochs=2, seed=3)
    full = train(build(cfg), tr, va, tcfg)
    half = train(build(cfg), tr, va, TrainConfig(loss="stoi", epochs=1, seed=3))
    save_checkpoint(half.last, tmp_path / "half.ckpt")
    ck = load_checkpoint(tmp_path / "half.ckpt")
    resumed = train(ck.model(), tr, va, tcfg, resume=ck)
    assert resumed.history == full.history
    for k, v in full.last.params.items():
        np.testing.assert_array_equal(resumed.last.params[k], v)


def test_training_is_deterministic(small_corpus):
    tr = load_examples(small_corpus, "train")[:2]
    cfg = ModelConfig(**SMALL, visual_in=tr[0].visual.shape[1])
    runs = [train(build(cfg), tr, tr, TrainConfig(loss="mae", epochs=2)).history for _ in range(2)]
    assert runs[0] == runs[1]


def test_training_preconditions(small_corpus):
    tr = load_examples(small_corpus, "train")[:1]
    cfg = ModelConfig(**SMALL, visual_in=tr[0].visual.shape[1])
    with pytest.raises(DataError):
        train(build(cfg), [], tr, TrainConfig())
    short = tr[0]
    short = type(short)(**{**short.__dict__, "clean_mag": short.clean_mag[:, :10]})
    with pytest.raises(DataError, match=short.utterance_id):
        train(build(cfg), [short], tr, TrainConfig(loss="stoi"))
    assert LossKind("stoi").min_frames == 30
