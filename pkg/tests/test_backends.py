import sys

import numpy as np
import pytest

from neurons.backends import (ENV_T2V, ClassifierStub, FrozenEncoderStub,
                              HashWordEmbedder, LatentCoderStub,
                              LexiconPosTagger, T2VStub, UnclipStub,
                              orthonormal_columns, resolve_t2v_backend,
                              stem_word)
from neurons.config import config_from_dict
from neurons.errors import BackendError, ShapeError
from neurons.rng import numpy_stream


# shared linear-algebra helpers ------------------------------------------------

def test_orthonormal_columns_are_orthonormal():
    rng = numpy_stream(7, "ortho")
    q = orthonormal_columns(rng, 12, 5)
    assert q.shape == (12, 5)
    assert np.allclose(q.T @ q, np.eye(5), atol=1e-12)


def test_orthonormal_columns_deterministic():
    a = orthonormal_columns(numpy_stream(7, "ortho"), 6, 3)
    b = orthonormal_columns(numpy_stream(7, "ortho"), 6, 3)
    assert np.array_equal(a, b)
    c = orthonormal_columns(numpy_stream(8, "ortho"), 6, 3)
    assert not np.array_equal(a, c)


def test_orthonormal_columns_rejects_wide():
    with pytest.raises(ValueError):
        orthonormal_columns(numpy_stream(7, "ortho"), 3, 6)


# frozen encoder -----------------------------------------------------------------

def _encoder(seed=5, height=16, width=16):
    return FrozenEncoderStub(tokens=4, channels=24, text_tokens=4,
                             height=height, width=width, seed=seed, vocab_size=128)


def test_frame_embed_shape_and_unit_norm():
    enc = _encoder()
    rng = numpy_stream(9, "frames")
    frame = rng.random((3, 16, 16))
    e = enc.frame_embed(frame)
    assert e.shape == (4, 24)
    assert e.dtype == np.float32
    assert np.allclose(np.linalg.norm(e, axis=-1), 1.0, atol=1e-5)


def test_video_embed_stacks_frames():
    enc = _encoder()
    rng = numpy_stream(10, "frames")
    frames = rng.random((3, 3, 16, 16))
    ev = enc.video_embed(frames)
    assert ev.shape == (3, 4, 24)
    for i in range(3):
        assert np.array_equal(ev[i], enc.frame_embed(frames[i]))


def test_encoder_is_pure_and_seeded():
    rng = numpy_stream(11, "frames")
    frame = rng.random((3, 16, 16))
    assert np.array_equal(_encoder(seed=5).frame_embed(frame),
                          _encoder(seed=5).frame_embed(frame))
    assert not np.array_equal(_encoder(seed=5).frame_embed(frame),
                              _encoder(seed=6).frame_embed(frame))


def test_text_embed_shape_and_padding():
    enc = _encoder()
    e = enc.text_embed("a red square")
    assert e.shape == (4, 24)
    assert np.allclose(np.linalg.norm(e, axis=-1), 1.0, atol=1e-5)
    # only the first text_tokens words matter
    long = enc.text_embed("a red square over blue water at noon")
    short = enc.text_embed("a red square over")
    assert np.array_equal(long, short)


def test_text_embed_rejects_empty():
    enc = _encoder()
    with pytest.raises(ValueError):
        enc.text_embed("   ")


def test_encoder_shape_validation():
    enc = _encoder()
    with pytest.raises(ShapeError):
        enc.frame_embed(np.zeros((3, 8, 16)))
    with pytest.raises(ShapeError):
        enc.video_embed(np.zeros((3, 16, 16)))
    with pytest.raises(ShapeError):
        FrozenEncoderStub(tokens=5, channels=8, text_tokens=2, height=16, width=16, seed=0)
    # canvas not divisible into the token grid
    bad = _encoder(height=10, width=10)
    with pytest.raises(ShapeError):
        bad.frame_embed(np.zeros((3, 10, 10)))


def test_encoder_from_config(tiny_config):
    enc = FrozenEncoderStub.from_config(tiny_config)
    frame = np.zeros((3, tiny_config.data.height, tiny_config.data.width))
    e = enc.frame_embed(frame)
    assert e.shape == (tiny_config.model.tokens, tiny_config.model.channels)
    t = enc.text_embed("a cat")
    assert t.shape == (tiny_config.model.text_tokens, tiny_config.model.channels)


# latent coder --------------------------------------------------------------------

def test_latent_coder_shapes():
    coder = LatentCoderStub(latent_channels=4, seed=3)
    video = np.zeros((2, 3, 16, 16), dtype=np.float32)
    z = coder.encode(video)
    assert z.shape == (2, 4, 2, 2)
    out = coder.decode(z)
    assert out.shape == (2, 3, 16, 16)
    assert out.dtype == np.float32


def test_latent_coder_roundtrip_on_blockwise_video():
    # constant 8x8 blocks survive the pool exactly; the channel mix has
    # orthonormal columns so its pseudo-inverse is an exact left inverse
    coder = LatentCoderStub(latent_channels=4, seed=3)
    rng = numpy_stream(12, "latent")
    coarse = rng.random((2, 3, 2, 2))
    video = coarse.repeat(8, axis=2).repeat(8, axis=3)
    back = coder.decode(coder.encode(video))
    assert np.allclose(back, video, atol=1e-6)


def test_latent_coder_output_clipped():
    coder = LatentCoderStub(latent_channels=3, seed=3)
    out = coder.decode(np.full((1, 3, 2, 2), 50.0, dtype=np.float32))
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_latent_coder_validation():
    with pytest.raises(ValueError):
        LatentCoderStub(latent_channels=2, seed=0)
    coder = LatentCoderStub(latent_channels=4, seed=0)
    with pytest.raises(ShapeError):
        coder.encode(np.zeros((2, 4, 16, 16)))
    with pytest.raises(ShapeError):
        coder.decode(np.zeros((2, 3, 2, 2)))  # channel axis must be latent_channels


# keyframe-to-control generator -----------------------------------------------------

def test_unclip_constant_image_is_fixed_point():
    stub = UnclipStub()
    frame = np.full((3, 8, 8), 0.25)
    out = stub.generate(frame)
    assert out.shape == (8, 8, 3)
    assert np.allclose(out, 0.25, atol=1e-7)


def test_unclip_box_blur_hand_value():
    stub = UnclipStub()
    frame = np.zeros((3, 7, 7))
    frame[:, 3, 3] = 0.9
    out = stub.generate(frame)
    inner = out[2:5, 2:5, 0]
    assert np.allclose(inner, 0.1, atol=1e-7)
    assert out[0, 0, 0] == 0.0


def test_unclip_shape_validation():
    with pytest.raises(ShapeError):
        UnclipStub().generate(np.zeros((8, 8, 3)))


# text-to-video generator -------------------------------------------------------------

def _t2v_inputs(f=4, h=8, w=8):
    rng = numpy_stream(13, "t2v")
    return rng.random((h, w, 3)), rng.random((f, 3, h, w))


def test_t2v_shape_range_and_determinism():
    control, blurry = _t2v_inputs()
    stub = T2VStub(control_blend=0.3, noise_scale=0.02)
    a = stub.generate("a red square", control, blurry, num_frames=9, seed=21)
    b = stub.generate("a red square", control, blurry, num_frames=9, seed=21)
    assert a.shape == (9, 3, 8, 8)
    assert a.dtype == np.float32
    assert a.min() >= 0.0 and a.max() <= 1.0
    assert np.array_equal(a, b)


def test_t2v_noise_keyed_on_prompt_and_seed():
    control, blurry = _t2v_inputs()
    stub = T2VStub(control_blend=0.3, noise_scale=0.02)
    base = stub.generate("a red square", control, blurry, num_frames=9, seed=21)
    other_prompt = stub.generate("a blue disk", control, blurry, num_frames=9, seed=21)
    other_seed = stub.generate("a red square", control, blurry, num_frames=9, seed=22)
    assert not np.array_equal(base, other_prompt)
    assert not np.array_equal(base, other_seed)


def test_t2v_pure_control_blend():
    control, blurry = _t2v_inputs()
    stub = T2VStub(control_blend=1.0, noise_scale=0.0)
    out = stub.generate("x", control, blurry, num_frames=4, seed=0)
    want = control.transpose(2, 0, 1)
    for frame in out:
        assert np.allclose(frame, want, atol=1e-6)


def test_t2v_zero_blend_is_resampled_video():
    from neurons.aggregator import interpolate_fps

    control, blurry = _t2v_inputs()
    stub = T2VStub(control_blend=0.0, noise_scale=0.0)
    out = stub.generate("x", control, blurry, num_frames=9, seed=0)
    want = np.clip(interpolate_fps(blurry, num_frames=9), 0.0, 1.0)
    assert np.allclose(out, want, atol=1e-6)


def test_t2v_validation():
    control, blurry = _t2v_inputs()
    stub = T2VStub()
    with pytest.raises(BackendError):
        stub.generate("", control, blurry, 4, 0)
    with pytest.raises(ShapeError):
        stub.generate("x", control.transpose(2, 0, 1), blurry, 4, 0)
    with pytest.raises(ShapeError):
        stub.generate("x", control, blurry[:, :1], 4, 0)
    with pytest.raises(ValueError):
        T2VStub(control_blend=1.5)


# backend resolution -----------------------------------------------------------------

def test_resolve_stub_backend(tiny_config, monkeypatch):
    monkeypatch.delenv(ENV_T2V, raising=False)
    backend = resolve_t2v_backend("stub", tiny_config)
    assert isinstance(backend, T2VStub)
    assert backend.control_blend == tiny_config.infer.control_blend


def test_resolve_unknown_backend(tiny_config, monkeypatch):
    monkeypatch.delenv(ENV_T2V, raising=False)
    with pytest.raises(BackendError, match="unknown backend"):
        resolve_t2v_backend("nope", tiny_config)
    with pytest.raises(BackendError, match=ENV_T2V):
        resolve_t2v_backend("external", tiny_config)


def test_resolve_module_factory(tiny_config, tmp_path, monkeypatch):
    monkeypatch.delenv(ENV_T2V, raising=False)
    mod = tmp_path / "fake_t2v.py"
    mod.write_text(
        "class _B:\n"
        "    def __init__(self, tag):\n"
        "        self.tag = tag\n"
        "    def generate(self, *a, **k):\n"
        "        raise NotImplementedError\n"
        "def make(config):\n"
        "    return _B(config.seed)\n"
        "def broken(config):\n"
        "    return object()\n"
    )
    monkeypatch.syspath_prepend(str(tmp_path))
    sys.modules.pop("fake_t2v", None)
    backend = resolve_t2v_backend("fake_t2v:make", tiny_config)
    assert backend.tag == tiny_config.seed
    with pytest.raises(BackendError, match="lacks a generate"):
        resolve_t2v_backend("fake_t2v:broken", tiny_config)
    with pytest.raises(BackendError, match="cannot load"):
        resolve_t2v_backend("fake_t2v:missing", tiny_config)
    with pytest.raises(BackendError, match="cannot load"):
        resolve_t2v_backend("no_such_module:make", tiny_config)


def test_env_var_overrides_backend_name(tiny_config, monkeypatch):
    monkeypatch.setenv(ENV_T2V, "stub")
    backend = resolve_t2v_backend("nope", tiny_config)
    assert isinstance(backend, T2VStub)


# classifier ---------------------------------------------------------------------------

def test_classifier_probs_shape_and_simplex():
    clf = ClassifierStub(num_labels=10, seed=4)
    rng = numpy_stream(14, "clf")
    video = rng.random((4, 3, 16, 16))
    p = clf.class_probs(video)
    assert p.shape == (10,)
    assert np.all(p >= 0.0)
    assert p.sum() == pytest.approx(1.0, abs=1e-9)


def test_classifier_image_equals_single_frame_video():
    clf = ClassifierStub(num_labels=10, seed=4)
    rng = numpy_stream(15, "clf")
    frame = rng.random((3, 16, 16))
    assert np.allclose(clf.class_probs(frame), clf.class_probs(frame[None]), atol=1e-12)


def test_classifier_deterministic_across_instances():
    rng = numpy_stream(16, "clf")
    video = rng.random((2, 3, 16, 16))
    a = ClassifierStub(num_labels=5, seed=4).class_probs(video)
    b = ClassifierStub(num_labels=5, seed=4).class_probs(video)
    assert np.array_equal(a, b)


def test_classifier_shape_validation():
    clf = ClassifierStub(num_labels=5, seed=4)
    with pytest.raises(ShapeError):
        clf.class_probs(np.zeros((2, 4, 16, 16)))


# verb tooling -------------------------------------------------------------------------

@pytest.mark.parametrize("word,stem", [
    ("moves", "move"), ("moving", "move"), ("moved", "move"),
    ("sliding", "slide"), ("drifting", "drift"), ("resting", "rest"),
    ("rests", "rest"), ("flies", "fly"), ("hopped", "hop"),
    ("rolled", "roll"), ("boxes", "box"), ("glass", "glass"),
    ("cats", "cat"), ("run", "run"),
])
def test_stem_word_cases(word, stem):
    assert stem_word(word) == stem


def test_tagger_finds_caption_verbs():
    tagger = LexiconPosTagger()
    assert tagger.verbs("a red square moving right over sand") == ["moving"]
    assert tagger.verbs("the blue disk rests, then slides.") == ["rests", "slides"]
    assert tagger.verbs("green triangle near water") == []


def test_tagger_extra_stems():
    tagger = LexiconPosTagger(extra_stems=("wobble",))
    assert tagger.verbs("the cone wobbles slowly") == ["wobbles"]


def test_word_embedder_inflections_stay_close():
    emb = HashWordEmbedder(seed=0)
    v = emb.embed("moving")
    assert v.shape == (HashWordEmbedder.DIM,)
    assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-12)
    close = float(np.dot(emb.embed("moving"), emb.embed("moves")))
    far = float(np.dot(emb.embed("moving"), emb.embed("resting")))
    assert close > 0.8
    assert far < 0.5


def test_word_embedder_seeded():
    a = HashWordEmbedder(seed=0).embed("moving")
    b = HashWordEmbedder(seed=0).embed("moving")
    c = HashWordEmbedder(seed=1).embed("moving")
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
