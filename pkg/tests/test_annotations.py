import numpy as np
import pytest

from neurons.annotations import (MockAnnotationClient, TaskAnnotations,
                                 build_annotations, frame_fingerprint)
from neurons.errors import ShapeError
from neurons.taxonomy import NUM_CONCEPTS, default_taxonomy, encode_concepts
from neurons.text import CaptionTokenizer

TAX = default_taxonomy()
TOK = CaptionTokenizer.default()


def _masks(f=4, h=8, w=8):
    return np.zeros((f, h, w), dtype=np.uint8)


def _concepts(*names):
    return encode_concepts(list(names), TAX)


def _annotations(**overrides):
    masks = _masks()
    masks[:, 2:4, 2:4] = 1
    fields = dict(key_object="animal", key_masks=masks,
                  concepts=_concepts("animal"), caption_text="a red animal",
                  caption_tokens=TOK.encode("a red animal"))
    fields.update(overrides)
    return TaskAnnotations(**fields)


def test_annotations_accept_valid_record():
    ann = _annotations()
    assert ann.key_masks.dtype == np.uint8
    assert ann.concepts.dtype == np.float32
    ann.validate_against(TAX, TOK)


def test_masks_must_be_3d():
    with pytest.raises(ShapeError):
        _annotations(key_masks=np.zeros((8, 8), dtype=np.uint8))


def test_masks_must_be_binary():
    bad = _masks()
    bad[0, 0, 0] = 2
    with pytest.raises(ValueError):
        _annotations(key_masks=bad)


def test_concepts_shape_checked():
    with pytest.raises(ShapeError):
        _annotations(concepts=np.zeros(NUM_CONCEPTS - 1, dtype=np.float32))


def test_concepts_must_be_multi_hot():
    soft = np.zeros(NUM_CONCEPTS, dtype=np.float32)
    soft[0] = 0.5
    with pytest.raises(ValueError):
        _annotations(concepts=soft)


def test_validate_against_requires_key_bit():
    ann = _annotations(concepts=_concepts("food"))
    with pytest.raises(ValueError):
        ann.validate_against(TAX, TOK)


def test_validate_against_requires_token_round_trip():
    ann = _annotations(caption_tokens=TOK.encode("a blue animal"))
    with pytest.raises(ValueError):
        ann.validate_against(TAX, TOK)


def test_fingerprint_stable_across_quantization():
    rng = np.random.default_rng(0)
    frame = rng.random((3, 8, 8)).astype(np.float32)
    quantized = np.round(frame * 255.0).astype(np.uint8)
    assert frame_fingerprint(frame) == frame_fingerprint(quantized)


def test_fingerprint_sensitive_to_content():
    frame = np.zeros((3, 8, 8), dtype=np.float32)
    other = frame.copy()
    other[0, 0, 0] = 1.0
    assert frame_fingerprint(frame) != frame_fingerprint(other)


def test_mock_client_round_trip():
    client = MockAnnotationClient()
    frame = np.full((3, 8, 8), 0.5, dtype=np.float32)
    mask = np.zeros((8, 8), dtype=np.uint8)
    mask[1:3, 1:3] = 255  # register_frame binarizes whatever it is given
    client.register_frame(frame, "a cap", [("a", "animal")], {"a": mask})
    assert client.caption(frame) == "a cap"
    assert client.detect_objects(frame) == [("a", "animal")]
    got = client.segment(frame, "a")
    assert set(np.unique(got)) == {0, 1}
    assert got.sum() == 4


def test_mock_client_unregistered_frame():
    client = MockAnnotationClient()
    with pytest.raises(KeyError):
        client.caption(np.zeros((3, 8, 8), dtype=np.float32))


def test_mock_client_absent_instance_is_empty():
    client = MockAnnotationClient()
    frame = np.zeros((3, 8, 8), dtype=np.float32)
    client.register_frame(frame, "cap", [("a", "animal")], {})
    got = client.segment(frame, "ghost")
    assert got.shape == (8, 8) and got.sum() == 0


# a four-frame clip with a moving priority object and a static distractor

def _register_clip(num_frames=4, h=8, w=8):
    client = MockAnnotationClient()
    frames = np.zeros((num_frames, 3, h, w), dtype=np.float32)
    a_masks = np.zeros((num_frames, h, w), dtype=np.uint8)
    b_masks = np.zeros((num_frames, h, w), dtype=np.uint8)
    for f in range(num_frames):
        frames[f, 0] = f / 10.0  # distinct fingerprints
        a_masks[f, 1:3, 1 + f:3 + f] = 1
        b_masks[f, 5:7, 5:7] = 1
        client.register_frame(frames[f], f"cap {f}", [("a", "animal"), ("b", "food")],
                              {"a": a_masks[f], "b": b_masks[f]})
    return client, frames, a_masks


def test_build_annotations_assembles_clip():
    client, frames, a_masks = _register_clip()
    ann = build_annotations(frames, client, TAX, TOK, clip_id="c0")
    assert ann.key_object == "animal"
    assert np.array_equal(ann.key_masks, a_masks)
    assert ann.caption_text == "cap 2"  # middle frame of four
    got = {TAX.names[i] for i in np.flatnonzero(ann.concepts)}
    assert got == {"animal", "food"}


def test_build_annotations_first_seen_order():
    client = MockAnnotationClient()
    frames = np.zeros((4, 3, 8, 8), dtype=np.float32)
    a_masks = np.zeros((4, 8, 8), dtype=np.uint8)
    b_masks = np.zeros((4, 8, 8), dtype=np.uint8)
    for f in range(4):
        frames[f, 1] = (f + 1) / 10.0
        a_masks[f, 1:3, 1 + f:3 + f] = 1
        b_masks[f, 5:7, 5:7] = 1
        objects = [("b", "food")] if f == 0 else [("b", "food"), ("a", "animal")]
        client.register_frame(frames[f], "cap", objects, {"a": a_masks[f], "b": b_masks[f]})
    ann = build_annotations(frames, client, TAX, TOK, clip_id="c1")
    # "a" joins at frame 1 but its full mask stack is still collected
    assert ann.key_object == "animal"
    assert np.array_equal(ann.key_masks, a_masks)


def test_build_annotations_frames_shape():
    client = MockAnnotationClient()
    with pytest.raises(ShapeError):
        build_annotations(np.zeros((4, 1, 8, 8), dtype=np.float32), client, TAX, TOK)
    with pytest.raises(ShapeError):
        build_annotations(np.zeros((3, 8, 8), dtype=np.float32), client, TAX, TOK)


def test_build_annotations_no_objects():
    client = MockAnnotationClient()
    frames = np.zeros((2, 3, 8, 8), dtype=np.float32)
    for f in range(2):
        frames[f, 2] = (f + 1) / 4.0
        client.register_frame(frames[f], "cap", [], {})
    with pytest.raises(ValueError, match="clip c2"):
        build_annotations(frames, client, TAX, TOK, clip_id="c2")


def test_build_annotations_wraps_client_failures():
    client = MockAnnotationClient()  # nothing registered -> KeyError inside
    frames = np.zeros((2, 3, 8, 8), dtype=np.float32)
    with pytest.raises(RuntimeError, match="clip c3"):
        build_annotations(frames, client, TAX, TOK, clip_id="c3")


def test_build_annotations_passes_value_errors_through():
    class Broken:
        def caption(self, frame):
            raise ValueError("bespoke failure")

        def detect_objects(self, frame):
            return []

        def segment(self, frame, name):
            return np.zeros((8, 8), dtype=np.uint8)

    frames = np.zeros((2, 3, 8, 8), dtype=np.float32)
    with pytest.raises(ValueError, match="bespoke failure"):
        build_annotations(frames, Broken(), TAX, TOK)
