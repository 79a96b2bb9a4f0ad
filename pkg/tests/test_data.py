from __future__ import annotations

import struct

import numpy as np
import pytest

from oracles import dense_miou
from trackselect.data import (
    Corpus,
    CorpusError,
    CorpusFormatError,
    decode_tensor_blob,
    decode_tracks,
    directory_digest,
    encode_tensor_blob,
    encode_tracks,
    load_corpus,
    save_corpus,
    validate,
)
from trackselect.masks import MaskTrack, TrackSet, track_miou
from trackselect.synth import SynthConfig, SynthError, generate_synthetic


@pytest.fixture(scope="module")
def tiny():
    cfg = SynthConfig(scenes=2, objects=5, frames=16, dim=8, text_dim=6, n_background=4)
    return generate_synthetic(cfg, seed=3)


def _check_predicate(pred, attrs, tid):
    """Attribute predicate evaluated from scratch on stored generator metadata."""
    a = attrs[tid]
    if pred["kind"] == "full":
        return a["color"] == pred["color"] and a["shape"] == pred["shape"] and a["motion"] == pred["motion"]
    if pred["kind"] == "motion":
        return a["motion"] == pred["motion"]
    same = [b for b in attrs.values() if b["color"] == pred["color"]]
    if a["color"] != pred["color"]:
        return False
    axis = "mean_x" if pred["extreme"] in ("leftmost", "rightmost") else "mean_y"
    pick = min if pred["extreme"] in ("leftmost", "topmost") else max
    return a[axis] == pick(b[axis] for b in same)


def test_roundtrip_bit_identical(tiny, tmp_path):
    save_corpus(tiny, tmp_path / "a")
    back = load_corpus(tmp_path / "a")
    save_corpus(back, tmp_path / "b")
    assert directory_digest(tmp_path / "a") == directory_digest(tmp_path / "b")
    for v, w in zip(tiny.videos, back.videos):
        assert v.tokens.values.tobytes() == w.tokens.values.tobytes()
        assert [t.frames for t in v.tracks] == [t.frames for t in w.tracks]
        assert v.attributes == w.attributes
        for e, f in zip(v.expressions, w.expressions):
            assert e.embedding.values.tobytes() == f.embedding.values.tobytes()
            assert e.gt_track.frames == f.gt_track.frames
            assert e.predicate == f.predicate


def test_corrupted_magic(tiny, tmp_path):
    root = save_corpus(tiny, tmp_path / "c")
    p = root / "videos" / tiny.videos[0].video_id / "tokens.bin"
    buf = bytearray(p.read_bytes())
    buf[:4] = b"XXXX"
    p.write_bytes(bytes(buf))
    with pytest.raises(CorpusFormatError) as err:
        load_corpus(root)
    assert err.value.offset == 0


def test_truncated_blob():
    buf = encode_tensor_blob(np.ones((2, 3, 4), np.float32))
    with pytest.raises(CorpusFormatError):
        decode_tensor_blob(buf[:-3])
    with pytest.raises(CorpusFormatError):
        decode_tensor_blob(buf[:10])


def test_blob_header_arithmetic():
    buf = encode_tensor_blob(np.zeros((3, 8, 16), np.float32))
    magic, version, n, t, d = struct.unpack_from("<4sIIII", buf)
    assert (magic, n, t, d) == (b"SOLA", 3, 8, 16)
    assert len(buf) - 20 == 3 * 8 * 16 * 4
    np.testing.assert_array_equal(decode_tensor_blob(buf), np.zeros((3, 8, 16)))


def test_track_codec_roundtrip():
    rng = np.random.default_rng(0)
    tracks = [MaskTrack.from_dense(rng.random((3, 5, 7)) < 0.4, f"t{i}") for i in range(4)]
    back = decode_tracks(encode_tracks(tracks), [t.track_id for t in tracks])
    assert [t.frames for t in back] == [t.frames for t in tracks]
    with pytest.raises(CorpusFormatError):
        decode_tracks(encode_tracks(tracks), ["only-one"])


def test_validate_clean_and_mismatch(tiny):
    assert validate(tiny) == []
    v = tiny.videos[0]
    bad = Corpus([type(v)(v.video_id, TrackSet(list(v.tracks)[:-1], v.video_id), v.tokens, [], v.track_kinds[:-1])])
    problems = validate(bad)
    assert len(problems) == 2  # N mismatch and track id order
    assert any("N=" in p for p in problems)


def test_validate_names_nan_track_and_frame(tiny):
    v = tiny.videos[0]
    vals = v.tokens.values.copy()
    vals[1, 5, 2] = np.nan
    broken = Corpus([type(v)(v.video_id, v.tracks, type(v.tokens)(vals, v.tokens.track_ids), [], v.track_kinds)])
    problems = validate(broken)
    assert len(problems) == 1
    assert v.tokens.track_ids[1] in problems[0] and "frame 5" in problems[0]


def test_load_rejects_invalid(tiny, tmp_path):
    v = tiny.videos[0]
    vals = v.tokens.values.copy()
    vals[0, 0, 0] = np.inf
    broken = Corpus([type(v)(v.video_id, v.tracks, type(v.tokens)(vals, v.tokens.track_ids), [], v.track_kinds)])
    save_corpus(broken, tmp_path / "bad")
    with pytest.raises(CorpusError):
        load_corpus(tmp_path / "bad")
    assert len(load_corpus(tmp_path / "bad", check=False).videos) == 1


def test_generation_deterministic(tmp_path):
    cfg = SynthConfig(scenes=2, objects=4, frames=16, dim=8, text_dim=4)
    save_corpus(generate_synthetic(cfg, 11), tmp_path / "x")
    save_corpus(generate_synthetic(cfg, 11), tmp_path / "y")
    save_corpus(generate_synthetic(cfg, 12), tmp_path / "z")
    assert directory_digest(tmp_path / "x") == directory_digest(tmp_path / "y")
    assert directory_digest(tmp_path / "x") != directory_digest(tmp_path / "z")


@pytest.mark.parametrize("templates", [("full", "motion"), ("relational",)])
def test_gt_is_union_of_satisfying_tracks(templates):
    cfg = SynthConfig(scenes=6, objects=8, frames=16, dim=8, text_dim=4, templates=templates, max_targets=3)
    corpus = generate_synthetic(cfg, 5)
    for v in corpus.videos:
        assert sum(k == "object" for k in v.track_kinds) == cfg.objects
        assert len(v.attributes) == cfg.objects
        by_id = {t.track_id: t for t in v.tracks}
        for e in v.expressions:
            match = [tid for tid in v.attributes if _check_predicate(e.predicate, v.attributes, tid)]
            assert sorted(match) == sorted(e.target_ids)
            union = np.logical_or.reduce([by_id[t].to_dense() for t in match])
            np.testing.assert_array_equal(e.gt_track.to_dense(), union)


def test_generator_separation():
    corpus = generate_synthetic(SynthConfig(scenes=4, dim=8, text_dim=4, max_targets=2), 1)
    for v in corpus.videos:
        for e in v.expressions:
            gt = e.gt_track.to_dense()
            for tr in v.tracks:
                m = dense_miou(tr.to_dense(), gt)
                assert m == pytest.approx(track_miou(tr, e.gt_track), abs=1e-12)
                if tr.track_id in e.target_ids:
                    own = dense_miou(tr.to_dense(), tr.to_dense() & gt)
                    assert own >= 0.99
                else:
                    assert m < 0.5


def test_synth_config_errors():
    for bad in (dict(scenes=0), dict(objects=3), dict(frames=40), dict(size=80), dict(templates=("nope",))):
        with pytest.raises(ValueError):
            SynthConfig(**bad).check()


def test_unsatisfiable_generation():
    # four distinct clear extremes among four same-coloured objects almost never occur
    cfg = SynthConfig(scenes=1, objects=4, frames=16, dim=4, text_dim=4, templates=("relational",),
                      colors=1, expressions_per_scene=4, max_retries=3)
    with pytest.raises(SynthError):
        generate_synthetic(cfg, 0)
