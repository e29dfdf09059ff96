import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cdamd.errors import DimensionError, FormatError, TruncatedFileError, ValidationError
from cdamd.motion import (
    MAGIC, CorpusSpec, MotionSequence, MotionStats, compute_stats, denormalize, generate_corpus, load_motion,
    mirror, normalize, read_corpus, save_motion, split_corpus, write_corpus,
)

finite = st.floats(-10, 10, allow_nan=False, width=32)
coords_st = st.tuples(st.integers(1, 12), st.integers(2, 8)).flatmap(
    lambda s: arrays(np.float32, (s[0], s[1], 3), elements=finite))


def motion(rng, T=10, J=8):
    return MotionSequence(rng.standard_normal((T, J, 3)).astype(np.float32))


class TestMotionSequence:
    @pytest.mark.parametrize("shape", [(0, 8, 3), (5, 1, 3), (5, 8, 2), (5, 8)])
    def test_rejects_bad_shapes(self, shape):
        with pytest.raises((ValidationError, DimensionError)):
            MotionSequence(np.zeros(shape))

    def test_rejects_non_finite(self):
        c = np.zeros((3, 4, 3))
        c[1, 2, 0] = np.nan
        with pytest.raises(ValidationError):
            MotionSequence(c)

    def test_rejects_bad_fps(self):
        with pytest.raises(ValidationError):
            MotionSequence(np.zeros((3, 4, 3)), fps=0)


class TestNormalization:
    def test_mean_maps_to_zero(self, rng):
        mean = rng.standard_normal((8, 3))
        m = MotionSequence(np.broadcast_to(mean, (4, 8, 3)))
        assert np.allclose(normalize(m, MotionStats(mean, np.ones((8, 3)))).coords, 0)

    def test_spot_value(self):
        m = MotionSequence(np.full((2, 2, 3), 2.0))
        s = MotionStats(np.ones((2, 3)), np.full((2, 3), 0.5))
        assert np.all(normalize(m, s).coords == 2.0)
        assert np.all(denormalize(m, s).coords == 2.0)

    def test_denormalize_zeros(self):
        s = MotionStats(np.ones((2, 3)), np.full((2, 3), 2.0))
        assert np.all(denormalize(MotionSequence(np.zeros((3, 2, 3))), s).coords == 1.0)

    @settings(max_examples=50, deadline=None)
    @given(coords_st)
    def test_round_trip(self, coords):
        m = MotionSequence(coords)
        s = compute_stats([m])
        assert np.allclose(denormalize(normalize(m, s), s).coords, coords, atol=1e-6 * max(1, np.abs(coords).max()))

    def test_std_floor(self):
        s = MotionStats(np.zeros((2, 3)), np.zeros((2, 3)))
        assert np.all(s.std == np.float32(1e-6))

    def test_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            normalize(motion(rng, J=8), MotionStats(np.zeros((4, 3)), np.ones((4, 3))))


class TestMirror:
    @settings(max_examples=50, deadline=None)
    @given(coords_st.filter(lambda c: c.shape[1] >= 7))
    def test_involution(self, coords):
        m = MotionSequence(coords)
        assert np.array_equal(mirror(mirror(m)).coords, m.coords)

    def test_unpaired_joint_negates_x(self):
        c = np.zeros((1, 8, 3), np.float32)
        c[0, 0] = (1, 2, 3)
        assert mirror(MotionSequence(c)).coords[0, 0].tolist() == [-1, 2, 3]

    def test_pair_swaps_slots(self, rng):
        m = motion(rng)
        out = mirror(m, ((3, 5),))
        assert np.array_equal(out.coords[:, 5, 1:], m.coords[:, 3, 1:])
        assert np.array_equal(out.coords[:, 5, 0], -m.coords[:, 3, 0])

    def test_overlapping_pairs_rejected(self, rng):
        with pytest.raises(ValidationError):
            mirror(motion(rng), ((1, 2), (2, 3)))


class TestCorpus:
    def test_deterministic(self):
        spec = CorpusSpec(class_count=3, sequences_per_class=4)
        a, b = generate_corpus(spec), generate_corpus(spec)
        assert all(x.motion.coords.tobytes() == y.motion.coords.tobytes() and x.text == y.text for x, y in zip(a, b))

    def test_counts(self):
        assert len(generate_corpus(CorpusSpec(class_count=2, sequences_per_class=3))) == 6

    def test_classes_are_separated(self):
        spec = CorpusSpec(class_count=6, sequences_per_class=5)
        items = generate_corpus(spec)
        T = spec.length_range[0]
        by_class = {}
        for it in items:
            by_class.setdefault(it.class_id, []).append(it.motion.coords[:T])
        for a, b in itertools.combinations(sorted(by_class), 2):
            d = np.mean([np.linalg.norm(x - y, axis=-1).mean() for x in by_class[a] for y in by_class[b]])
            assert d > 10 * spec.noise_scale, (a, b, d)

    def test_per_sample_stream_independent_of_count(self):
        small = generate_corpus(CorpusSpec(class_count=2, sequences_per_class=3))
        big = generate_corpus(CorpusSpec(class_count=3, sequences_per_class=3))
        assert all(np.array_equal(a.motion.coords, b.motion.coords) for a, b in zip(small, big))

    @pytest.mark.parametrize("kw", [{"class_count": 1}, {"length_range": (4, 10)}, {"noise_scale": -1.0}])
    def test_invalid_spec(self, kw):
        with pytest.raises(ValidationError):
            CorpusSpec(**kw)

    def test_split_is_stratified(self):
        items = generate_corpus(CorpusSpec(class_count=4, sequences_per_class=10))
        train, test = split_corpus(items, 0.2, seed=3)
        assert len(test) == 8 and len(train) == 32
        assert sorted(it.class_id for it in test) == [0, 0, 1, 1, 2, 2, 3, 3]


class TestFiles:
    @settings(max_examples=25, deadline=None)
    @given(coords_st)
    def test_round_trip_bit_exact(self, tmp_path_factory, coords):
        path = tmp_path_factory.mktemp("m") / "x.cdm"
        m = MotionSequence(coords, fps=29.97)
        save_motion(m, path)
        back = load_motion(path)
        assert back.coords.tobytes() == m.coords.tobytes() and back.fps == pytest.approx(29.97)

    def test_header_layout(self, tmp_path, rng):
        save_motion(motion(rng, T=5, J=8), tmp_path / "a.cdm")
        raw = (tmp_path / "a.cdm").read_bytes()
        assert raw[:16] == MAGIC and raw[:8] == b"CDAMDMOT"
        assert np.frombuffer(raw[16:32], "<u4").tolist() == [1, 5, 8, 20000]
        assert len(raw) == 32 + 5 * 8 * 3 * 4

    def test_truncated_payload(self, tmp_path, rng):
        save_motion(motion(rng), tmp_path / "a.cdm")
        raw = (tmp_path / "a.cdm").read_bytes()
        (tmp_path / "b.cdm").write_bytes(raw[:-4])
        with pytest.raises(TruncatedFileError) as info:
            load_motion(tmp_path / "b.cdm")
        assert isinstance(info.value, OSError)

    def test_oversized_payload(self, tmp_path, rng):
        save_motion(motion(rng), tmp_path / "a.cdm")
        (tmp_path / "b.cdm").write_bytes((tmp_path / "a.cdm").read_bytes() + b"\0" * 12)
        with pytest.raises(FormatError):
            load_motion(tmp_path / "b.cdm")

    @pytest.mark.parametrize("content", [b"", b"CDAMD", b"NOTMAGIC".ljust(32, b"\0")])
    def test_malformed(self, tmp_path, content):
        (tmp_path / "c.cdm").write_bytes(content)
        with pytest.raises(FormatError):
            load_motion(tmp_path / "c.cdm")

    def test_corpus_manifest(self, tmp_path):
        items = generate_corpus(CorpusSpec(class_count=2, sequences_per_class=2))
        write_corpus(items, tmp_path)
        back = read_corpus(tmp_path)
        assert [(b.text, b.class_id) for b in back] == [(i.text, i.class_id) for i in items]
        assert all(np.array_equal(b.motion.coords, i.motion.coords) for b, i in zip(back, items))
        motion_, text, cid = back[0]
        assert text == items[0].text
