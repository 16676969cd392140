from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import HOP, frame_transcripts
from dialogue_flow import tokens as tk
from dialogue_flow.corpus import (
    Category,
    CorpusConfig,
    OracleCodebook,
    SimulationSpec,
    Utterance,
    build_corpus,
    decode_features,
    load_corpus,
    read_features,
    save_corpus,
    segment_dialogue,
    simulate_dialogue,
    synth_features,
    write_features,
)
from dialogue_flow.errors import DataError, InvalidSpec, InvalidWeights, UnknownTimbre
from dialogue_flow.streams import (
    DialogueTranscript,
    FrameGrid,
    Speaker,
    SpeakerStreamPair,
    TranscriptSegment,
    disentangle,
    overlap_frames,
)

CB = OracleCodebook.build()


def truth_frames(streams, voices):
    """Expected per-frame (token, voice) sets straight from the token streams."""
    out = []
    for f in range(len(streams)):
        pairs = [(int(streams.stream(s)[f]), v) for s, v in zip(Speaker, voices)
                 if tk.active_mask(streams.stream(s)[f:f + 1])[0]]
        out.append(tuple(sorted(pairs, key=lambda p: p[1])))
    return out


def frame_accuracy(decoding, truth):
    return np.mean([tuple(h) == t for h, t in zip(decoding.frames, truth)])


# ---- codebook


def test_codebook_separation():
    assert CB.min_pattern_distance() > 2 * CB.noise_tolerance
    assert CB.min_timbre_distance() > 2 * CB.noise_tolerance
    np.testing.assert_allclose(np.linalg.norm(CB.patterns, axis=1), 1.0)
    assert CB.max_timbre_cosine() < 1e-9
    assert (CB.gains > 0).all()


def test_codebook_is_seeded():
    a, b = OracleCodebook.build(seed=3), OracleCodebook.build(seed=3)
    assert np.array_equal(a.patterns, b.patterns) and np.array_equal(a.gains, b.gains)
    assert not np.array_equal(a.patterns, OracleCodebook.build(seed=4).patterns)


def test_crowded_codebook_rejected():
    p = np.eye(4)[[0, 0, 1]]
    with pytest.raises(InvalidSpec):
        OracleCodebook(p, np.eye(4)[:2], np.ones((2, 4)))
    with pytest.raises(InvalidSpec):
        OracleCodebook.build(d_features=4, n_voices=5)


# ---- synthesis


def test_silence_synthesizes_to_zero():
    s = SpeakerStreamPair.silent(FrameGrid(HOP, 9))
    assert (synth_features(s, (0, 1), CB) == 0).all()


def test_single_char_frame():
    c = tk.char_id("k")
    z1 = np.array([c])
    s = SpeakerStreamPair(z1, np.array([tk.SILENCE]), FrameGrid(HOP, 1))
    want = CB.timbres[2] + CB.gains[2] * CB.patterns[tk.char_index(c)]
    assert np.array_equal(synth_features(s, (2, 5), CB)[0], want)


def test_pad_sustain_decays():
    c = tk.char_id("a")
    z1 = np.array([c, tk.PAD, tk.PAD, tk.SILENCE])
    s = SpeakerStreamPair(z1, np.full(4, tk.SILENCE), FrameGrid(HOP, 4))
    x = synth_features(s, (0, 1), CB)
    shaped = CB.gains[0] * CB.patterns[tk.char_index(c)]
    np.testing.assert_allclose(x[1], CB.timbres[0] + 0.5 * 0.9 * shaped, atol=1e-15)
    np.testing.assert_allclose(x[2], CB.timbres[0] + 0.5 * 0.81 * shaped, atol=1e-15)
    assert (x[3] == 0).all()


def test_two_sources_add():
    a, b = tk.char_id("a"), tk.char_id("b")
    s = SpeakerStreamPair(np.array([a]), np.array([b]), FrameGrid(HOP, 1))
    x = synth_features(s, (1, 3), CB)[0]
    np.testing.assert_allclose(x, CB.contribution(a, 1) + CB.contribution(b, 3), atol=1e-15)
    dec = decode_features(x[None], CB)
    assert dec.frames[0] == ((a, 1), (b, 3))


def test_unknown_timbre():
    s = SpeakerStreamPair.silent(FrameGrid(HOP, 2))
    with pytest.raises(UnknownTimbre):
        synth_features(s, (0, CB.n_voices), CB)


# ---- decoding


def test_zero_features_decode_to_silence():
    dec = decode_features(np.zeros((20, CB.d_features)), CB)
    assert all(h == () for h in dec.frames)
    assert (dec.n_sources() == 0).all()


def test_decoder_rejects_wrong_dimension():
    with pytest.raises(DataError):
        decode_features(np.zeros((3, CB.d_features + 1)), CB)


@given(frame_transcripts(), st.lists(st.integers(0, 7), min_size=2, max_size=2, unique=True))
def test_decode_inverts_synth(t, voices):
    grid = FrameGrid.covering(t.total_duration_s, HOP)
    s = disentangle(t, grid)
    dec = decode_features(synth_features(s, voices, CB), CB)
    assert list(dec.frames) == truth_frames(s, voices)


def random_overlapping_transcript(rng, n_frames):
    segs = []
    for speaker in Speaker:
        pos = int(rng.integers(0, 30))
        while True:
            text = "".join(rng.choice(list(tk.CHARSET[:60]), size=int(rng.integers(3, 15)))).strip() or "a"
            length = len(text) + int(rng.integers(0, 40))
            if pos + length > n_frames:
                break
            segs.append(TranscriptSegment(speaker, pos * HOP, (pos + length) * HOP, text))
            pos += length + int(rng.integers(1, 40))
    return DialogueTranscript.build(segs, n_frames * HOP)


def test_decoder_tolerates_noise():
    # 5 seeds of a 1000-frame stream with heavy overlap; noise sd 0.05 per dimension
    rng = np.random.default_rng(7)
    accs = []
    for _ in range(5):
        t = random_overlapping_transcript(rng, 1000)
        s = disentangle(t, FrameGrid(HOP, 1000))
        assert overlap_frames(s) > 100
        voices = tuple(int(v) for v in rng.choice(8, 2, replace=False))
        x = synth_features(s, voices, CB) + rng.normal(0, 0.05, (1000, CB.d_features))
        accs.append(frame_accuracy(decode_features(x, CB), truth_frames(s, voices)))
    assert min(accs) >= 0.99


# ---- dialogue simulation


def pool(durations_a, durations_b, texts=("hello", "yes")):
    us = [Utterance(0, texts[0], d) for d in durations_a]
    us += [Utterance(1, texts[1], d) for d in durations_b]
    return tuple(us)


def turns(t):
    return sorted(t.segments, key=lambda g: (g.start_s, g.speaker))


def test_abutting_turns():
    t, _ = simulate_dialogue(SimulationSpec(pool([1.0, 1.0], [1.0]), n_turns=3))
    a, b, c = turns(t)
    assert a.end_s == pytest.approx(b.start_s) and b.end_s == pytest.approx(c.start_s)
    assert overlap_frames(disentangle(t, FrameGrid.covering(t.total_duration_s, HOP))) == 0


def test_full_overlap_with_equal_durations():
    t, _ = simulate_dialogue(SimulationSpec(pool([1.0], [1.0]), overlap_ratio=1.0, n_turns=2))
    a, b = t.segments
    assert (a.start_s, a.end_s) == (b.start_s, b.end_s)


def test_half_overlap_example():
    hop = 0.01
    t, (va, vb) = simulate_dialogue(SimulationSpec(pool([2.0], [1.0]), overlap_ratio=0.5, n_turns=2, hop_s=hop))
    first, second = turns(t)
    assert first.duration_s == pytest.approx(2.0 if va == 0 else 1.0)
    # overlap = 0.5 * min(2, 1)
    assert first.end_s - second.start_s == pytest.approx(0.5)


def test_silence_gap_regime():
    t, _ = simulate_dialogue(SimulationSpec(pool([1.0], [1.0]), silence_gap_s=0.3, n_turns=2, hop_s=0.01))
    a, b = turns(t)
    assert b.start_s - a.end_s == pytest.approx(0.3)


def test_simulation_errors():
    with pytest.raises(InvalidSpec):
        simulate_dialogue(SimulationSpec(pool([1.0], [1.0]), overlap_ratio=0.2, silence_gap_s=0.1))
    with pytest.raises(InvalidSpec):
        simulate_dialogue(SimulationSpec(tuple(Utterance(0, "a", 1.0) for _ in range(3))))
    with pytest.raises(InvalidSpec):
        simulate_dialogue(SimulationSpec(pool([1.0], [1.0]), overlap_ratio=1.5))


@given(st.floats(0, 1), st.lists(st.floats(0.3, 3.0), min_size=2, max_size=6), st.integers(0, 2**31))
def test_overlap_fidelity(ratio, durs, seed):
    spec = SimulationSpec(pool(durs[::2], durs[1::2]), overlap_ratio=ratio, seed=seed)
    t, _ = simulate_dialogue(spec)
    grid = FrameGrid.covering(t.total_duration_s, HOP)
    segs = turns(t)
    for prev, cur in zip(segs, segs[1:]):
        if prev.speaker == cur.speaker:
            continue
        want = ratio * min(prev.duration_s, cur.duration_s)
        got = max(0.0, prev.end_s - cur.start_s)
        # the same-speaker clamp may only shrink an overlap
        assert got <= want + HOP + 1e-9
    if len(segs) == 2:
        a, b = segs
        want = ratio * min(a.duration_s, b.duration_s)
        got = overlap_frames(disentangle(t, grid)) * HOP
        assert abs(got - want) <= HOP + 1e-9


def test_simulation_is_pure():
    spec = SimulationSpec(pool([1.0, 0.5], [0.7, 0.4]), overlap_ratio=0.4, seed=11)
    assert simulate_dialogue(spec) == simulate_dialogue(spec)


# ---- segmentation


def test_short_transcript_is_one_clip():
    t = DialogueTranscript.build([TranscriptSegment("spk1", 0.0, 1.0, "hi"), TranscriptSegment("spk2", 1.5, 2.0, "yo")])
    assert segment_dialogue(t, 30.0) == [t]


def test_two_abutting_monologue_turns():
    t = DialogueTranscript.build([TranscriptSegment("spk1", 0.0, 20.0, "first"), TranscriptSegment("spk2", 20.0, 40.0, "second")])
    clips = segment_dialogue(t, 30.0)
    assert [c.total_duration_s for c in clips] == [20.0, 20.0]
    assert clips[1].segments[0] == TranscriptSegment(Speaker.SPK2, 0.0, 20.0, "second")


def test_overlap_defers_the_cut():
    t = DialogueTranscript.build([
        TranscriptSegment("spk1", 0.0, 10.0, "a"),
        TranscriptSegment("spk2", 9.0, 14.0, "b"),
        TranscriptSegment("spk1", 14.0, 16.0, "c"),
    ])
    clips = segment_dialogue(t, 12.0)
    assert [c.total_duration_s for c in clips] == [14.0, 2.0]


@given(frame_transcripts(max_segments=5), st.floats(0.05, 1.0))
def test_segmentation_conserves_segments(t, max_clip):
    clips = segment_dialogue(t, max_clip)
    got = Counter((g.speaker, g.text) for c in clips for g in c.segments)
    assert got == Counter((g.speaker, g.text) for g in t.segments)
    for c in clips:
        assert min(g.start_s for g in c.segments) >= 0
        assert c.total_duration_s <= max_clip + 1e-9 or len(c.segments) >= 1


# ---- corpus


def test_monologue_stage_is_single_speaker():
    for s in build_corpus("monologue", 20, seed=0):
        assert len(s.transcript.speakers) == 1 and s.category is Category.MONOLOGUE


def test_weights_one_zero_zero():
    corpus = build_corpus("dialogue_mix", 20, seed=0, weights=(1, 0, 0))
    assert all(s.category is Category.SEQUENTIAL for s in corpus)
    assert all(len(s.transcript.speakers) == 2 for s in corpus)


def test_category_counts_follow_weights():
    # category draws alone; sample generation is not needed for the count
    w = np.array([0.5, 0.3, 0.2])
    n = 1000
    corpus = build_corpus("dialogue_mix", n, seed=5, cfg=CorpusConfig(text_words=(1, 1), max_turns=2))
    counts = Counter(s.category for s in corpus)
    for cat, p in zip(Category, w):
        assert abs(counts[cat] - n * p) <= 3 * np.sqrt(n * p * (1 - p))


def test_invalid_weights():
    with pytest.raises(InvalidWeights):
        build_corpus("dialogue_mix", 3, 0, weights=(0.5, 0.5, 0.5))
    with pytest.raises(InvalidWeights):
        build_corpus("dialogue_mix", 3, 0, weights=(1.2, -0.2, 0))


def test_corpus_is_reproducible():
    a, b = build_corpus("dialogue_mix", 12, seed=3), build_corpus("dialogue_mix", 12, seed=3)
    for x, y in zip(a, b):
        assert x.transcript == y.transcript and x.voices == y.voices
        assert np.array_equal(x.features, y.features)
    c = build_corpus("dialogue_mix", 12, seed=4)
    assert any(x.transcript != z.transcript for x, z in zip(a, c))


def test_features_match_synthesis():
    for s in build_corpus("dialogue_mix", 10, seed=1):
        assert np.array_equal(s.features, synth_features(s.streams(), s.voices, CB))


def test_corpus_disk_round_trip(tmp_path):
    corpus = build_corpus("dialogue_mix", 4, seed=2)
    names = save_corpus(corpus, tmp_path)
    assert names == [f"sample_{i:06d}" for i in range(4)]
    assert {p.name for p in (tmp_path / names[0]).iterdir()} == {"transcript.json", "features.bin", "meta.json"}
    back = load_corpus(tmp_path)
    for x, y in zip(corpus, back):
        assert x.transcript == y.transcript and x.voices == y.voices and x.category == y.category
        np.testing.assert_array_equal(y.features, x.features.astype(np.float32))


def test_feature_file_layout(tmp_path):
    x = np.arange(6, dtype=np.float64).reshape(3, 2)
    path = tmp_path / "f.bin"
    write_features(path, x)
    raw = path.read_bytes()
    assert raw[:4] == b"DFFT" and int.from_bytes(raw[4:8], "little") == 3 and int.from_bytes(raw[8:12], "little") == 2
    assert len(raw) == 12 + 6 * 4
    assert np.array_equal(read_features(path), x)
    path.write_bytes(raw[:-4])
    with pytest.raises(DataError):
        read_features(path)
