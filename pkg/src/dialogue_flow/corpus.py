"""Synthetic feature oracle and dialogue corpus generation.

Real mel-spectrograms are replaced by a deterministic, invertible mapping
from (token, voice) pairs to feature frames:

* a character ``c`` spoken by voice ``s`` gives ``timbre[s] + gain[s] * pattern[c]``;
* a continuation frame ``k`` frames after the last character ``c`` gives
  ``timbre[s] + onset * decay**k * gain[s] * pattern[c]``;
* silence gives the zero vector, and simultaneous talkers add up.

The per-voice gain acts as a spectral envelope. Without it, two overlapping
talkers could be swapped without changing the sum, and overlap frames could
not be attributed to a speaker.
"""

import enum
import json
import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import tokens as tk
from .errors import DataError, InvalidSpec, InvalidWeights, UnknownTimbre
from .streams import (
    DEFAULT_HOP_S,
    DialogueTranscript,
    FrameGrid,
    Speaker,
    TranscriptSegment,
    disentangle,
    estimate_duration,
)

N_CHARS = len(tk.CHARSET)


@dataclass(frozen=True, eq=False)
class OracleCodebook:
    patterns: np.ndarray  # (n_chars, d) unit vectors
    timbres: np.ndarray  # (n_voices, d)
    gains: np.ndarray  # (n_voices, d), positive
    decay: float = 0.9
    pad_onset: float = 0.5
    noise_tolerance: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.min_pattern_distance() <= 2 * self.noise_tolerance:
            raise InvalidSpec("character patterns are not separated enough for the noise tolerance")
        if self.min_timbre_distance() <= 2 * self.noise_tolerance:
            raise InvalidSpec("timbres are not separated enough for the noise tolerance")

    @classmethod
    def build(cls, d_features=16, n_voices=8, seed=0, timbre_scale=1.0, gain_spread=0.4,
              decay=0.9, pad_onset=0.5, noise_tolerance=0.2):
        if n_voices > d_features:
            raise InvalidSpec("at most d_features voices fit in an orthonormal timbre basis")
        rng = np.random.default_rng(seed)
        patterns = _spread_on_sphere(rng.standard_normal((N_CHARS, d_features)))
        q, _ = np.linalg.qr(rng.standard_normal((d_features, d_features)))
        timbres = timbre_scale * q[:, :n_voices].T
        gains = np.exp(rng.uniform(-gain_spread, gain_spread, (n_voices, d_features)))
        return cls(patterns, timbres, gains, decay, pad_onset, noise_tolerance, seed)

    @property
    def d_features(self):
        return self.patterns.shape[1]

    @property
    def n_voices(self):
        return len(self.timbres)

    @property
    def max_pad_amplitude(self):
        return self.pad_onset * self.decay

    def min_pattern_distance(self):
        return _min_pairwise_distance(self.patterns)

    def min_timbre_distance(self):
        return _min_pairwise_distance(self.timbres)

    def max_timbre_cosine(self):
        t = self.timbres / np.linalg.norm(self.timbres, axis=1, keepdims=True)
        c = t @ t.T
        np.fill_diagonal(c, -1.0)
        return float(c.max())

    def char_vectors(self):
        """(n_voices, n_chars, d): every character in every voice."""
        return self.timbres[:, None, :] + self.gains[:, None, :] * self.patterns[None]

    def shaped_patterns(self):
        """(n_voices, n_chars, d): voice-shaped patterns without the timbre offset."""
        return self.gains[:, None, :] * self.patterns[None]

    def contribution(self, token, voice, pad_amplitude=0.0, last_char=None):
        if not 0 <= voice < self.n_voices:
            raise UnknownTimbre(f"voice {voice} is not in the codebook")
        if tk.is_char(token):
            return self.timbres[voice] + self.gains[voice] * self.patterns[tk.char_index(token)]
        if token == tk.PAD:
            out = self.timbres[voice].copy()
            if last_char is not None:
                out += pad_amplitude * self.gains[voice] * self.patterns[tk.char_index(last_char)]
            return out
        return np.zeros(self.d_features)

    def to_dict(self):
        return {
            "d_features": self.d_features,
            "n_voices": self.n_voices,
            "seed": self.seed,
            "decay": self.decay,
            "pad_onset": self.pad_onset,
            "noise_tolerance": self.noise_tolerance,
        }


def _min_pairwise_distance(x):
    d = np.linalg.norm(x[:, None, :] - x[None, :, :], axis=-1)
    np.fill_diagonal(d, np.inf)
    return float(d.min())


def _spread_on_sphere(x, iters=300, step=0.05):
    """Deterministic repulsion of unit vectors to enlarge their minimum distance."""
    x = x / np.linalg.norm(x, axis=1, keepdims=True)
    for _ in range(iters):
        diff = x[:, None, :] - x[None, :, :]
        dist2 = (diff**2).sum(-1) + np.eye(len(x))
        force = (diff / dist2[..., None] ** 2).sum(1)
        x = x + step * force / np.abs(force).max()
        x /= np.linalg.norm(x, axis=1, keepdims=True)
    return x


def synth_features(streams, speakers, codebook):
    """Oracle features for two token streams spoken by the given voices."""
    out = np.zeros((len(streams), codebook.d_features))
    for speaker, voice in zip(Speaker, speakers):
        if not 0 <= voice < codebook.n_voices:
            raise UnknownTimbre(f"voice {voice} is not in the codebook")
        last, k = None, 0
        for f, token in enumerate(streams.stream(speaker)):
            if tk.is_char(token):
                last, k = token, 0
                out[f] += codebook.contribution(token, voice)
            elif token == tk.PAD:
                k += 1
                amp = codebook.pad_onset * codebook.decay**k
                out[f] += codebook.contribution(token, voice, amp, last)
            else:
                last, k = None, 0
    return out


@dataclass(frozen=True, eq=False)
class Decoding:
    """Per-frame decoded sources.

    ``frames[f]`` is a tuple of ``(token, voice)`` pairs sorted by voice;
    the empty tuple means silence. ``token`` is a character id or ``tk.PAD``.
    """

    frames: list
    residual: np.ndarray

    def __len__(self):
        return len(self.frames)

    def n_sources(self):
        return np.array([len(h) for h in self.frames])

    def voice_activity(self, voice):
        return np.array([any(v == voice for _, v in h) for h in self.frames])

    def voices(self):
        return sorted({v for h in self.frames for _, v in h})

    def voice_tokens(self, voice):
        """Character tokens attributed to ``voice``, in frame order."""
        return [t for h in self.frames for t, v in h if v == voice and tk.is_char(t)]


def _clip(a, hi):
    return np.clip(a, 0.0, hi)


def _single_source(x, cb):
    """Best one-source fit per frame: (residual, voice, token, per-voice residual)."""
    C = cb.char_vectors()  # (S, V, D)
    Q = cb.shaped_patterns()
    S, V, _ = C.shape
    xx = (x * x).sum(1)
    cc = (C * C).sum(-1)
    r_char = xx[:, None, None] - 2 * np.einsum("fd,svd->fsv", x, C) + cc[None]
    R = x[:, None, :] - cb.timbres[None]  # (F, S, D)
    rr = (R * R).sum(-1)
    qq = (Q * Q).sum(-1)
    dot = np.einsum("fsd,svd->fsv", R, Q)
    a = _clip(dot / qq[None], cb.max_pad_amplitude)
    r_pad = (rr[..., None] - 2 * a * dot + a * a * qq[None]).min(-1)  # (F, S)
    per_voice = np.minimum(r_char.min(-1), r_pad)
    flat = r_char.reshape(len(x), -1)
    ic = flat.argmin(1)
    best_char = flat[np.arange(len(x)), ic]
    ip = r_pad.argmin(1)
    best_pad = r_pad[np.arange(len(x)), ip]
    use_pad = best_pad < best_char
    res = np.where(use_pad, best_pad, best_char)
    voice = np.where(use_pad, ip, ic // V)
    token = np.where(use_pad, tk.PAD, tk.N_SPECIAL + ic % V)
    return np.maximum(res, 0.0), voice, token, per_voice


def _two_source(x, cb, s1, s2):
    """Best fit per frame with voices ``s1`` and ``s2`` both active.

    Returns (residual, token1, token2).
    """
    C = cb.char_vectors()
    Q = cb.shaped_patterns()
    amax = cb.max_pad_amplitude
    F_, V = len(x), C.shape[1]
    c1, c2, q1, q2 = C[s1], C[s2], Q[s1], Q[s2]
    t1, t2 = cb.timbres[s1], cb.timbres[s2]
    xx = (x * x).sum(1)
    best = np.full(F_, np.inf)
    tok1 = np.zeros(F_, dtype=np.int64)
    tok2 = np.zeros(F_, dtype=np.int64)

    def consider(res, k1, k2):
        res = res.reshape(F_, -1)
        idx = res.argmin(1)
        val = res[np.arange(F_), idx]
        better = val < best
        best[better] = val[better]
        a, b = k1(idx), k2(idx)
        tok1[better] = a[better]
        tok2[better] = b[better]

    # char + char
    pair = (c1[:, None, :] + c2[None, :, :]).reshape(V * V, -1)
    r = xx[:, None] - 2 * x @ pair.T + (pair * pair).sum(1)[None]
    consider(r, lambda i: tk.N_SPECIAL + i // V, lambda i: tk.N_SPECIAL + i % V)

    # char + pad, in both orders
    for cs, ts, qs, first in ((c1, t2, q2, True), (c2, t1, q1, False)):
        R = x[:, None, :] - cs[None] - ts  # (F, V, D)
        rr = (R * R).sum(-1)
        dot = np.einsum("fvd,ud->fvu", R, qs)
        qq = (qs * qs).sum(1)
        a = _clip(dot / qq, amax)
        r = rr[..., None] - 2 * a * dot + a * a * qq
        chars = lambda i: tk.N_SPECIAL + i // V  # noqa: E731
        pads = lambda i: np.full_like(i, tk.PAD)  # noqa: E731
        consider(r, chars if first else pads, pads if first else chars)

    # pad + pad: box-constrained two-coefficient fit
    R = x - t1 - t2
    rr = (R * R).sum(1)
    b1, b2 = R @ q1.T, R @ q2.T  # (F, V)
    g11, g22 = (q1 * q1).sum(1), (q2 * q2).sum(1)
    g12 = q1 @ q2.T  # (V, V)
    det = g11[:, None] * g22[None, :] - g12**2
    a1 = _clip((b1[:, :, None] * g22[None, None, :] - b2[:, None, :] * g12) / det, amax)
    a2 = _clip((b2[:, None, :] - a1 * g12) / g22[None, None, :], amax)
    a1 = _clip((b1[:, :, None] - a2 * g12) / g11[None, :, None], amax)
    r = (
        rr[:, None, None]
        - 2 * (a1 * b1[:, :, None] + a2 * b2[:, None, :])
        + a1 * a1 * g11[None, :, None]
        + a2 * a2 * g22[None, None, :]
        + 2 * a1 * a2 * g12
    )
    consider(r, lambda i: np.full_like(i, tk.PAD), lambda i: np.full_like(i, tk.PAD))
    return np.maximum(best, 0.0), tok1, tok2


def decode_features(features, codebook, silence_threshold=0.25, source_penalty=0.05,
                    max_candidate_voices=3, voices=None, chunk=256):
    """Recover the (token, voice) sources of every frame.

    Each frame is explained by silence, one source or two sources, whichever
    has the smallest squared residual after adding ``source_penalty`` per
    source. Frames with norm below ``silence_threshold`` are silent outright.
    Two-source fits are searched over pairs drawn from ``voices`` or, when
    not given, from the ``max_candidate_voices`` voices with the most votes.
    Every audible frame votes for its best single voice, and frames that one
    voice cannot explain also vote for their runner-up.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != codebook.d_features:
        raise DataError(f"features must be (frames, {codebook.d_features})")
    n = len(x)
    r0 = (x * x).sum(1)
    r1 = np.empty(n)
    v1 = np.empty(n, dtype=np.int64)
    k1 = np.empty(n, dtype=np.int64)
    runner_up = np.empty(n, dtype=np.int64)
    for lo in range(0, n, chunk):
        r1[lo:lo + chunk], v1[lo:lo + chunk], k1[lo:lo + chunk], pv = _single_source(x[lo:lo + chunk], codebook)
        runner_up[lo:lo + chunk] = np.argsort(pv, axis=1, kind="stable")[:, 1]
    silent = np.sqrt(r0) < silence_threshold
    score0 = r0
    score1 = r1 + source_penalty
    need = np.flatnonzero(~silent & (r1 > source_penalty))
    if voices is None:
        counts = np.bincount(v1[~silent], minlength=codebook.n_voices)
        counts += np.bincount(runner_up[need], minlength=codebook.n_voices)
        order = np.argsort(-counts, kind="stable")
        voices = [int(v) for v in order[:max_candidate_voices] if counts[v] > 0]
    voices = sorted(voices)
    best = np.minimum(score0, score1)
    frames = [()] * n
    two = np.full(n, np.inf)
    two_hyp = [None] * n
    # a two-source fit only wins where the best single fit leaves more than the penalty
    for i, s1 in enumerate(voices):
        for s2 in voices[i + 1:]:
            for lo in range(0, len(need), chunk):
                idx = need[lo:lo + chunk]
                r2, a, b = _two_source(x[idx], codebook, s1, s2)
                for j, f in enumerate(idx):
                    if r2[j] < two[f]:
                        two[f] = r2[j]
                        two_hyp[f] = ((int(a[j]), s1), (int(b[j]), s2))
    score2 = two + 2 * source_penalty
    residual = np.empty(n)
    for f in range(n):
        if silent[f]:
            residual[f] = r0[f]
            continue
        if score2[f] < best[f]:
            frames[f] = two_hyp[f]
            residual[f] = two[f]
        elif score1[f] < score0[f]:
            frames[f] = ((int(k1[f]), int(v1[f])),)
            residual[f] = r1[f]
        else:
            residual[f] = r0[f]
    return Decoding(frames, np.sqrt(residual))


# --------------------------------------------------------------------------
# dialogue simulation and segmentation


@dataclass(frozen=True)
class Utterance:
    voice: int
    text: str
    duration_s: float


@dataclass(frozen=True)
class SimulationSpec:
    utterances: tuple
    overlap_ratio: float = 0.0
    silence_gap_s: float = 0.0
    seed: int = 0
    n_turns: int = None
    hop_s: float = DEFAULT_HOP_S
    same_speaker_gap_frames: int = 2


def simulate_dialogue(spec):
    """Pair two voices' utterances into an alternating two-speaker dialogue.

    Each turn after the first starts ``overlap_ratio * min(previous, current
    duration)`` before the previous turn ends, or ``silence_gap_s`` after it.
    Times are whole frames, so requested overlaps are reproduced exactly on
    the frame grid. A turn never starts before its own speaker's previous
    turn has ended; such turns are pushed back.
    """
    if not 0 <= spec.overlap_ratio <= 1:
        raise InvalidSpec("overlap_ratio must lie in [0, 1]")
    if spec.silence_gap_s < 0:
        raise InvalidSpec("silence_gap_s must be non-negative")
    if spec.overlap_ratio > 0 and spec.silence_gap_s > 0:
        raise InvalidSpec("choose either an overlap ratio or a silence gap, not both")
    by_voice = {}
    for u in spec.utterances:
        by_voice.setdefault(u.voice, []).append(u)
    if len(by_voice) < 2:
        raise InvalidSpec("the utterance pool needs at least two voices")
    rng = np.random.default_rng(spec.seed)
    pick = rng.choice(sorted(by_voice), size=2, replace=False)
    va, vb = int(pick[0]), int(pick[1])
    queues = [list(by_voice[va]), list(by_voice[vb])]
    limit = spec.n_turns or (2 * min(len(q) for q in queues) + (len(queues[0]) > len(queues[1])))
    hop = spec.hop_s
    gap = round(spec.silence_gap_s / hop)
    segs = []
    prev_end = prev_dur = None
    own_end = {}
    for i in range(limit):
        q = queues[i % 2]
        if not q:
            break
        u = q.pop(0)
        dur = max(math.ceil(u.duration_s / hop - 1e-6), len(u.text))
        if prev_end is None:
            start = 0
        elif spec.overlap_ratio > 0:
            start = prev_end - round(spec.overlap_ratio * min(prev_dur, dur))
        else:
            start = prev_end + gap
        speaker = Speaker(i % 2)
        if speaker in own_end:
            start = max(start, own_end[speaker] + spec.same_speaker_gap_frames)
        segs.append(TranscriptSegment(speaker, start * hop, (start + dur) * hop, u.text))
        own_end[speaker] = start + dur
        prev_end, prev_dur = start + dur, dur
    return DialogueTranscript.build(segs, max(s.end_s for s in segs)), (va, vb)


def _activity_blocks(transcript):
    """Merge segments that overlap in time into blocks (abutting ones stay apart)."""
    blocks = []
    for seg in sorted(transcript.segments, key=lambda s: s.start_s):
        if blocks and seg.start_s < blocks[-1][1]:
            blocks[-1][1] = max(blocks[-1][1], seg.end_s)
        else:
            blocks.append([seg.start_s, seg.end_s])
    return blocks


def segment_dialogue(transcript, max_clip_s):
    """Greedily cut a long dialogue into clips at moments of silence.

    Cuts happen only where no segment spans the cut. Each clip is the longest
    stretch not exceeding ``max_clip_s``; a stretch of activity longer than
    that becomes a clip of its own. Clip times are rebased to zero and
    silence-only clips are dropped.
    """
    if not max_clip_s > 0:
        raise InvalidSpec("max_clip_s must be positive")
    cuts = {0.0, transcript.total_duration_s}
    for start, end in _activity_blocks(transcript):
        cuts.update((start, end))
    cuts = sorted(cuts)
    clips = []
    cur = 0.0
    while cur < cuts[-1]:
        later = [c for c in cuts if c > cur]
        fitting = [c for c in later if c - cur <= max_clip_s + 1e-9]
        nxt = fitting[-1] if fitting else later[0]
        inside = [s for s in transcript.segments if s.start_s >= cur - 1e-9 and s.end_s <= nxt + 1e-9]
        if inside:
            rebased = [
                TranscriptSegment(s.speaker, max(s.start_s - cur, 0.0), s.end_s - cur, s.text)
                for s in inside
            ]
            clips.append(DialogueTranscript.build(rebased, nxt - cur))
        cur = nxt
    return clips


# --------------------------------------------------------------------------
# corpus generation

LEXICON = (
    "a about after again all also always and any are area as ask at away back be because "
    "been before best big book both boy but by call came can car case change child city "
    "close come could country cut day did different do does dog done door down during each "
    "early end even every eye face fact family far feel few find first five follow food for "
    "found four free friend from game gave get girl give go good got great group grow had "
    "hand hard has have he head hear help her here high him his home house how idea if "
    "important in into is it just keep kind know land large last late learn leave left let "
    "life light like line little live long look made make man many may me mean men might "
    "mind more most mother move much music must my name near need never new next night no "
    "not now number of off often old on once one only open or order other our out over own "
    "page paper part people place plan play point power put question quick read real right "
    "river road room run said same saw say school sea second see seem sentence set she "
    "should show side small so some song sound start state still stop story study such sun "
    "sure take talk tell than that the their them then there these they thing think this "
    "those thought three time to today together too took tree try turn two under until up "
    "us use very walk want was watch water way we well went were what when where which "
    "while white who why will with word work world would write year yes yet you young your"
).split()


def random_text(rng, min_words=2, max_words=3, p_capital=0.5, p_punct=0.5):
    words = list(rng.choice(LEXICON, size=int(rng.integers(min_words, max_words + 1))))
    if rng.random() < p_capital:
        words[0] = words[0].capitalize()
    text = " ".join(words)
    if rng.random() < p_punct:
        text += str(rng.choice([".", "?", "!", ","]))
    return text


def random_utterance(rng, voice, rate_range=(3.5, 5.0), **text_kw):
    text = random_text(rng, **text_kw)
    rate = rng.uniform(*rate_range)
    return Utterance(voice, text, estimate_duration(text, rate))


class Stage(enum.Enum):
    MONOLOGUE = "monologue"
    DIALOGUE_MIX = "dialogue_mix"


class Category(enum.Enum):
    SEQUENTIAL = "sequential"
    MONOLOGUE = "monologue"
    OVERLAP = "overlap"


@dataclass(frozen=True)
class CorpusConfig:
    n_voices: int = 8
    d_features: int = 16
    codebook_seed: int = 0
    hop_s: float = DEFAULT_HOP_S
    min_turns: int = 2
    max_turns: int = 3
    max_gap_s: float = 0.3
    monologue_utterances: tuple = (1, 2)
    text_words: tuple = (2, 3)
    weights: tuple = (0.5, 0.3, 0.2)

    def codebook(self):
        return OracleCodebook.build(self.d_features, self.n_voices, self.codebook_seed)


@dataclass(frozen=True, eq=False)
class CorpusSample:
    transcript: DialogueTranscript
    voices: tuple
    features: np.ndarray
    category: Category
    seed: int = 0
    stage: Stage = Stage.DIALOGUE_MIX
    overlap_ratio: float = 0.0

    @property
    def grid(self):
        return FrameGrid(self.hop_s, len(self.features))

    hop_s: float = DEFAULT_HOP_S

    def streams(self, token_scheme=None):
        kw = {} if token_scheme is None else {"token_scheme": token_scheme}
        return disentangle(self.transcript, self.grid, **kw)


def _grid_for(transcript, hop):
    return FrameGrid.covering(transcript.total_duration_s, hop)


def make_monologue(rng, voice, cfg, speaker=Speaker.SPK1):
    n = int(rng.integers(cfg.monologue_utterances[0], cfg.monologue_utterances[1] + 1))
    hop = cfg.hop_s
    segs, pos = [], 0
    for _ in range(n):
        u = random_utterance(rng, voice, min_words=cfg.text_words[0], max_words=cfg.text_words[1])
        dur = max(math.ceil(u.duration_s / hop - 1e-6), len(u.text))
        segs.append(TranscriptSegment(speaker, pos * hop, (pos + dur) * hop, u.text))
        pos += dur + max(2, round(rng.uniform(0, cfg.max_gap_s) / hop))
    return DialogueTranscript.build(segs, segs[-1].end_s)


def make_dialogue(rng, cfg, overlap_ratio=0.0, silence_gap_s=0.0, voices=None, n_turns=None):
    if voices is None:
        voices = rng.choice(cfg.n_voices, size=2, replace=False)
    n_turns = n_turns or int(rng.integers(cfg.min_turns, cfg.max_turns + 1))
    pool = [
        random_utterance(rng, int(voices[i % 2]), min_words=cfg.text_words[0], max_words=cfg.text_words[1])
        for i in range(n_turns)
    ]
    spec = SimulationSpec(tuple(pool), overlap_ratio, silence_gap_s, int(rng.integers(2**31)),
                          n_turns, cfg.hop_s)
    transcript, (va, vb) = simulate_dialogue(spec)
    # the simulator picks which voice opens; keep the stream order it reports
    return transcript, (va, vb)


def generate_sample(stage, category, seed, cfg, codebook, overlap_ratio=None, voices=None):
    """One seeded sample; ``voices`` pins the dialogue's voice pair when given."""
    rng = np.random.default_rng(seed)
    ratio = 0.0
    if category is Category.MONOLOGUE:
        voice = int(rng.integers(cfg.n_voices))
        speaker = Speaker(int(rng.integers(2)))
        transcript = make_monologue(rng, voice, cfg, speaker)
        voices = (voice, voice)
    elif category is Category.SEQUENTIAL:
        transcript, voices = make_dialogue(rng, cfg, silence_gap_s=rng.uniform(0, cfg.max_gap_s), voices=voices)
    else:
        ratio = float(rng.uniform(0, 1)) if overlap_ratio is None else overlap_ratio
        transcript, voices = make_dialogue(rng, cfg, overlap_ratio=ratio, voices=voices)
    grid = _grid_for(transcript, cfg.hop_s)
    feats = synth_features(disentangle(transcript, grid), voices, codebook)
    return CorpusSample(transcript, tuple(int(v) for v in voices), feats, category, seed, stage,
                        ratio, cfg.hop_s)


def build_corpus(stage, n, seed, weights=None, cfg=CorpusConfig(), codebook=None):
    """Seeded list of corpus samples for a training stage.

    The monologue stage holds single-speaker samples only. The dialogue-mix
    stage draws each sample's category (sequential dialogue, monologue,
    overlapped dialogue) with the given weights; overlap ratios are uniform
    on [0, 1]. Sample ``i`` depends only on ``(seed, i)``.
    """
    stage = Stage(stage)
    codebook = codebook or cfg.codebook()
    weights = cfg.weights if weights is None else tuple(weights)
    if len(weights) != 3 or min(weights) < 0 or not math.isclose(sum(weights), 1.0, abs_tol=1e-9):
        raise InvalidWeights(f"mixing weights {weights} must be three non-negative numbers summing to 1")
    cats = list(Category)
    rng = np.random.default_rng([seed, 0])
    picks = rng.choice(3, size=n, p=np.asarray(weights) / sum(weights))
    ss = np.random.SeedSequence(seed)
    seeds = [int(s.generate_state(1)[0]) for s in ss.spawn(n)]
    out = []
    for i in range(n):
        cat = Category.MONOLOGUE if stage is Stage.MONOLOGUE else cats[int(picks[i])]
        out.append(generate_sample(stage, cat, seeds[i], cfg, codebook))
    return out


# --------------------------------------------------------------------------
# on-disk format

_FEATURE_MAGIC = b"DFFT"


def write_features(path, features):
    """Little-endian float32 frames behind a header of magic, n_frames, d_features."""
    x = np.asarray(features, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_FEATURE_MAGIC)
        fh.write(struct.pack("<II", x.shape[0], x.shape[1]))
        fh.write(x.tobytes())


def read_features(path):
    with open(path, "rb") as fh:
        if fh.read(4) != _FEATURE_MAGIC:
            raise DataError(f"{path} is not a features file")
        n, d = struct.unpack("<II", fh.read(8))
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != n * d:
        raise DataError(f"{path} holds {data.size} values, header says {n}x{d}")
    return data.reshape(n, d).astype(np.float64)


def save_sample(sample, directory):
    os.makedirs(directory, exist_ok=True)
    sample.transcript.save(os.path.join(directory, "transcript.json"))
    write_features(os.path.join(directory, "features.bin"), sample.features)
    meta = {
        "voices": list(sample.voices),
        "seed": sample.seed,
        "stage": sample.stage.value,
        "category": sample.category.value,
        "overlap_ratio": sample.overlap_ratio,
        "hop_s": sample.hop_s,
    }
    with open(os.path.join(directory, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load_sample(directory):
    with open(os.path.join(directory, "meta.json")) as fh:
        meta = json.load(fh)
    return CorpusSample(
        DialogueTranscript.load(os.path.join(directory, "transcript.json")),
        tuple(meta["voices"]),
        read_features(os.path.join(directory, "features.bin")),
        Category(meta["category"]),
        meta["seed"],
        Stage(meta["stage"]),
        meta["overlap_ratio"],
        meta["hop_s"],
    )


def save_corpus(samples, directory):
    os.makedirs(directory, exist_ok=True)
    names = []
    for i, s in enumerate(samples):
        name = f"sample_{i:06d}"
        save_sample(s, os.path.join(directory, name))
        names.append(name)
    return names


def load_corpus(directory):
    names = sorted(n for n in os.listdir(directory) if n.startswith("sample_"))
    return [load_sample(os.path.join(directory, n)) for n in names]
