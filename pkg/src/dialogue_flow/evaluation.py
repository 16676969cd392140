"""Objective metrics for generated dialogues, computed through the feature oracle."""

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import tokens as tk
from .corpus import (
    Category,
    CorpusConfig,
    decode_features,
    generate_sample,
    make_monologue,
    synth_features,
)
from .errors import AllSilent, EmptyEvalSet, NonPositive
from .flow import FlowConfig, ode_sample
from .prompt import build_inference_context
from .streams import FrameGrid, Speaker, disentangle


def edit_distance(ref, hyp):
    """Levenshtein distance with unit costs."""
    ref, hyp = list(ref), list(hyp)
    prev = np.arange(len(hyp) + 1)
    for i, r in enumerate(ref, 1):
        cur = np.empty_like(prev)
        cur[0] = i
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return int(prev[-1])


def token_error_rate(ref, hyp):
    return 100.0 * edit_distance(ref, hyp) / max(1, len(ref))


def two_stream_distance(ref1, ref2, hyp):
    """Edit distance of ``hyp`` against two references read in parallel.

    Each hypothesis token may match (or substitute) the next token of either
    reference, or be inserted; reference tokens may be deleted. The result is
    the cheapest way to explain a speaker-agnostic hypothesis by the union of
    both speakers' text, so it never exceeds any speaker-attributed split.
    """
    r1, r2 = np.asarray(list(ref1)), np.asarray(list(ref2))
    n1, n2 = len(r1), len(r2)
    i1 = np.arange(n1 + 1)[:, None]
    i2 = np.arange(n2 + 1)[None, :]

    def close(d):
        # deletions along either reference
        d = np.minimum.accumulate(d - i1, axis=0) + i1
        return np.minimum.accumulate(d - i2, axis=1) + i2

    d = close(np.where((i1 == 0) & (i2 == 0), 0.0, np.inf))
    for h in hyp:
        nxt = d + 1  # insertion
        if n1:
            nxt[1:, :] = np.minimum(nxt[1:, :], d[:-1, :] + (r1 != h)[:, None])
        if n2:
            nxt[:, 1:] = np.minimum(nxt[:, 1:], d[:, :-1] + (r2 != h)[None, :])
        d = close(nxt)
    return int(d[-1, -1])


def reference_tokens(streams, speaker):
    z = streams.stream(speaker)
    return [int(t) for t in z if tk.is_char(t)]


def hypothesis_tokens(decoding):
    """All decoded character tokens in frame order, regardless of voice."""
    return [t for h in decoding.frames for t, _ in h if tk.is_char(t)]


def multi_speaker_ter(streams, decoding):
    ref1 = reference_tokens(streams, Speaker.SPK1)
    ref2 = reference_tokens(streams, Speaker.SPK2)
    dist = two_stream_distance(ref1, ref2, hypothesis_tokens(decoding))
    return 100.0 * dist / max(1, len(ref1) + len(ref2))


def _activity(streams, speaker):
    return tk.active_mask(streams.stream(speaker))


def speaker_mapping(streams, decoding):
    """Map reference speakers to decoded voices by maximal total frame overlap."""
    voices = decoding.voices()
    if not voices:
        return {}
    acts = np.array([decoding.voice_activity(v) for v in voices])
    speakers = [s for s in Speaker if _activity(streams, s).any()]
    if not speakers:
        return {}
    overlap = np.array([[int((_activity(streams, s) & a).sum()) for a in acts] for s in speakers])
    rows, cols = linear_sum_assignment(-overlap)
    return {speakers[r]: voices[c] for r, c in zip(rows, cols) if overlap[r, c] > 0}


@dataclass(frozen=True)
class AttributedScore:
    sa_ter: float
    identity_sa_ter: float
    mapping: dict
    global_swap: bool


def _attributed(streams, decoding, mapping):
    errors = total = 0
    for s in Speaker:
        ref = reference_tokens(streams, s)
        hyp = decoding.voice_tokens(mapping[s]) if s in mapping else []
        errors += edit_distance(ref, hyp)
        total += len(ref)
    used = set(mapping.values())
    errors += sum(len(decoding.voice_tokens(v)) for v in decoding.voices() if v not in used)
    return 100.0 * errors / max(1, total)


def speaker_attributed_ter(streams, decoding, voices=None):
    """Token error rate where a token counts only under its speaker.

    Decoded voices are mapped to reference speakers by maximal frame overlap;
    tokens of unmapped voices are insertions. When the intended ``voices``
    are known, the score under that fixed identity mapping is reported too,
    and ``global_swap`` flags a best mapping that exchanges the two voices.
    """
    best = speaker_mapping(streams, decoding)
    score = _attributed(streams, decoding, best)
    if voices is None:
        return AttributedScore(score, score, best, False)
    identity = {s: int(v) for s, v in zip(Speaker, voices) if _activity(streams, s).any()}
    ident_score = _attributed(streams, decoding, identity)
    swap = (
        len(best) == 2
        and voices[0] != voices[1]
        and best.get(Speaker.SPK1) == voices[1]
        and best.get(Speaker.SPK2) == voices[0]
    )
    return AttributedScore(score, ident_score, best, swap)


def attribution_accuracy(streams, decoding, mapping):
    """Share of active frames whose decoded speaker set equals the reference set."""
    inverse = {v: s for s, v in mapping.items()}
    hits = n = 0
    for f, hyp in enumerate(decoding.frames):
        ref = {s for s in Speaker if _activity(streams, s)[f]}
        got = {inverse.get(v, v + 2) for _, v in hyp}
        if ref or got:
            n += 1
            hits += ref == got
    return hits / n if n else 1.0


def timbre_estimate(features, codebook, decoding=None):
    """Mean of what remains of single-source frames after removing the fitted pattern."""
    x = np.asarray(features, dtype=np.float64)
    decoding = decoding or decode_features(x, codebook)
    rows = []
    for f, hyp in enumerate(decoding.frames):
        if len(hyp) != 1:
            continue
        token, voice = hyp[0]
        if tk.is_char(token):
            rows.append(x[f] - codebook.gains[voice] * codebook.patterns[tk.char_index(token)])
        else:
            rows.append(x[f])  # continuation frames: the decayed pattern is small
    if not rows:
        raise AllSilent("no single-speaker frames to estimate a voice from")
    return np.mean(rows, axis=0)


def cosine(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def speaker_similarity(features_a, features_b, codebook):
    return cosine(timbre_estimate(features_a, codebook), timbre_estimate(features_b, codebook))


def overlap_fidelity(requested, decoding):
    """Frames where requested two-speaker activity and decoded two-source frames disagree."""
    want = _activity(requested, Speaker.SPK1) & _activity(requested, Speaker.SPK2)
    got = decoding.n_sources() == 2
    return int(np.sum(want ^ got))


def _runs(mask):
    edges = np.diff(np.concatenate(([0], mask.astype(np.int8), [0])))
    return list(zip(np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)))


def overlap_boundary_errors(requested, decoding, tolerance=3):
    """Per requested overlap run: ``(start_error, end_error)`` in frames, or None if missed.

    The run is matched with every decoded overlap run that comes within
    ``tolerance`` frames of it; errors are measured to the outer edges of
    those runs, so overlap spilling far past the request is not forgiven.
    """
    want = _activity(requested, Speaker.SPK1) & _activity(requested, Speaker.SPK2)
    got = _runs(decoding.n_sources() == 2)
    out = []
    for s, e in _runs(want):
        near = [(a, b) for a, b in got if a < e + tolerance and b > s - tolerance]
        if not near:
            out.append(None)
        else:
            out.append((int(abs(near[0][0] - s)), int(abs(near[-1][1] - e))))
    return out


def boundaries_within(errors, tolerance=3):
    return [e is not None and max(e) <= tolerance for e in errors]


def rtf(generation_wall_s, generated_audio_s):
    if not generation_wall_s > 0 or not generated_audio_s > 0:
        raise NonPositive("wall time and generated duration must both be positive")
    return generation_wall_s / generated_audio_s


# --------------------------------------------------------------------------
# evaluation sets and reports


@dataclass(frozen=True, eq=False)
class EvalItem:
    transcript: object
    voices: tuple
    prompts: tuple  # (frames, d) arrays for Spk1 and Spk2
    hop_s: float
    features: np.ndarray = None  # oracle rendering of the transcript
    overlap_ratio: float = 0.0

    def streams(self):
        return disentangle(self.transcript, FrameGrid.covering(self.transcript.total_duration_s, self.hop_s))


def voice_prompt(voice, seed, cfg, codebook, min_frames=50, max_frames=64):
    """Untranscribed oracle features of a fresh utterance in ``voice``."""
    rng = np.random.default_rng(seed)
    while True:
        t = make_monologue(rng, voice, cfg)
        grid = FrameGrid.covering(t.total_duration_s, cfg.hop_s)
        if grid.n_frames >= min_frames:
            feats = synth_features(disentangle(t, grid), (voice, voice), codebook)
            return feats[:max_frames]


def make_eval_set(n, seed, cfg=CorpusConfig(), codebook=None, categories=(Category.SEQUENTIAL, Category.OVERLAP),
                  overlap_ratio=None, voices=None):
    """Held-out dialogues with separately drawn voice prompts.

    ``voices`` fixes the voice pair of every dialogue (matched-speaker sets).
    """
    codebook = codebook or cfg.codebook()
    ss = np.random.SeedSequence([seed, 7919])
    items = []
    for i, child in enumerate(ss.spawn(n)):
        s1, s2, s3 = (int(x) for x in child.generate_state(3))
        cat = categories[i % len(categories)]
        sample = generate_sample(None, cat, s1, cfg, codebook, overlap_ratio=overlap_ratio, voices=voices)
        prompts = (voice_prompt(sample.voices[0], s2, cfg, codebook),
                   voice_prompt(sample.voices[1], s3, cfg, codebook))
        items.append(EvalItem(sample.transcript, sample.voices, prompts, cfg.hop_s, sample.features,
                              sample.overlap_ratio))
    return items


def oracle_generator(codebook):
    """Stand-in generator returning the oracle rendering; the harness self-test."""
    def generate(item):
        start = time.perf_counter()
        streams = item.streams()
        feats = synth_features(streams, item.voices, codebook)
        return feats, time.perf_counter() - start
    return generate


def model_generator(model, flow=FlowConfig(), seed=0):
    """Synthesize each item with the trained field; noise is seeded per item."""
    counter = {"i": 0}

    def generate(item):
        rng = np.random.default_rng([seed, counter["i"]])
        counter["i"] += 1
        start = time.perf_counter()
        streams = item.streams()
        context = build_inference_context(item.prompts[0], item.prompts[1], model.cfg.d_features)
        feats = ode_sample(model.velocity, context, streams, flow, rng)
        return feats, time.perf_counter() - start
    return generate


@dataclass
class EvalReport:
    ter: float
    sa_ter: float
    sa_sim: float
    overlap_error_frames: int
    rtf: float
    n_samples: int
    attribution_accuracy: float
    boundary_hit_rate: float
    per_sample: list = field(default_factory=list)

    COLUMNS = ("RTF", "TER", "SA-TER", "SA-SIM")

    def to_dict(self, timing=True):
        d = asdict(self)
        if not timing:
            d.pop("rtf")
            for s in d["per_sample"]:
                s.pop("rtf", None)
                s.pop("wall_s", None)
        return d

    def to_json(self, timing=True):
        return json.dumps(self.to_dict(timing), indent=2, sort_keys=True)

    def table(self):
        vals = (f"{self.rtf:.3f}", f"{self.ter:.2f}", f"{self.sa_ter:.2f}", f"{self.sa_sim:.3f}")
        width = [max(len(c), len(v)) for c, v in zip(self.COLUMNS, vals)]
        head = " | ".join(c.rjust(w) for c, w in zip(self.COLUMNS, width))
        row = " | ".join(v.rjust(w) for v, w in zip(vals, width))
        return f"{head}\n{row}"


def score_item(item, features, wall_s, codebook):
    streams = item.streams()
    dec = decode_features(features, codebook)
    att = speaker_attributed_ter(streams, dec, item.voices)
    ter = multi_speaker_ter(streams, dec)
    sims = []
    for s, prompt in zip(Speaker, item.prompts):
        solo = _activity(streams, s) & ~_activity(streams, s.other)
        if solo.any():
            try:
                sims.append(cosine(timbre_estimate(features[solo], codebook),
                                   timbre_estimate(prompt, codebook)))
            except AllSilent:
                sims.append(0.0)
    bounds = overlap_boundary_errors(streams, dec)
    return {
        "ter": ter,
        "sa_ter": att.sa_ter,
        "identity_sa_ter": att.identity_sa_ter,
        "global_swap": att.global_swap,
        "attribution_accuracy": attribution_accuracy(streams, dec, att.mapping),
        "sa_sim": float(np.mean(sims)) if sims else 0.0,
        "overlap_error_frames": overlap_fidelity(streams, dec),
        "boundary_errors": [list(b) if b is not None else None for b in bounds],
        "n_ref_tokens": len(reference_tokens(streams, Speaker.SPK1)) + len(reference_tokens(streams, Speaker.SPK2)),
        "wall_s": wall_s,
        "audio_s": len(features) * item.hop_s,
        "rtf": rtf(wall_s, len(features) * item.hop_s),
    }


def evaluate(generate, items, codebook):
    """Generate every item, decode it through the oracle and aggregate the metrics.

    Error rates are pooled over reference tokens; similarity and attribution
    are averaged over samples; RTF is total wall time over total audio.
    """
    if not items:
        raise EmptyEvalSet("the evaluation set is empty")
    per = []
    for item in items:
        feats, wall = generate(item)
        per.append(score_item(item, feats, wall, codebook))
    n_tok = sum(max(1, p["n_ref_tokens"]) for p in per)
    bounds = [b for p in per for b in p["boundary_errors"]]
    hits = boundaries_within([tuple(b) if b else None for b in bounds])
    return EvalReport(
        ter=sum(p["ter"] * max(1, p["n_ref_tokens"]) for p in per) / n_tok,
        sa_ter=sum(p["sa_ter"] * max(1, p["n_ref_tokens"]) for p in per) / n_tok,
        sa_sim=float(np.mean([p["sa_sim"] for p in per])),
        overlap_error_frames=int(sum(p["overlap_error_frames"] for p in per)),
        rtf=rtf(sum(p["wall_s"] for p in per), sum(p["audio_s"] for p in per)),
        n_samples=len(per),
        attribution_accuracy=float(np.mean([p["attribution_accuracy"] for p in per])),
        boundary_hit_rate=float(np.mean(hits)) if hits else 1.0,
        per_sample=per,
    )
