"""Acoustic prompt prefixes and loss masks.

Training samples are conditioned on voice prompts cut from their own
monologue regions. The selected prompts are placed in front of the sample,
one per speaker in the order Spk1, Spk2, each followed by a separator frame.
Over a prompt both token streams carry that speaker's prompt marker, so the
model learns which voice belongs to which stream without ever seeing a
transcription of the prompt. The prefix is excluded from the loss.
"""

from dataclasses import dataclass

import numpy as np

from . import tokens as tk
from .errors import DimensionMismatch, NoCandidate, NoPrompt
from .streams import FrameGrid, Speaker, SpeakerStreamPair

MIN_PROMPT_FRAMES = 50
MAX_PROMPT_FRAMES = 300
SEP_FRAMES = 1

_PROMPT_TOKEN = {Speaker.SPK1: tk.PROMPT_SPK1, Speaker.SPK2: tk.PROMPT_SPK2}


@dataclass(frozen=True)
class PromptCandidate:
    speaker: Speaker
    start_frame: int
    end_frame: int

    @property
    def n_frames(self):
        return self.end_frame - self.start_frame

    @property
    def frame_span(self):
        return self.start_frame, self.end_frame


def speaker_activity(transcript, grid):
    """Per-speaker boolean activity over the grid, from quantized segment spans."""
    act = np.zeros((2, grid.n_frames), dtype=bool)
    for seg in transcript.segments:
        start, end = grid.span(seg.start_s, seg.end_s)
        act[seg.speaker, start:min(end, grid.n_frames)] = True
    return act


def _runs(mask):
    edges = np.diff(np.concatenate(([0], mask.astype(np.int8), [0])))
    return zip(np.flatnonzero(edges == 1), np.flatnonzero(edges == -1))


def candidates_from_activity(activity, min_prompt_frames=MIN_PROMPT_FRAMES,
                             max_prompt_frames=MAX_PROMPT_FRAMES):
    out = []
    for speaker in Speaker:
        mono = activity[speaker] & ~activity[speaker.other]
        for start, end in _runs(mono):
            if end - start >= min_prompt_frames:
                out.append(PromptCandidate(speaker, int(start), int(min(end, start + max_prompt_frames))))
    return out


def find_prompt_candidates(transcript, grid, min_prompt_frames=MIN_PROMPT_FRAMES,
                           max_prompt_frames=MAX_PROMPT_FRAMES):
    """Every monologue stretch long enough to serve as a voice prompt."""
    return candidates_from_activity(
        speaker_activity(transcript, grid), min_prompt_frames, max_prompt_frames
    )


@dataclass(frozen=True, eq=False)
class PromptPrefix:
    """Feature frames and stream tokens placed in front of a sample."""

    features: np.ndarray
    z1: np.ndarray
    z2: np.ndarray
    prompt_spans: dict

    def __len__(self):
        return len(self.z1)

    @classmethod
    def empty(cls, d_features):
        none = np.zeros(0, dtype=np.int64)
        return cls(np.zeros((0, d_features)), none, none, {})


def layout_prefix(prompts, sep_frames=SEP_FRAMES):
    """Concatenate per-speaker prompt features as ``[p1 | SEP | p2 | SEP]``.

    ``prompts`` maps speakers to ``(frames, d)`` arrays; absent speakers get
    no prompt. Separator feature frames are zero; the model learns the
    separator's representation through its token embedding.
    """
    feats, z, spans = [], [], {}
    pos = 0
    dims = {np.shape(p)[1] for p in prompts.values()}
    if len(dims) > 1:
        raise DimensionMismatch(f"prompts have differing feature dimensions {sorted(dims)}")
    d = dims.pop()
    for speaker in Speaker:
        if speaker not in prompts:
            continue
        p = np.asarray(prompts[speaker], dtype=np.float64)
        feats += [p, np.zeros((sep_frames, d))]
        z += [np.full(len(p), _PROMPT_TOKEN[speaker]), np.full(sep_frames, tk.SEP)]
        spans[speaker] = (pos, pos + len(p))
        pos += len(p) + sep_frames
    z = np.concatenate(z).astype(np.int64)
    return PromptPrefix(np.concatenate(feats), z, z.copy(), spans)


@dataclass(frozen=True, eq=False)
class TrainingExample:
    features: np.ndarray
    streams: SpeakerStreamPair
    loss_mask: np.ndarray
    prompt_spans: dict
    prefix_len: int

    @property
    def n_frames(self):
        return len(self.loss_mask)

    def to_dict(self):
        return {
            "prefix_len": self.prefix_len,
            "prompt_spans": {s.label: list(v) for s, v in self.prompt_spans.items()},
            "loss_mask": self.loss_mask.astype(int).tolist(),
            "streams": self.streams.to_dict(),
            "features": np.round(self.features, 6).tolist(),
        }


def assemble_training_example(features, streams, candidates, rng, sep_frames=SEP_FRAMES):
    """Prefix a sample with randomly chosen prompts cut from its own monologues.

    One candidate per present speaker is drawn uniformly with ``rng``. A
    dialogue sample missing candidates for a present speaker raises
    :class:`NoCandidate`; callers skip such samples.
    """
    features = np.asarray(features, dtype=np.float64)
    if len(features) != len(streams):
        raise DimensionMismatch(f"{len(features)} feature frames vs {len(streams)} stream frames")
    present = [s for s in Speaker if tk.active_mask(streams.stream(s)).any()]
    by_speaker = {s: [c for c in candidates if c.speaker == s] for s in Speaker}
    prompts = {}
    for speaker in present:
        pool = by_speaker[speaker]
        if not pool:
            raise NoCandidate(f"no prompt candidate for {speaker.label}")
        pick = pool[int(rng.integers(len(pool)))]
        prompts[speaker] = features[pick.start_frame:pick.end_frame]
    if not prompts:
        raise NoCandidate("sample has no active speaker")
    prefix = layout_prefix(prompts, sep_frames)
    n_pre = len(prefix)
    total = n_pre + len(streams)
    full = SpeakerStreamPair(
        np.concatenate([prefix.z1, streams.z1]),
        np.concatenate([prefix.z2, streams.z2]),
        FrameGrid(streams.grid.hop_s, total),
    )
    mask = np.ones(total, dtype=bool)
    mask[:n_pre] = False
    return TrainingExample(
        np.concatenate([prefix.features, features]), full, mask, prefix.prompt_spans, n_pre
    )


def build_inference_context(prompt_features_1, prompt_features_2=None, d_features=None,
                            sep_frames=SEP_FRAMES):
    """Prefix for synthesis from untranscribed prompt features.

    Either prompt may be omitted; a speaker without a prompt is left
    unconditioned and the model picks a voice for it.
    """
    prompts = {}
    for speaker, p in ((Speaker.SPK1, prompt_features_1), (Speaker.SPK2, prompt_features_2)):
        if p is None:
            continue
        p = np.asarray(p, dtype=np.float64)
        if p.ndim != 2 or len(p) == 0:
            raise DimensionMismatch(f"prompt for {speaker.label} must be a non-empty (frames, d) array")
        if d_features is not None and p.shape[1] != d_features:
            raise DimensionMismatch(
                f"prompt for {speaker.label} has {p.shape[1]} features, model expects {d_features}"
            )
        prompts[speaker] = p
    if not prompts:
        raise NoPrompt("at least one voice prompt is required")
    return layout_prefix(prompts, sep_frames)
