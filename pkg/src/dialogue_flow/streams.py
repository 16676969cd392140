"""Two-stream, frame-aligned token encoding of timed dialogue transcripts.

A dialogue between two speakers is represented as one token stream per
speaker, both sampled on the same frame grid. Inside a speaker's active
segment the characters are laid out one per frame from the first frame of
the segment, and the rest of the segment is filled with the continuation
token ``[P]``. Frames outside that speaker's segments carry a silence token.
"""

import enum
import json
import math
import re
from dataclasses import dataclass, field

import numpy as np

from . import tokens as tk
from .errors import (
    DataError,
    EmptyText,
    InvalidTranscript,
    NegativeTime,
    SameSpeakerOverlap,
    SegmentTooDense,
)

DEFAULT_HOP_S = 0.0107
# Tolerance (in frames) used when snapping times onto the grid so that
# times computed as k * hop land exactly on frame k.
_SNAP_EPS = 1e-6


class Speaker(enum.IntEnum):
    SPK1 = 0
    SPK2 = 1

    @property
    def label(self):
        return "spk1" if self is Speaker.SPK1 else "spk2"

    @classmethod
    def parse(cls, value):
        if isinstance(value, Speaker):
            return value
        if isinstance(value, int):
            return cls(value)
        key = str(value).strip().lower()
        if key in ("spk1", "1"):
            return cls.SPK1
        if key in ("spk2", "2"):
            return cls.SPK2
        raise DataError(f"unknown speaker label {value!r}")

    @property
    def other(self):
        return Speaker(1 - self.value)


class TokenScheme(enum.Enum):
    GENERIC_SILENCE = "generic"
    SPEAKER_AWARE_SILENCE = "speaker_aware"

    def silence_for(self, speaker):
        if self is TokenScheme.GENERIC_SILENCE:
            return tk.SILENCE
        return tk.SILENCE_SPK1 if speaker == Speaker.SPK1 else tk.SILENCE_SPK2


@dataclass(frozen=True)
class TranscriptSegment:
    speaker: Speaker
    start_s: float
    end_s: float
    text: str

    def __post_init__(self):
        object.__setattr__(self, "speaker", Speaker.parse(self.speaker))
        if not self.start_s >= 0:
            raise InvalidTranscript(f"segment start {self.start_s} is negative")
        if not self.end_s > self.start_s:
            raise InvalidTranscript(f"segment end {self.end_s} <= start {self.start_s}")
        if not self.text.strip():
            raise InvalidTranscript("segment text is empty")

    @property
    def duration_s(self):
        return self.end_s - self.start_s

    def to_dict(self):
        return {
            "speaker": self.speaker.label,
            "start_s": self.start_s,
            "end_s": self.end_s,
            "text": self.text,
        }


@dataclass(frozen=True)
class DialogueTranscript:
    segments: tuple
    total_duration_s: float

    def __post_init__(self):
        segs = tuple(self.segments)
        object.__setattr__(self, "segments", segs)
        if self.total_duration_s < 0:
            raise InvalidTranscript("total duration is negative")
        for a, b in zip(segs, segs[1:]):
            if b.start_s < a.start_s:
                raise InvalidTranscript("segments are not sorted by start time")
        last_end = {}
        for seg in segs:
            if seg.end_s > self.total_duration_s + 1e-9:
                raise InvalidTranscript(
                    f"segment ends at {seg.end_s} s, past total duration {self.total_duration_s} s"
                )
            prev = last_end.get(seg.speaker)
            if prev is not None and seg.start_s < prev - 1e-12:
                raise SameSpeakerOverlap(f"{seg.speaker.label} overlaps itself at {seg.start_s} s")
            last_end[seg.speaker] = seg.end_s

    @classmethod
    def build(cls, segments, total_duration_s=None):
        """Sort ``segments`` and infer the total duration if not given."""
        segs = sorted(segments, key=lambda s: (s.start_s, s.speaker))
        if total_duration_s is None:
            total_duration_s = max((s.end_s for s in segs), default=0.0)
        return cls(tuple(segs), total_duration_s)

    def speaker_segments(self, speaker):
        speaker = Speaker.parse(speaker)
        return [s for s in self.segments if s.speaker == speaker]

    def speaker_text(self, speaker):
        return "".join(s.text for s in self.speaker_segments(speaker))

    @property
    def speakers(self):
        return sorted({s.speaker for s in self.segments})

    def to_dict(self):
        return {
            "duration_s": self.total_duration_s,
            "segments": [s.to_dict() for s in self.segments],
        }

    @classmethod
    def from_dict(cls, data):
        segs = [
            TranscriptSegment(
                Speaker.parse(s["speaker"]), float(s["start_s"]), float(s["end_s"]), s["text"]
            )
            for s in data["segments"]
        ]
        return cls(tuple(segs), float(data["duration_s"]))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class FrameGrid:
    hop_s: float = DEFAULT_HOP_S
    n_frames: int = 1

    def __post_init__(self):
        if not self.hop_s > 0:
            raise DataError("hop_s must be positive")
        if self.n_frames < 1:
            raise DataError("a frame grid needs at least one frame")

    @classmethod
    def covering(cls, duration_s, hop_s=DEFAULT_HOP_S):
        return cls(hop_s, max(1, math.ceil(duration_s / hop_s - _SNAP_EPS)))

    def start_frame(self, t_s):
        return math.floor(t_s / self.hop_s + _SNAP_EPS)

    def end_frame(self, t_s):
        return math.ceil(t_s / self.hop_s - _SNAP_EPS)

    def span(self, start_s, end_s):
        """Half-open frame span ``[start, end)`` covering a time interval."""
        return self.start_frame(start_s), max(self.end_frame(end_s), self.start_frame(start_s) + 1)

    @property
    def duration_s(self):
        return self.n_frames * self.hop_s


@dataclass(frozen=True, eq=False)
class SpeakerStreamPair:
    z1: np.ndarray
    z2: np.ndarray
    grid: FrameGrid

    def __post_init__(self):
        z1 = np.asarray(self.z1, dtype=np.int64)
        z2 = np.asarray(self.z2, dtype=np.int64)
        if z1.shape != z2.shape or z1.ndim != 1:
            raise DataError("speaker streams must be 1-D and equally long")
        if len(z1) != self.grid.n_frames:
            raise DataError(f"streams hold {len(z1)} frames but the grid has {self.grid.n_frames}")
        object.__setattr__(self, "z1", z1)
        object.__setattr__(self, "z2", z2)

    def stream(self, speaker):
        return self.z1 if Speaker.parse(speaker) == Speaker.SPK1 else self.z2

    def __len__(self):
        return self.grid.n_frames

    def __eq__(self, other):
        if not isinstance(other, SpeakerStreamPair):
            return NotImplemented
        return (
            self.grid == other.grid
            and np.array_equal(self.z1, other.z1)
            and np.array_equal(self.z2, other.z2)
        )

    def to_dict(self):
        return {
            "hop_s": self.grid.hop_s,
            "z1": [tk.token_name(t) for t in self.z1],
            "z2": [tk.token_name(t) for t in self.z2],
        }

    @classmethod
    def from_dict(cls, data):
        z1 = [tk.token_from_name(n) for n in data["z1"]]
        z2 = [tk.token_from_name(n) for n in data["z2"]]
        return cls(np.array(z1), np.array(z2), FrameGrid(float(data["hop_s"]), len(z1)))

    @classmethod
    def silent(cls, grid, token_scheme=TokenScheme.GENERIC_SILENCE):
        z1 = np.full(grid.n_frames, token_scheme.silence_for(Speaker.SPK1))
        z2 = np.full(grid.n_frames, token_scheme.silence_for(Speaker.SPK2))
        return cls(z1, z2, grid)


def render_segment_tokens(segment, grid):
    """Character tokens laid out left-aligned over the segment span, padded with ``[P]``."""
    start, end = grid.span(segment.start_s, segment.end_s)
    chars = tk.encode_text(segment.text)
    n = end - start
    if len(chars) > n:
        raise SegmentTooDense(
            f"{len(chars)} characters do not fit in {n} frames "
            f"({segment.start_s:.4f}-{segment.end_s:.4f} s)"
        )
    out = np.full(n, tk.PAD, dtype=np.int64)
    out[: len(chars)] = chars
    return out


def disentangle(transcript, grid, token_scheme=TokenScheme.GENERIC_SILENCE):
    """Split a dialogue transcript into one frame-aligned token stream per speaker."""
    need = FrameGrid.covering(transcript.total_duration_s, grid.hop_s).n_frames
    if transcript.segments and grid.n_frames < need:
        raise DataError(f"grid has {grid.n_frames} frames, transcript needs {need}")
    streams = {}
    for speaker in Speaker:
        z = np.full(grid.n_frames, token_scheme.silence_for(speaker), dtype=np.int64)
        taken_until = -1
        for seg in transcript.speaker_segments(speaker):
            start, end = grid.span(seg.start_s, seg.end_s)
            if end > grid.n_frames:
                raise DataError(f"segment at {seg.start_s} s runs past the grid")
            if start < taken_until:
                raise SameSpeakerOverlap(
                    f"{speaker.label} segments collide on frame {start} after quantization"
                )
            z[start:end] = render_segment_tokens(seg, grid)
            taken_until = end
        streams[speaker] = z
    return SpeakerStreamPair(streams[Speaker.SPK1], streams[Speaker.SPK2], grid)


def _active_runs(z):
    active = tk.active_mask(z).astype(np.int8)
    edges = np.diff(np.concatenate(([0], active, [0])))
    return list(zip(np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)))


def reconstruct_transcript(streams):
    """Inverse of :func:`disentangle`, up to frame quantization of the boundaries."""
    hop = streams.grid.hop_s
    segs = []
    for speaker in Speaker:
        z = streams.stream(speaker)
        for start, end in _active_runs(z):
            text = "".join(tk.char_of(t) for t in z[start:end] if tk.is_char(t))
            if not text.strip():
                continue
            segs.append(TranscriptSegment(speaker, float(start * hop), float(end * hop), text))
    return DialogueTranscript.build(segs, streams.grid.duration_s)


_VOWEL_GROUP = re.compile(r"[aeiouy]+", re.IGNORECASE)


def syllable_count(text):
    """Maximal vowel groups per word, with at least one syllable per word."""
    return sum(max(1, len(_VOWEL_GROUP.findall(word))) for word in text.split())


def estimate_duration(text, speaking_rate, floor_s=0.3):
    if not text.strip():
        raise EmptyText("cannot estimate the duration of empty text")
    if not speaking_rate > 0:
        raise DataError("speaking_rate must be positive")
    return max(syllable_count(text) / speaking_rate, floor_s)


@dataclass(frozen=True)
class ScriptTurn:
    speaker: Speaker
    text: str
    start_s: float = None
    duration_s: float = None

    def __post_init__(self):
        object.__setattr__(self, "speaker", Speaker.parse(self.speaker))


@dataclass(frozen=True)
class TimingPolicy:
    """How turns of an inference script are placed in time.

    Turns follow each other separated by ``gap_s`` (negative values overlap
    consecutive turns). When ``overlap_ratio`` is set it takes precedence
    over ``gap_s``: a turn then starts ``overlap_ratio * min(previous,
    current duration)`` before the previous one ends. Per-turn ``start_s``
    and ``duration_s`` overrides always win.
    """

    speaking_rate: float = 4.0
    gap_s: float = 0.2
    overlap_ratio: float = None
    trailing_silence_s: float = 0.5
    duration_floor_s: float = 0.3
    overrides: dict = field(default_factory=dict)


def schedule_script(script, timing, grid_hop=DEFAULT_HOP_S):
    """Assign start and end times to every script turn.

    Computed times are multiples of ``grid_hop`` so that requested gaps and
    overlaps survive frame quantization unchanged.
    """
    if not script:
        raise DataError("script is empty")
    turns = [t if isinstance(t, ScriptTurn) else ScriptTurn(*t) for t in script]
    segs = []
    prev_end_s = prev_dur_s = None
    for i, turn in enumerate(turns):
        override = timing.overrides.get(i, {})
        start_s = override.get("start_s", turn.start_s)
        dur_s = override.get("duration_s", turn.duration_s)
        if dur_s is None:
            est = estimate_duration(turn.text, timing.speaking_rate, timing.duration_floor_s)
            dur_s = max(math.ceil(est / grid_hop - _SNAP_EPS), len(turn.text)) * grid_hop
        if start_s is None:
            if prev_end_s is None:
                start_s = 0.0
            elif timing.overlap_ratio is not None:
                shift = round(timing.overlap_ratio * min(prev_dur_s, dur_s) / grid_hop)
                start_s = prev_end_s - shift * grid_hop
            else:
                start_s = prev_end_s + round(timing.gap_s / grid_hop) * grid_hop
        if start_s < -1e-9:
            raise NegativeTime(f"turn {i} would start at {start_s:.4f} s")
        start_s = max(start_s, 0.0)
        segs.append(TranscriptSegment(turn.speaker, start_s, start_s + dur_s, turn.text))
        prev_end_s, prev_dur_s = start_s + dur_s, dur_s
    last_end = max(s.end_s for s in segs)
    total = last_end + timing.trailing_silence_s
    return DialogueTranscript.build(segs, total)


def build_inference_streams(
    script, timing=None, grid_hop=DEFAULT_HOP_S, token_scheme=TokenScheme.GENERIC_SILENCE
):
    """Token streams for an inference script of ``(speaker, text)`` turns."""
    transcript = schedule_script(script, timing or TimingPolicy(), grid_hop)
    grid = FrameGrid.covering(transcript.total_duration_s, grid_hop)
    return disentangle(transcript, grid, token_scheme)


def overlap_frames(streams):
    """Number of frames where both speakers are active."""
    return int(np.sum(tk.active_mask(streams.z1) & tk.active_mask(streams.z2)))
