import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from dialogue_flow import tokens as tk
from dialogue_flow.streams import DialogueTranscript, Speaker, TranscriptSegment

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

torch.set_num_threads(1)

HOP = 0.0107

texts = st.text(alphabet=tk.CHARSET, min_size=1, max_size=12).filter(lambda s: s.strip())


@st.composite
def frame_transcripts(draw, hop=HOP, max_segments=4):
    """Random valid transcripts whose boundaries sit on the frame grid.

    Same-speaker segments are at least one frame apart so they stay separate
    runs after encoding.
    """
    segs = []
    for speaker in Speaker:
        pos = draw(st.integers(0, 20))
        for _ in range(draw(st.integers(0, max_segments))):
            text = draw(texts)
            length = len(text) + draw(st.integers(0, 15))
            segs.append(TranscriptSegment(speaker, pos * hop, (pos + length) * hop, text))
            pos += length + draw(st.integers(1, 20))
    end = max((round(s.end_s / hop) for s in segs), default=0)
    total = (end + draw(st.integers(0, 10))) * hop
    return DialogueTranscript.build(segs, total)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS):
            terminalreporter.write_line(line)
