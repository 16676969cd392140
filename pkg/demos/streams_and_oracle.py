"""From a two-line script to frame-level token streams and back through the feature oracle.

Run: python demos/streams_and_oracle.py
"""

import numpy as np

from dialogue_flow import tokens as tk
from dialogue_flow.corpus import OracleCodebook, decode_features, synth_features
from dialogue_flow.streams import TimingPolicy, build_inference_streams, overlap_frames, reconstruct_transcript

script = [("spk1", "Are you coming tonight?"), ("spk2", "Yes, of course!")]

# a quarter of the shorter turn is spoken simultaneously
streams = build_inference_streams(script, TimingPolicy(speaking_rate=4.0, overlap_ratio=0.25))
print(f"{len(streams)} frames, {overlap_frames(streams)} of them with both speakers active\n")


def show(z, lo, hi):
    names = [tk.token_name(t) for t in z[lo:hi]]
    return "".join({"[S]": ".", "[P]": "-", " ": "_"}.get(x, x) for x in names)


# a window around the hand-over; "." is silence, "-" a continuation frame
lo = int(np.flatnonzero(tk.active_mask(streams.z2))[0]) - 30
print("spk1:", show(streams.z1, lo, lo + 80))
print("spk2:", show(streams.z2, lo, lo + 80))

codebook = OracleCodebook.build()
voices = (1, 6)
features = synth_features(streams, voices, codebook)
print(f"\nfeatures: {features.shape}, mean frame norm {np.linalg.norm(features, axis=1).mean():.2f}")

noisy = features + np.random.default_rng(0).normal(0, 0.05, features.shape)
for name, x in (("clean", features), ("noisy", noisy)):
    dec = decode_features(x, codebook)
    both = sum(len(h) == 2 for h in dec.frames)
    print(f"{name}: decoded {both} two-source frames, voices {dec.voices()}")

back = reconstruct_transcript(streams)
for seg in back.segments:
    print(f"  {seg.speaker.label}  {seg.start_s:5.2f}-{seg.end_s:5.2f}s  {seg.text!r}")
