"""DTVNet: flow-conditioned time-lapse video generation.

A two-stream generator maps one start frame plus a normalized 512-d motion
vector to a T-frame video. During training the motion vector is encoded from
optical flow; at test time it is sampled from a standard normal, which yields
diversified videos from the same start frame.
"""

__version__ = "0.1.0"
