"""Contour tracing of a single object with a PPO-trained walking agent.

The pipeline: a CNN regressor proposes a landing spot in the upper-right part
of the image, then a policy network walks along the object boundary one pixel
at a time until it returns home. The closed walk is the predicted contour.
"""

__version__ = "0.1.0"

from .contours import Contour, Pixel, extract_contour, refine_contour
from .data import Sample, SynthParams, synth_sample
from .env import EnvConfig, Episode

__all__ = [
    "Contour", "Pixel", "extract_contour", "refine_contour",
    "Sample", "SynthParams", "synth_sample", "EnvConfig", "Episode",
]
