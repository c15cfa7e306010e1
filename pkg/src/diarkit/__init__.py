"""diarkit: target-speaker VAD and encoder-decoder-attractor diarization on a small numpy autodiff core."""

__version__ = "0.1.0"
