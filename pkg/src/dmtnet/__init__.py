"""Cross-domain few-shot segmentation with self-matching transforms,
dual hypercorrelation and test-time self-finetuning."""

from dmtnet.errors import *  # noqa: F401,F403

__version__ = "0.1.0"
