"""One-class image classifier: a fine-to-coarse Bayesian CNN trained on real
images only, scoring new images by posterior output and flagging low scores
as synthetic."""

__version__ = "0.1.0"
