"""Embedding and sentiment-score exporter for the graphsent pipeline.

Runs a pretrained 3-class sentiment checkpoint over a JSON-lines message
file and writes the pipeline's input files: a GSEM binary embedding matrix
(the sequence-start token's final hidden state per message), a 3-column
score CSV (negative, neutral, positive), and a JSON manifest that pins the
checkpoint for reproducibility.
"""

from .export import DEFAULT_CHECKPOINT, ExportError, export

__all__ = ["DEFAULT_CHECKPOINT", "ExportError", "export"]
