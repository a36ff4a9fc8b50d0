"""Deep-feature-learning toolkit.

Converts labeled image datasets into cached embedding datasets using frozen
pretrained backbones, trains small classification heads on those embeddings
with feature-space augmentation, and benchmarks candidate backbones.
"""

__version__ = "0.1.0"
