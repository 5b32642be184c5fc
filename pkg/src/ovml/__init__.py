"""Open-vocabulary multi-label classification at desk scale.

A from-scratch pipeline: reverse-mode autodiff tensors, a small vision
transformer, two-stream (global + local top-k) label scoring against
embeddings from a frozen text surrogate, ranking + distillation
training followed by prompt tuning, a full multi-label ZSL/GZSL metric
stack, and a seeded synthetic world that makes every claim checkable.
"""

__version__ = "0.1.0"
