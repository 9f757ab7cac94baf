"""Synthetic testbed for syntax-planned compositional image captioning."""

from . import (  # noqa: F401
    captioner,
    evaluation,
    grammar,
    harness,
    numerics,
    planner,
    ranker,
    splits,
    world,
)

__version__ = "0.1.0"
