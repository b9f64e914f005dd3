"""Plan-space state embeddings learned from demonstrations, plus the tooling to test them.

The package is laid out bottom-up: ``nn`` and ``distributions`` are the
numerical substrate, ``data`` holds trajectories and triplets, ``embedding``
trains the encoder/decoder, ``envs`` and ``demos`` provide the control tasks and
their demonstrations, ``rl`` runs the policy-gradient comparison and ``cli``
ties the stages together.
"""
from __future__ import annotations

__version__ = "0.1.0"
