"""Proposal/critic reasoning pipeline: synthesis, draft-critique-revise, GRPO batches."""

__version__ = "0.1.0"
