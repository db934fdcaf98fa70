"""Deterministic simulator for deadline-based, quantized decentralized SGD.

The package models a network of compute nodes that jointly minimize an
average of local empirical losses by exchanging (optionally quantized)
models with graph neighbors. Local gradients are assembled under a
per-round compute deadline, so straggling nodes contribute smaller
mini-batches instead of stalling the round. A simulated wall-clock
accounts for compute and communication time, which makes time-to-loss
comparisons between the deadline scheme and classic synchronous /
asynchronous gossip SGD baselines direct and reproducible.
"""

__version__ = "0.1.0"
