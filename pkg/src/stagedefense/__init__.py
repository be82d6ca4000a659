"""Simulated multi-stage intrusion campaigns and a learned stage-aware defender.

Pipeline: playbook campaign -> per-window telemetry -> provenance graph ->
GNN embedding -> LSTM stage belief -> hierarchical PPO policy.
"""

__version__ = "0.1.0"
