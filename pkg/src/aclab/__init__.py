"""Off-policy actor-critic laboratory: exact MDP oracles, multi-step TD critic, policy update rules."""

__version__ = "0.1.0"
