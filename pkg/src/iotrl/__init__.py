"""Transformer-encoded PPO for IoT device scheduling, on a deterministic stack.

Everything below the public CLI is seeded and counter-based: same seed, same
bytes out. See the README for the module map.
"""

__version__ = "0.1.0"
