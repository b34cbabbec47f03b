"""Co-evolving attacker/defender simulation for a fluid-antenna port predictor."""

__version__ = "0.1.0"
