"""Reference-free sex obfuscation for speech, with attacker-model evaluation."""

__version__ = "0.1.0"
