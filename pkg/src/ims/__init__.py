"""Backdoor mitigation by pruning with selective invertible channel masks."""

__version__ = "0.1.0"
