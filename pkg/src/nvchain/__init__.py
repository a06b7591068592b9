"""Emotion-chain regression of ten emotion scores from vocal-burst features."""

__version__ = "0.1.0"
