"""Arousal-valence controllable multi-speaker TTS."""
