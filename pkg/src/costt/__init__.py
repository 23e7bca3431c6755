"""Consecutive speech transcription and translation (COSTT) at desk scale."""
