"""Test package for the sequence-model laboratory."""
