"""Unit tests for the Sparse-Tuning engine."""
