"""Benchmark experiments and their command-line entry point."""
