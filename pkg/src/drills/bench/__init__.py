"""Benchmark suite, experiment runner, checkpoints and plot data."""
