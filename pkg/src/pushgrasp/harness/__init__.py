"""Experiment orchestration: configs, checkpoints, CSV metrics, SVG plots and the CLI."""
