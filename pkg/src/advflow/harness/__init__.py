"""Experiment orchestration: configs, toy tasks, run drivers and the CLI."""
