"""Batch harness: pipeline glue, experiment runs, reports and the CLI."""
