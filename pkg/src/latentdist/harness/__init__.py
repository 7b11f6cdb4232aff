"""Experiment drivers, reports and the command line interface."""
