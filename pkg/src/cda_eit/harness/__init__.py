"""Command-line harness: configuration, experiment drivers and exporters."""
