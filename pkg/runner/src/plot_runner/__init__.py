"""plot-runner: execute one generated plotting script against one dataset
under resource limits, producing chart.png, details.json, and status.json."""

__version__ = "0.1.0"
