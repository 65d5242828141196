"""chartforge: table-to-chart generation with validation-driven refinement,
typed chart QA, and a chart-level-bootstrap evaluation harness."""

__version__ = "0.1.0"
