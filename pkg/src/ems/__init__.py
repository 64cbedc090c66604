"""Push-button management of massive computational experiments.

Packages experiments reproducibly, splits serial grid scripts into independent
jobs, runs them on simulated clusters or a serverless profile, keeps an
immutable bundle provenance graph, and harvests results.
"""

__version__ = "0.1.0"
