"""Point-cloud classification with sparse edge convolutions.

The package trains a small graph network over raw 3-d point clouds and
explains its decisions by attributing the max-pooled global feature back
to individual points.
"""

__version__ = "0.1.0"
