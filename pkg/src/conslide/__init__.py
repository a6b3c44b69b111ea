"""Continual learning over whole-slide-image feature bags.

Subpackages cover the autodiff engine (`tensor`), the hierarchical
two-scale transformer (`hit`), the region rehearsal buffer (`buro`),
cross-scale similarity learning (`cssl`), the continual training loop
(`harness`), evaluation metrics (`metrics`), data containers and the
synthetic benchmark generator (`data`), and the command line (`cli`).
"""

__version__ = "0.1.0"
