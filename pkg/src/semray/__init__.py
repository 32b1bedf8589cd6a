"""semray: a desk-scale generalizable semantic field renderer.

Multi-view posed images go in; semantic class maps and RGB renders of novel
viewpoints come out.  Everything differentiable runs on the tape autodiff
core in :mod:`semray.autodiff`, so the whole pipeline is finite-difference
checkable.

Kept import-light on purpose: submodules pull in numpy lazily so the CLI can
configure thread limits before any array library loads.
"""

__version__ = "0.1.0"
