"""Geometric multigrid for Stokes with vertex-patch smoothers.

The local saddle-point problems of the multiplicative vertex-patch smoother
are solved inexactly by p-multigrid methods (Braess-Sarazin smoothing on the
full system, block preconditioners on the velocity block, or blockwise Schur
elimination with fast diagonalization on Cartesian patches).  The ``bench``
module and the ``stokesmg-bench`` CLI drive iteration-count studies on single
patches and on global mesh hierarchies.
"""

__version__ = "0.1.0"
