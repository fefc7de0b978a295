"""Diagonal short-time heat-kernel expansions on CR manifolds.

Exact Folland-Stein jets (:mod:`crheat.poly`, :mod:`crheat.models`,
:mod:`crheat.normal`) combined with a Monte Carlo Wiener-functional engine
(:mod:`crheat.wiener`, :mod:`crheat.heat`).
"""

__version__ = "0.1.0"
