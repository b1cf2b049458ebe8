"""Polynomial-chaos uncertainty propagation and chance-constrained stochastic MPC.

The package is organized bottom-up: univariate orthonormal families
(:mod:`polychaos.orthopoly`), multivariate total-degree bases and triple
products (:mod:`polychaos.multibasis`), chaos-vector algebra
(:mod:`polychaos.pce`), intrusive Galerkin propagation plus Monte Carlo
reference (:mod:`polychaos.propagate`), chance-constraint surrogates
(:mod:`polychaos.chance`), the stochastic MPC engine with its cone solver
(:mod:`polychaos.smpc`), moment-matching Bayesian updates
(:mod:`polychaos.estimate`) and the scenario CLI (:mod:`polychaos.cli`).
"""

from polychaos.orthopoly import (
    DegenerateMeasureError,
    MeasureDescriptor,
    PolynomialFamily,
    QuadratureRule,
    build_family,
    eval_poly,
    gauss_rule,
    inner_product,
    stieltjes_family,
)
from polychaos.multibasis import (
    TotalDegreeBasis,
    TripleProductTensor,
    eval_basis,
    monomial_to_basis,
    total_degree_basis,
    triple_products,
)
from polychaos.pce import PceVector

__version__ = "0.1.0"

__all__ = [
    "DegenerateMeasureError",
    "MeasureDescriptor",
    "PolynomialFamily",
    "QuadratureRule",
    "build_family",
    "eval_poly",
    "gauss_rule",
    "inner_product",
    "stieltjes_family",
    "TotalDegreeBasis",
    "TripleProductTensor",
    "eval_basis",
    "monomial_to_basis",
    "total_degree_basis",
    "triple_products",
    "PceVector",
    "__version__",
]
