"""Constraint-family attribution, certified counterfactuals and PAC subsets
for small neural combinatorial-optimization policies."""

__version__ = "0.1.0"
