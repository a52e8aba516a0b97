"""Injury-severity classification toolkit: CART trees with surrogate splits,
a backprop + conjugate-gradient perceptron, and a planted-rule data generator."""

__version__ = "0.1.0"
