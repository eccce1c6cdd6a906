"""Counterfactual alignment toolkit."""
