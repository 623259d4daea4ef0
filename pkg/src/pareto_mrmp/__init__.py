"""Pareto-optimal multi-robot motion planning by multi-grid set-valued value iteration."""
