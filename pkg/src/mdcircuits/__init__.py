"""Tractable circuits with structural marginal determinism."""
