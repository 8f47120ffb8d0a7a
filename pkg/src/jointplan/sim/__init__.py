"""Closed-loop 2D world: lanes, scripted traffic, scenarios, episodes and metrics."""
