"""Social Value Orientation agents in sequential social dilemmas.

Gridworld environments (HarvestPatch, Cleanup), SVO reward shaping, a
numpy actor-critic learner, population training and behavioral metrics.
"""

__version__ = "0.1.0"
