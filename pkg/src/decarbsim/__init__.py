"""Agent-based decarbonization scenario simulator.

Link-network microsimulation with IDM car following, opMode emission
lookup, eco-driving, user-equilibrium / myopic / anticipatory routing and
an attention-based link-state predictor, plus the scenario matrix, costing
and reporting built on top of them.
"""

__version__ = "0.1.0"
