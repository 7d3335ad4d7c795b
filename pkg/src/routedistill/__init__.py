"""Multi-distribution knowledge distillation for neural TSP/CVRP construction policies."""

__version__ = "0.1.0"
