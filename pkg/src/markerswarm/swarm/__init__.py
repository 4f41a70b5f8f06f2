"""Node orchestration: protocol, drone nodes, ground station, drivers."""

from markerswarm.swarm.runner import run_scenario

__all__ = ["run_scenario"]
