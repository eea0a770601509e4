"""Adversarial state perturbations against RL energy management of extended-range electric delivery vehicles."""
from .agents import DqnAgent, IqnAgent, load_agent, save_agent
from .attacks import AttackConfig, StateAttack, apply_attack
from .envsim import FleetEnv, RewardParams, TripProfile, VehicleParams, load_trips, synthesize_trips
from .harness import evaluate_fleet, run_episode, run_sweep

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "DqnAgent", "FleetEnv", "IqnAgent", "RewardParams", "StateAttack", "TripProfile",
    "VehicleParams", "apply_attack", "evaluate_fleet", "load_agent", "load_trips", "run_episode", "run_sweep",
    "save_agent", "synthesize_trips",
]
