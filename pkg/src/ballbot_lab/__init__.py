"""Ballbot simulation laboratory.

Stabilize an unstable, underactuated ball-balancing robot with a double
control loop, identify its linear dynamics from closed-loop data, and track
position references with a dual-mode LQR + MPC stack, all against a
synthetic plant.

Conventions: positions in cm, angles in degrees, time in seconds, motor
commands in ticks/s. State vectors are numpy arrays ordered
[y, theta, ydot, thetadot].
"""

from . import control, excitation, harness, numerics, plant, qp, stabilizer, sysid
from .errors import (BallbotLabError, ConfigError, IdentificationFailedError,
                     MassMatrixSingularError, PlantBlowUpError,
                     PlantFellOverError, StabilizabilityError)

__version__ = "0.1.0"

__all__ = [
    "control", "excitation", "harness", "numerics", "plant", "qp",
    "stabilizer", "sysid",
    "BallbotLabError", "ConfigError", "IdentificationFailedError",
    "MassMatrixSingularError", "PlantBlowUpError", "PlantFellOverError",
    "StabilizabilityError",
]
