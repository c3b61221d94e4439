"""Double-loop balancing controllers and their closed-loop composition.

The outer loop turns the measured state into a reference ball speed; the
inner loop (discrete PID, or plain P during identification experiments)
turns the speed error into a motor command. Composing the plant with the
P-only loop gives the closed-loop system that the identification stage fits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import ContinuousSS, DiscreteSS
from .plant import LinearParams, build_linear_ss

__all__ = [
    "FeedbackGains", "PidState",
    "outer_reference", "pid_step", "p_step",
    "feedback_row", "closed_loop_matrices", "reduced_closed_loop",
    "discrete_closed_loop",
]


@dataclass
class FeedbackGains:
    """Outer-loop state feedback plus inner-loop controller gains.

    Defaults are the hand-tuned balancing set of the reference robot. Note
    that ``identification()`` below raises the tilt-rate gain: with the
    reference model constants, the plain-P inner loop is not stabilized by
    the balancing value of k_thetadot (the PID derivative term was supplying
    that damping), so identification experiments use the retuned value.
    """

    k_y: float = 0.0
    k_theta: float = 1.2
    k_ydot: float = 1.1
    k_thetadot: float = 0.005
    kp: float = 300.0
    KP: float = 180.0
    KI: float = 830.0
    KD: float = 50.0

    @classmethod
    def identification(cls) -> "FeedbackGains":
        """Outer gains for the P-only identification loop (k_thetadot retuned)."""
        return cls(k_thetadot=0.12)

    def outer_vector(self) -> np.ndarray:
        return np.array([self.k_y, self.k_theta, self.k_ydot, self.k_thetadot])


@dataclass
class PidState:
    """Inner-loop PID memory: integrated speed error and previous speed error."""

    e_y_accum: float = field(default=0.0)
    e_ydot_prev: float = field(default=0.0)

    def reset(self):
        self.e_y_accum = 0.0
        self.e_ydot_prev = 0.0


def outer_reference(gains: FeedbackGains, x) -> float:
    """Reference ball speed from weighted state feedback (cm/s)."""
    x = np.asarray(x, dtype=float)
    return float(gains.outer_vector() @ x)


def pid_step(state: PidState, e_ydot: float, gains: FeedbackGains, Ts: float) -> float:
    """One discrete PID update on the speed error; mutates `state`.

    Backward-difference derivative, rectangular integration, no anti-windup
    and no derivative filtering.
    """
    if Ts <= 0:
        raise ValueError("Ts must be positive")
    state.e_y_accum += e_ydot * Ts
    e_yddot = (e_ydot - state.e_ydot_prev) / Ts
    state.e_ydot_prev = e_ydot
    return gains.KP * e_ydot + gains.KI * state.e_y_accum + gains.KD * e_yddot


def p_step(kp: float, e_ydot: float) -> float:
    """Plain proportional inner loop used during identification."""
    return kp * e_ydot


def feedback_row(gains: FeedbackGains) -> np.ndarray:
    """Net state-to-speed-error row F = [0, k_theta, k_ydot - 1, k_thetadot].

    The -1 comes from the speed error e = ydot_ref - ydot; the leading zero
    reflects k_y = 0 (position does not enter the balance loop).
    """
    return np.array([0.0, gains.k_theta, gains.k_ydot - 1.0, gains.k_thetadot])


def closed_loop_matrices(lp: LinearParams, gains: FeedbackGains):
    """Continuous closed loop of plant + outer feedback + inner P gain.

    Returns (A_cl, B_cl, A_cl_reduced, B_cl_reduced) with
    A_cl = A + B kp F and B_cl = B kp, where the external excitation enters
    the speed-error summation. The reduced variant drops the position state,
    which is valid because the first column of A and the first entry of F
    are both zero.
    """
    ss = build_linear_ss(lp)
    F = feedback_row(gains)
    A_cl = ss.A + gains.kp * np.outer(ss.B[:, 0], F)
    B_cl = gains.kp * ss.B.copy()
    keep = np.ix_([1, 2, 3], [1, 2, 3])
    return A_cl, B_cl, A_cl[keep], B_cl[[1, 2, 3], :]


def reduced_closed_loop(lp: LinearParams, gains: FeedbackGains) -> ContinuousSS:
    """Three-state closed loop (theta, ydot, thetadot) driven by the excitation."""
    _, _, A_r, B_r = closed_loop_matrices(lp, gains)
    return ContinuousSS(A_r, B_r)


def discrete_closed_loop(dss: DiscreteSS, gains: FeedbackGains) -> DiscreteSS:
    """Discrete-level loop composition, matching the executed sampled loop.

    The digital controller holds u = kp (F x_k + d_k) over each period, so
    the realized transition is A_d + kp B_d F with input matrix kp B_d. For
    a 3-state DiscreteSS the reduced feedback row is used.
    """
    n = dss.n_states
    F = feedback_row(gains)
    if n == 3:
        F = F[1:]
    elif n != 4:
        raise ValueError("expected a 3- or 4-state system")
    A = dss.A_d + gains.kp * np.outer(dss.B_d[:, 0], F)
    B = gains.kp * dss.B_d.copy()
    return DiscreteSS(A, B, dss.Ts)
