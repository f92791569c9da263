"""Train a latent-space policy to hold the pendulum near a goal angle.

Usage: python3 demos/policy_rollout.py <checkpoint> [goal_angle_rad]

The checkpoint must come from a run with "disentangled": true so the
position block of the latent state is identified with the auxiliary
variables. Prints training progress and closed-loop success statistics
against a random-torque baseline.
"""

import json
import sys

import numpy as np

from ekvae import control, evaluation, model as mdl, pendulum


def main():
    if len(sys.argv) < 2:
        sys.exit(__doc__)
    ckpt = sys.argv[1]
    goal_angle = float(sys.argv[2]) if len(sys.argv) > 2 else 0.0

    model = mdl.load_model(ckpt)
    ds = pendulum.generate_dataset(500, 15, seed=0)
    train, _ = evaluation.split_dataset(ds)

    goal = control.encode_goal_position(model, pendulum.render(goal_angle))
    print(f"goal angle {goal_angle:+.2f} rad -> latent target {goal.value}")

    policy = control.train_policy(
        model, goal, train.frames, train.actions, horizon=15, episodes=300,
        seed=0, log=lambda r: print(f"iter {r['iter']:4d}  "
                                    f"J_val {r['J_val']:+.3f}"))

    stats = control.rollout_on_simulator(model, policy, goal_angle,
                                         episodes=100, T=30, seed=0)
    base = control.rollout_on_simulator(model, control.random_policy(policy.u_max),
                                        goal_angle, episodes=100, T=30, seed=0)
    print("trained policy:", json.dumps(stats, sort_keys=True))
    print("random baseline:", json.dumps(base, sort_keys=True))


if __name__ == "__main__":
    main()
