"""Learn a forced Koopman model of the mean-field wake and steer it to rest.

Training uses one long chirp-driven run cut into 1600 windows of 32 steps.
The model then drives a receding-horizon controller that pushes the state
from the limit cycle towards the unstable fixed point. A proportional
controller on the y sensor is shown for comparison, with a well-placed sensor
and with one rotated by pi.

Run with ``python3 demos/wake_control.py`` (about two minutes).
"""

import numpy as np

from deepkoopman import control, envs, koopman

env = envs.MeanFieldWake()
data = envs.generate_training_data(env, envs.ChirpSchedule(), 4238, 32, 1600,
                                   rng=np.random.Generator(np.random.PCG64(0)))
model, history = koopman.fit_model(data, koopman.TrainingConfig(latent_dim=16, epochs=150, tikhonov_eps=1e-2))
print(f"trained: final loss {history[-1]:.4f}, |B| = {np.linalg.norm(model.B):.3f}")

uncontrolled = np.sqrt(env.sigma) * env.omega
cfg = control.MpcConfig(R_scale=5.0)
run = control.run_mpc_loop(env, model, cfg, 500)
print(f"MPC (R = {run.R:.1f}):")
for step in (0, 100, 200, 300, 400, 500):
    print(f"  step {step:3d}  residual {run.residuals[step] / uncontrolled:6.1%} of the limit cycle")
r = control.correlation(run.inputs[cfg.warmup:], -0.4 * run.sensor[cfg.warmup:-1])
print(f"  correlation of the MPC input with -0.4 * sensor: {r:.3f}")

for phase in (0.0, np.pi):
    p = control.run_pcontrol_loop(env, control.PControlConfig(sensor=envs.Sensor(phase)), 2000)
    print(f"proportional control, sensor phase {phase:.2f}: final residual {p.residuals[-1]:.2e} "
          f"({p.residuals[-1] / uncontrolled:.1%} of the limit cycle)")
