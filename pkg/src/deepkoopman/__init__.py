"""Deep Koopman dynamical models with least-squares latent dynamics and MPC.

Modules
-------
numerics    dense linear algebra: Jacobi SVD, pseudoinverse, ridge solves, expm
autodiff    tape-based reverse-mode differentiation
nets        dense networks, L2 penalty, Adam
koopman     Deep Koopman model: training, prediction, metrics
envs        surrogate systems (oracle, mean-field wake), RK4, data generation
control     condensed-QP model predictive control and proportional feedback
baselines   raw-state DMD and the single-step-trained variant
evaluation  forecasting harness shared by models and baselines
io          dataset, checkpoint and log file formats
config, cli experiment driver
"""

__version__ = "0.1.0"
