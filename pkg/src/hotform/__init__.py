"""Reduced-order temperature estimation for hot sheet forming.

Modules
-------
scenario
    Sheet mesh, time grid, synthetic tool kinematics and sensors.
fom
    Finite-element heat conduction with contact-dependent surface exchange.
rom
    Snapshot POD, Galerkin projection and the linear time-varying schedule.
estimator
    Extended Kalman filter with disturbance augmentation.
properties
    Hardness proxy from the estimated temperature history.
experiment, evaluation, cli
    Pipeline stages, acceptance checks and the command line.
"""

__version__ = "0.1.0"
