"""Gas-release source localization from sparse sensor readings.

Couples a 2-D incompressible flow solver with an advection-diffusion gas
solver, trains per-window neural surrogates of the sensor response, and
inverts sensor streams with a sequential importance resampling filter.
"""

__version__ = "0.1.0"
