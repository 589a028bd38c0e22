"""Split-inference privacy toolkit: frequency-domain input reduction, bottleneck-regularized
split training, closed-form Gaussian noise calibration, reconstruction attacks and a wire protocol."""

__version__ = "0.1.0"
