"""Gaussian-splat reconstruction of gridded precipitation fields."""

__version__ = "0.1.0"

from .core import (GaussianSet, Gaussian2D, GridField, GridSpec, MISSING, Quality, StationObs,
                   StationSet, read_gaussians, read_grid, read_stations, resample, write_gaussians,
                   write_grid, write_stations)
from .exceptions import DataError, NumericalError, RainsplatError
from .fit import FitConfig, FitResult, GaussianSplatRegressor, fit, init_gaussians, total_loss
from .interp import (BarnesConfig, BarnesInterpolator, KrigingInterpolator, MQConfig,
                     MultiquadricInterpolator, VariogramModel, barnes, fit_variogram, kriging,
                     multiquadric)
from .sample import (RainfallAwareSampler, SamplePoint, SamplingConfig, draw_points,
                     sampling_distribution, support_mask)
from .splat import RenderConfig, RenderGradient, render_dense, render_gradient, render_points, render_selective
from .synth import SynthConfig, synth_scene, synth_stations
from .verify import EvalReport, contingency, csi, eval_report, far, fss, pod, psd_radial, rmse

__all__ = [name for name in dir() if not name.startswith("_")]
