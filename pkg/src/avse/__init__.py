"""Audio-visual speech enhancement with an intelligibility-driven loss.

Subpackages and modules:

- :mod:`avse.dsp` framing, STFT/ISTFT, resampling, octave bands
- :mod:`avse.metrics` STOI family, SI-SDR
- :mod:`avse.autograd` reverse-mode differentiation
- :mod:`avse.losses` MSE, MAE and STOI training objectives
- :mod:`avse.model`, :mod:`avse.train` mask estimator and its training loop
- :mod:`avse.data` WAV I/O and the synthetic corpus
- :mod:`avse.evaluation`, :mod:`avse.cli` experiment harness
"""
from .errors import AvseError, DataError, GradError, NumericError, ShapeError

__version__ = "0.1.0"

__all__ = ["AvseError", "DataError", "GradError", "NumericError", "ShapeError", "__version__"]
