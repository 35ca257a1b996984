"""Occupancy-gated neural radar fields for dynamic scenes.

Submodules: ``core`` (geometry), ``dataio`` (sequence files), ``synth``
(synthetic scenes), ``diffcore`` (autodiff and Adam), ``field`` (the neural
field), ``train``, ``evaluation`` and ``cli``.
"""

__version__ = "0.1.0"
