"""Acoustic source localization and quantification toolkit.

Simulates microphone-array recordings of white-noise point sources, runs
classical frequency-domain beamformers (DAS, DAMAS, CLEAN-PSF, CLEAN-SC,
FFT-FISTA) and a numpy multi-branch CNN with structural re-parameterization,
and scores every method with the same localization / SPL metrics.
"""

__version__ = "0.1.0"
