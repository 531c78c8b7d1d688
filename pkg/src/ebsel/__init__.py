"""Exposure bracketing selection from a single auto-exposure preview.

A selection agent looks at one low-resolution preview and picks K of J
bracketed exposures; a fusion network merges them and rewards the agent
by the PSNR improvement against a classical-fusion reference.
"""

__version__ = "0.1.0"
