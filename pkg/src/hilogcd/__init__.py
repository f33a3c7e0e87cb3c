"""Generalized category discovery under domain shift: HiLo, HLPrompt and VLPrompt at desk scale."""

__version__ = "0.1.0"
