"""Bind virtual TPM PCRs to a simulated hardware TPM.

Two binding schemes are provided: a binary hash tree whose root lives in a
hardware PCR, and an incremental hash accumulated modulo a large prime.
"""

__version__ = "0.1.0"
