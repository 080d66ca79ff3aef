"""Desk-scale NMS-free anchor-free detector with a positive sample selector head.

Submodules are imported lazily by their users; importing the package itself
stays cheap so the command line starts fast.
"""

__version__ = "0.1.0"
