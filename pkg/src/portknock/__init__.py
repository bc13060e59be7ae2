"""Port knocking and single packet authorization, with a deterministic network
simulator and a behavior-checked comparison of access-control designs."""

__version__ = "0.1.0"
