"""Simultaneous NMT with an adaptive ``<wait>`` token trained by CTC and a delay penalty."""

__version__ = "0.1.0"
