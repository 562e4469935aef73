"""Compliance test generation for tool-calling agents.

Tool schemas plus temporal safety rules in, executable ground-truth traces,
masked instructions and a dual-oracle grader out.
"""

__version__ = "0.1.0"
