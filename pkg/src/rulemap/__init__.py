"""Lane and traffic-rule map construction toolkit: codec, segment pipeline and evaluation."""

__version__ = "0.1.0"
