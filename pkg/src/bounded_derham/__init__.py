"""Bounded de Rham cohomology in top degree versus coinvariants of bounded functions."""
__version__ = "0.1.0"
