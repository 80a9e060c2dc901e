"""Peak-stress prediction in synthetic polycrystals."""
__version__ = "0.1.0"
