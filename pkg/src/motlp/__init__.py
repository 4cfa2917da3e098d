from .errors import MotlpError

__version__ = "0.1.0"
