"""Thread-aware grey-box fuzzing over a deterministic concurrent mini-IR VM."""

from .mtir import Program, load_program, parse_program

__version__ = "0.1.0"

__all__ = ["Program", "load_program", "parse_program", "__version__"]
