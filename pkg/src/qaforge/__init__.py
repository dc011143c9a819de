"""qaforge: SQuAD-style QA generation, filtration and diagnostics engine."""

__version__ = "0.1.0"
