"""Multi-granular self-distillation with a bidirectional selective SSM encoder."""

__version__ = "0.1.0"
