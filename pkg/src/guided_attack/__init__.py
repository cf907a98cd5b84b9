"""Expert-guided adversarial attacks on DRL driving policies, on a small
built-in traffic simulator."""

__version__ = "0.1.0"
