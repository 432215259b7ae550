"""Runtime-monitored interactive imitation learning on a 2D slot-insertion bench."""

__version__ = "0.1.0"
