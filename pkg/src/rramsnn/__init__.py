"""Hardware-calibrated spiking networks on a simulated analog RRAM crossbar."""

__version__ = "0.1.0"
