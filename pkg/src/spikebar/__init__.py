"""Spiking networks on memory crossbar arrays with 1-bit partial-sum readout.

Simulates crossbar inference at the cell level (bit-sliced weights, wordline
activation, sense-amplifier / multi-bit ADC sampling, shift-add), trains
models with the matching three-stage hardware-aware pipeline, and estimates
first-order energy/latency of the mapped network.
"""

__version__ = "0.1.0"
