"""Deterministic federated-learning simulator.

Implements the FedOAED round protocol (local SGD with on-device
autoencoder denoising of parameter deltas) alongside FedAvg, FedProx,
MIFA and FedVARP baselines, with Non-IID partitioners and a CSV-emitting
experiment CLI.
"""

__version__ = "0.1.0"
