"""Physically robust adversarial face images against presentation attack detectors.

Toy-scale harness: synthetic faces, a simulated print/replay recapture
channel, CDC-based PAD classifiers, a live-to-spoof CycleGAN simulator and a
perturbation generator trained against the PAD.
"""

__version__ = "0.1.0"
