"""bpplab: bit-depth-squeezing Trojan triggers, poisoned training of a
small from-scratch CNN, and a defense harness (STRIP, GradCAM, Neural
Cleanse, fine-pruning, spectral signature)."""

__version__ = "0.1.0"
