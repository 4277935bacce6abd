"""Bridge-diffusion translation of MR/US phantoms to a shared intermediate modality."""

__version__ = "0.1.0"
