"""Toy latent video diffusion super-resolution."""
