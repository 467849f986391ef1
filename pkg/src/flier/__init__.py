"""Few-shot image classification with diffusion latents as an auxiliary training signal."""
