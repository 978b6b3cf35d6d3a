"""Text-conditioned human-object interaction generation with contact modeling.

Subpackages:
  geom      rotation algebra, meshes, sampling, proximity queries
  body      simplified differentiable skinned body model
  data      frame/sequence model, synthetic dataset, file formats
  diffkit   float32 tensor substrate with reverse-mode differentiation
  denoiser  conditional denoising network with three-way cross-attention
  diffusion noise schedule, guided sampling, trajectory conditioning
  train     joint training loop and checkpoint selection
  metrics   evaluation protocol (R-Precision, FID, diversity, penetration)
  cli       command-line entry point
"""

__version__ = "0.1.0"
