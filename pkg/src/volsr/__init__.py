"""volsr: volumetric super-resolution toolkit.

Dense 3D volumes with a minimal binary container (VBIN), Fourier-domain
degradation for LR/HR pair synthesis, a from-scratch differentiable tensor
core, a 3D residual-dense-block generator with a voxel-level U-Net critic,
patch-based adversarial training, sliding-window inference, and SSIM/PSNR
evaluation.
"""

__version__ = "0.1.0"
