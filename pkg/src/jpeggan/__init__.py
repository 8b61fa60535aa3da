"""jpeggan: a GAN that synthesizes JPEG images in the compressed domain.

The generator emits quantized block-DCT coefficients; a differentiable
decoder turns them into pixels for the critic.  The package also ships the
reference codec, a baseline JFIF bitstream writer/reader, Frechet-distance
evaluation, and a CLI.
"""

__version__ = "0.1.0"

from . import tensor  # noqa: F401
