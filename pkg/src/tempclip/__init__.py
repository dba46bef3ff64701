"""Toy video-text encoder: windowed temporal attention on an image transformer,
fine-tuning regularised along the segment back to the pretrained weights,
running weight averages and test-time weight patching."""

__version__ = "0.1.0"
