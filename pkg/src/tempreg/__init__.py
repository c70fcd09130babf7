"""Learning temporal regularity in video with convolutional and fully connected autoencoders."""

__version__ = "0.1.0"
