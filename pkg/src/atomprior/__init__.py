"""Maximum-mutual-information priors and bias audits for sloppy models."""

__version__ = "0.1.0"
