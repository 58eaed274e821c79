"""Band-gap regression from text renderings of crystal records."""

__version__ = "0.1.0"
