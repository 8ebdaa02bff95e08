"""Transfer-learned kidney detection on synthetic ultrasound phantoms."""

__version__ = "0.1.0"
