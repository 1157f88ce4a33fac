"""Click-aware structure transfer with sample reweighting for conversion-rate prediction (numpy)."""

__version__ = "0.1.0"
