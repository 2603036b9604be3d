"""Batch OCR pipeline and benchmark harness for multi-column Urdu newspaper scans."""

__version__ = "0.1.0"
