"""Segmentation-free CTC captcha recognition."""
