"""Federated-averaging simulator with layer-wise feature diagnostics."""

__version__ = "0.1.0"
