"""
mtscan Package
Selective-scan kernels, cross-task decoder blocks and their verification harness
"""

__version__ = "0.1.0"
