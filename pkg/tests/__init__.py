"""
Test suite for the trajmask toolkit.

This package contains all test modules and fixtures, covering:
- Stop-point types and normalization
- Ingestion, staypoint detection and synthetic generation
- Mask plans, the encoder, losses and the optimizer
- Evaluation metrics, reports and the command line
"""

import os
import sys

# Add parent directory to Python path for imports
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))
