# Services module for GemFlow
