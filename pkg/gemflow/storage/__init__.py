# Storage module for GemFlow
