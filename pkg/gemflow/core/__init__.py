# Numerical core for GemFlow
