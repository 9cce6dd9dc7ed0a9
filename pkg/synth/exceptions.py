class SynthError(ValueError):
    """Synthetic-data configuration outside the model's domain."""
