class ValidationError(ValueError):
    """Input violates a documented precondition (bad shape, range, or file)."""
