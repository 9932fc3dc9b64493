"""Control-based continuation laboratory."""
