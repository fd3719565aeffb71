"""Source code for the prefill laboratory."""
