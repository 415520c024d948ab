"""Audio decoding, log-mel features and dataset preparation."""
