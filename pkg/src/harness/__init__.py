"""Task-incremental protocol, continual-learning metrics and run coordination."""
