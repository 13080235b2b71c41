"""Random streams, statistics and the command-line harness."""
