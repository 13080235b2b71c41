"""Random interlacements, soft local times and couplings on transitive graphs."""

__version__ = "0.1.0"
