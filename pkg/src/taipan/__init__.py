"""Transfer-based multiple sensitive attribute inference attacks on graphs."""
