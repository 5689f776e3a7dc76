"""Utility modules for clothloop."""
