"""Test suite for the clothloop package."""
