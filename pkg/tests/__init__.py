"""Tests for probeforge."""
