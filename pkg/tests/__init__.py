"""Tests for fracti."""
