"""Tests init file."""
