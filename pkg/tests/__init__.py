"""Tests for borderlab."""
