"""Tests for the CroPA workbench."""
