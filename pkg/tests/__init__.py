"""Tests for markdown Q&A system."""
