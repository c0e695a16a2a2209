"""Pytest __init__."""
