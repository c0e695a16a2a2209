"""Integration test __init__."""
