"""Unit test __init__."""
