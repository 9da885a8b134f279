"""Miniature trainable reference network and experiment harness."""
