"""Rotation-equivariant local feature descriptors with group-aligned invariant mapping."""

__version__ = "0.1.0"
