"""Shipped templates, schemas, scenarios, corpus and golden files."""
