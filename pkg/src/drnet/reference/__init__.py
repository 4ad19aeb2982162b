"""Bundled reference data: published baseline rows for the supported datasets."""
