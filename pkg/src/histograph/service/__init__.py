"""HTTP service wrapping the toolkit; the CLI is a thin client of this app."""

from histograph.service.app import create_app

__all__ = ["create_app"]
