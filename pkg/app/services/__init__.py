"""Services module for artifact output."""

from app.services.artifact_store import ArtifactStore

__all__ = [
    "ArtifactStore",
]
