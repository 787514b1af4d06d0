"""
Run manifest: the artifacts a pipeline produced, their SHA-256 and the
configuration they were built with. Downstream commands verify their inputs
against it before running.
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional

from .errors import ArtifactFormatError, StaleArtifactError

logger = logging.getLogger(__name__)

MANIFEST_NAME = "run_manifest.json"
MANIFEST_VERSION = 1


def file_sha256(path: Path) -> str:
    """SHA-256 of a file's bytes."""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def default_manifest_path(out: Optional[Path]) -> Path:
    """``run_manifest.json`` next to ``out`` (or in the working directory)."""
    if out is None:
        return Path(MANIFEST_NAME)
    return Path(out).parent / MANIFEST_NAME


class RunManifest:
    """Manages the artifact entries of one pipeline run."""

    def __init__(self, path: Path):
        """
        Initialize the manifest, loading it when the file exists.

        Args:
            path: Manifest JSON file
        """
        self.path = Path(path)
        self.artifacts: Dict[str, Dict[str, Any]] = {}
        if self.path.exists():
            self._load()

    def _load(self):
        try:
            with open(self.path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ArtifactFormatError(f"{self.path}: manifest is not valid JSON ({e.msg})") from e
        if not isinstance(data, dict) or data.get("version") != MANIFEST_VERSION:
            raise ArtifactFormatError(f"{self.path}: unsupported manifest version")
        self.artifacts = dict(data.get("artifacts", {}))

    @staticmethod
    def _key(path: Path) -> str:
        return Path(path).as_posix()

    def record(self, name: str, path: Path, config: Optional[Dict[str, Any]] = None) -> str:
        """
        Record an artifact that was just written and save the manifest.

        Args:
            name: Artifact role (vocab, model, lm, responses, index, ...)
            path: Artifact file
            config: Settings snapshot the artifact was built with

        Returns:
            The artifact's SHA-256
        """
        sha = file_sha256(path)
        self.artifacts[self._key(path)] = {"name": name, "sha256": sha, "config": config or {}}
        self.save()
        logger.info("recorded %s %s (sha256 %s)", name, path, sha[:12])
        return sha

    def verify(self, path: Path) -> Optional[str]:
        """
        Check an input artifact against its recorded hash.

        Args:
            path: Artifact file about to be read

        Returns:
            The verified SHA-256, or None when the file is not in the manifest

        Raises:
            StaleArtifactError: the file changed since it was recorded
        """
        entry = self.artifacts.get(self._key(path))
        if entry is None:
            logger.warning("%s is not recorded in %s; skipping hash check", path, self.path)
            return None
        actual = file_sha256(path)
        if actual != entry["sha256"]:
            raise StaleArtifactError(path, entry["sha256"], actual)
        return actual

    def entry(self, path: Path) -> Optional[Dict[str, Any]]:
        return self.artifacts.get(self._key(path))

    def save(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        data = {"version": MANIFEST_VERSION, "artifacts": self.artifacts}
        with open(self.path, "w", encoding="utf-8", newline="\n") as f:
            json.dump(data, f, indent=2, sort_keys=True)
            f.write("\n")
