"""Run manifests: the paper trail of every synthesis, evaluation, or bench run.

A manifest is one JSON file per run. It is written the moment the run starts
(status ``running``) and rewritten when the run ends, so a crashed run leaves
an honest partial record rather than nothing, and every CSV or policy file on
disk can be traced to the exact configuration, backend, and seeds that
produced it — enough to reproduce the output byte for byte.
"""

from __future__ import annotations

import json
import platform
import time
from dataclasses import asdict, is_dataclass
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path


def tool_version() -> str:
    try:
        return metadata.version("gtlsynth")
    except metadata.PackageNotFoundError:  # running from a checkout
        return "unpackaged"


def _jsonable(value):
    """Best-effort plain-data view: dataclasses to dicts, paths to strings,
    numpy scalars through item(); anything else must already be plain."""
    if is_dataclass(value) and not isinstance(value, type):
        return {k: _jsonable(v) for k, v in asdict(value).items()}
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, Path):
        return str(value)
    if hasattr(value, "item") and not isinstance(value, (str, bytes)):
        return value.item()
    return value


class RunManifest:
    """Mutable run record flushed to ``path`` on every change of substance."""

    def __init__(self, path, *, command: str, config=None,
                 backend: str | None = None, seeds=None):
        self.path = Path(path)
        self._t0 = time.perf_counter()
        self.data = {
            "tool": f"gtlsynth {tool_version()}",
            "python": platform.python_version(),
            "command": command,
            "created_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "status": "running",
            "config": _jsonable(config),
            "backend": backend,
            "seeds": _jsonable(seeds or {}),
            "timings_s": {},
            "results": [],
        }
        self.flush()

    def merge(self, **fields) -> None:
        """Record extra run facts (solver stats, chosen subsets, sizes...)."""
        for key, value in fields.items():
            self.data[key] = _jsonable(value)
        self.flush()

    def add_timing(self, name: str, seconds: float) -> None:
        self.data["timings_s"][name] = round(float(seconds), 6)

    def add_result(self, path) -> Path:
        """Register an output file; returns the path so call sites can chain
        `print(manifest.add_result(p))`."""
        path = Path(path)
        self.data["results"].append(str(path))
        self.flush()
        return path

    def finalize(self, status: str = "ok", error: str | None = None) -> None:
        self.data["status"] = status
        if error is not None:
            self.data["error"] = error
        self.data["wall_s"] = round(time.perf_counter() - self._t0, 6)
        self.data["finished_utc"] = datetime.now(
            timezone.utc).isoformat(timespec="seconds")
        self.flush()

    def flush(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_suffix(self.path.suffix + ".tmp")
        tmp.write_text(json.dumps(self.data, indent=2, sort_keys=False) + "\n")
        tmp.replace(self.path)
