"""Per-stage JSON manifests forming a provenance chain from graph to metric."""

import hashlib
import json
import os

from .errors import DependencyError


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def require_artifact(path, produced_by: str):
    if not os.path.exists(path):
        raise DependencyError(
            f"missing required artifact {path} (produced by the {produced_by} stage)"
        )
    return str(path)


def manifest_path(out_dir, stage) -> str:
    return os.path.join(out_dir, f"{stage}.manifest.json")


def write_manifest(out_dir, stage, config, seed, inputs, outputs, seconds,
                   metrics=None) -> str:
    doc = {
        "stage": stage,
        "config": config,
        "seed": seed,
        "inputs": {name: {"path": str(p), "sha256": sha256_file(p)}
                   for name, p in inputs.items()},
        "outputs": {name: {"path": str(p), "sha256": sha256_file(p)}
                    for name, p in outputs.items()},
        "wall_clock_seconds": seconds,
        "metrics": metrics or {},
    }
    path = manifest_path(out_dir, stage)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
    return path


def read_manifest(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def staleness_warnings(upstream_manifest: dict, current_inputs: dict) -> list:
    """Hash mismatches between an upstream stage's recorded inputs and the
    files as they exist now; warnings only, never fatal."""
    notes = []
    recorded = {**upstream_manifest.get("inputs", {}),
                **upstream_manifest.get("outputs", {})}
    for name, path in current_inputs.items():
        for rec_name, rec in recorded.items():
            if os.path.abspath(rec["path"]) == os.path.abspath(str(path)):
                if os.path.exists(path) and sha256_file(path) != rec["sha256"]:
                    notes.append(
                        f"{path} changed since the {upstream_manifest.get('stage')} "
                        f"stage recorded it"
                    )
    return notes
