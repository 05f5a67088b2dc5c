"""Run manifests: input/output hashes, rules, seed and versions, no timestamps."""
from __future__ import annotations

import json
import os
import platform
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy

from .io import dumps, sha256_file

MANIFEST_NAME = "manifest.json"


def module_versions() -> dict:
    from .. import __version__

    return {
        "regfp": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "python": platform.python_version(),
    }


@dataclass
class RunManifest:
    command: str
    seed: int
    inputs: dict = field(default_factory=dict)  # path -> sha256
    outputs: dict = field(default_factory=dict)  # file name -> sha256
    rules: dict = field(default_factory=dict)
    versions: dict = field(default_factory=module_versions)

    def add_inputs(self, paths):
        for p in paths:
            if p is not None:
                self.inputs[str(p)] = sha256_file(p)

    def add_outputs(self, paths):
        for p in paths:
            self.outputs[os.path.basename(p)] = sha256_file(p)

    def write(self, output_dir) -> str:
        path = os.path.join(output_dir, MANIFEST_NAME)
        with open(path, "w") as fh:
            fh.write(dumps(asdict(self)))
        return path


def read_manifest(path) -> RunManifest:
    with open(path) as fh:
        return RunManifest(**json.load(fh))


def verify_manifest(path) -> list:
    """Return the files whose current hash differs from the recorded one (empty when all verify)."""
    m = read_manifest(path)
    base = os.path.dirname(os.path.abspath(path))
    bad = []
    for p, h in m.inputs.items():
        if not os.path.exists(p) or sha256_file(p) != h:
            bad.append(p)
    for name, h in m.outputs.items():
        p = os.path.join(base, name)
        if not os.path.exists(p) or sha256_file(p) != h:
            bad.append(p)
    return bad
