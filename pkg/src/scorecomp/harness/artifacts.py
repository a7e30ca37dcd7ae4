"""Run outputs: tables, graymaps, figures, and the closing manifest.

All writes go through one :class:`Emitter`, which hashes every file as it is
written. ``finalize`` writes ``manifest.json`` last; a directory without a
manifest is an incomplete run. Wall-clock timings live in ``timings.json``,
the one file outside the hashed inventory, so repeated runs produce
byte-identical manifests.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
from pathlib import Path

import numpy as np

from .. import __version__
from ..errors import ScoreCompError
from ..sampler import omega_trace
from ..tensor_core import kron_upsample

MANIFEST = "manifest.json"
TIMINGS = "timings.json"


class ArtifactError(ScoreCompError, OSError):
    pass


def fmt(x) -> str:
    """Shortest round-trip text for a float."""
    return repr(float(x))


def to_gray(weights) -> np.ndarray:
    """Quantise weights in [0, 1] to bytes, rounding half up."""
    w = np.clip(np.asarray(weights, dtype=np.float64), 0.0, 1.0)
    return np.floor(w * 255.0 + 0.5).astype(np.uint8)


def pgm_bytes(weights) -> bytes:
    img = to_gray(weights)
    if img.ndim != 2:
        raise ValueError(f"graymap needs a 2-D map, got shape {img.shape}")
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary graymap")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Emitter:
    def __init__(self, out_dir):
        self.root = Path(out_dir)
        try:
            self.root.mkdir(parents=True, exist_ok=True)
            stale = self.root / MANIFEST
            if stale.exists():
                stale.unlink()
        except OSError as exc:
            raise ArtifactError(f"cannot prepare output directory {self.root}: {exc}") from exc
        self.files: dict[str, dict] = {}

    def write_bytes(self, rel: str, data: bytes) -> Path:
        path = self.root / rel
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(data)
        except OSError as exc:
            raise ArtifactError(f"cannot write {path}: {exc}") from exc
        self.files[rel] = {"sha256": hashlib.sha256(data).hexdigest(), "bytes": len(data)}
        return path

    def write_text(self, rel: str, text: str) -> Path:
        if not text.endswith("\n"):
            text += "\n"
        return self.write_bytes(rel, text.encode("utf-8"))

    def write_csv(self, rel: str, header, rows) -> Path:
        lines = [",".join(header)]
        for row in rows:
            lines.append(",".join(fmt(v) if isinstance(v, (float, np.floating)) else str(v)
                                  for v in row))
        return self.write_text(rel, "\n".join(lines))

    def write_pgm(self, rel: str, weights) -> Path:
        return self.write_bytes(rel, pgm_bytes(weights))

    def write_figure(self, rel: str, fig) -> Path:
        buf = io.BytesIO()
        fig.savefig(buf, format="png", metadata={"Software": None})
        return self.write_bytes(rel, buf.getvalue())

    def finalize(self, kind: str, config: dict, metrics: dict, timings: dict | None = None) -> dict:
        manifest = {
            "engine": {"name": "scorecomp", "version": __version__},
            "kind": kind,
            "config": config,
            "metrics": metrics,
            "timings_file": TIMINGS,
            "files": [{"path": k, **v} for k, v in sorted(self.files.items())],
        }
        try:
            (self.root / TIMINGS).write_text(
                json.dumps(timings or {}, indent=2, sort_keys=True) + "\n", encoding="utf-8")
            tmp = self.root / (MANIFEST + ".tmp")
            tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
            os.replace(tmp, self.root / MANIFEST)
        except OSError as exc:
            raise ArtifactError(f"cannot write manifest in {self.root}: {exc}") from exc
        return manifest


def verify_manifest(out_dir) -> list[str]:
    """Paths whose current hash differs from the manifest (empty if intact)."""
    root = Path(out_dir)
    manifest = json.loads((root / MANIFEST).read_text(encoding="utf-8"))
    bad = []
    for entry in manifest["files"]:
        p = root / entry["path"]
        if not p.exists() or sha256_file(p) != entry["sha256"]:
            bad.append(entry["path"])
    return bad


def weight_map(gated_row, height: int, width: int) -> np.ndarray:
    """Pixel map of one adapter's per-patch weights ``(P,) -> (H, W)``."""
    gated_row = np.asarray(gated_row, dtype=np.float64)
    p = gated_row.size
    if p == 1:
        return np.full((height, width), gated_row[0])
    d = int(round(np.sqrt(height * width / p)))
    return kron_upsample(gated_row.reshape(height // d, width // d), d)


def write_trajectory(em: Emitter, prefix: str, traj, adapter_names, *, map_stride: int = 10,
                     map_trajectory: int = 0, save_latents: int = 16) -> None:
    """Ω trace table, per-step weight graymaps and final latents of one run."""
    n, h, w, c = traj.final.shape
    if traj.has_weights:
        trace = omega_trace(traj)
        rows = [(rec.t, name, trace[k, i])
                for k, rec in enumerate(traj.steps) for i, name in enumerate(adapter_names)]
        em.write_csv(f"{prefix}omega_trace.csv", ("step", "adapter", "mean_weight"), rows)
        if map_stride > 0:
            j = min(map_trajectory, traj.steps[0].omega_gated.shape[0] - 1)
            for k, rec in enumerate(traj.steps):
                if k % map_stride and rec.t != 1:
                    continue
                for i, name in enumerate(adapter_names):
                    em.write_pgm(f"{prefix}maps/step{rec.t:04d}_{name}.pgm",
                                 weight_map(rec.omega_gated[j, i], h, w))
    if save_latents > 0:
        cols = ["trajectory"] + [f"h{a}_w{b}_c{d}" for a in range(h) for b in range(w)
                                 for d in range(c)]
        flat = traj.final[:save_latents].reshape(min(n, save_latents), -1)
        em.write_csv(f"{prefix}final_latents.csv", cols,
                     ([k, *map(float, row)] for k, row in enumerate(flat)))


def emit_artifacts(traj_set, out_dir, adapter_names=None, *, kind="trajectories",
                   config=None, metrics=None, **options) -> dict:
    """Write every trajectory in ``traj_set`` (a name -> Trajectory mapping) and the manifest."""
    em = Emitter(out_dir)
    for name, traj in sorted(traj_set.items()):
        names = (adapter_names or {}).get(name) or [f"adapter{i}" for i in range(traj.n_adapters)]
        write_trajectory(em, f"{name}/", traj, names, **options)
    return em.finalize(kind, config or {}, metrics or {})
