"""On-disk layout shared by the pipeline stages.

::

    manifest.txt          scene source, seed, k, hashes
    sparse/               cameras.txt images.txt points3D.txt matches.txt
    images/               ground-truth images, named as in images.txt
    gt/                   generator Gaussians (synthetic scenes only)
    graph/edges.txt
    partition/            partition.txt, regions.ppm
    regions/<i>/          gaussians.tggs, loss.csv, stamp.txt
    global/               gaussians.tggs, loss.csv, stamp.txt
    renders/<mode>/       <view id>.ppm (+ sidecars with --buffers)
    reports/              eval.txt, eval.csv, timing.txt

Every trained set carries a stamp with the hash of the config that produced
it; downstream stages refuse to mix stamps unless forced.
"""
from __future__ import annotations

import hashlib
import time
from pathlib import Path

from .errors import WorkspaceError
from .optim.train import holdout_split
from .scene_io import load_sparse_dir, read_image, read_kv, write_kv


def file_digest(paths):
    h = hashlib.sha256()
    for p in paths:
        p = Path(p)
        if p.exists():
            h.update(p.name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()[:16]


class Workspace:
    def __init__(self, root):
        self.root = Path(root)

    # -- paths -------------------------------------------------------------
    @property
    def manifest_path(self):
        return self.root / "manifest.txt"

    @property
    def sparse_dir(self):
        return self.root / "sparse"

    @property
    def images_dir(self):
        return self.root / "images"

    @property
    def partition_path(self):
        return self.root / "partition" / "partition.txt"

    def region_dir(self, i):
        return self.root / "regions" / str(i)

    @property
    def global_dir(self):
        return self.root / "global"

    def render_dir(self, mode):
        return self.root / "renders" / mode

    @property
    def reports_dir(self):
        return self.root / "reports"

    # -- manifest ----------------------------------------------------------
    def exists(self):
        return self.manifest_path.exists()

    def manifest(self):
        if not self.exists():
            raise WorkspaceError(f"{self.root} is not a workspace (no manifest.txt)")
        return {k: v for k, (v, _) in read_kv(self.manifest_path).items()}

    def update_manifest(self, **values):
        m = self.manifest() if self.exists() else {}
        m.update({k: str(v) for k, v in values.items()})
        self.root.mkdir(parents=True, exist_ok=True)
        write_kv(m, self.manifest_path)
        return m

    # -- stamps ------------------------------------------------------------
    @staticmethod
    def write_stamp(directory, **values):
        Path(directory).mkdir(parents=True, exist_ok=True)
        write_kv({k: str(v) for k, v in values.items()}, Path(directory) / "stamp.txt")

    @staticmethod
    def read_stamp(directory):
        p = Path(directory) / "stamp.txt"
        if not p.exists():
            return {}
        return {k: v for k, (v, _) in read_kv(p).items()}

    def check_stamp(self, directory, key, expected, force=False):
        got = self.read_stamp(directory).get(key)
        if got is not None and got != expected and not force:
            raise WorkspaceError(
                f"{directory} was produced with {key} {got}, current is {expected} (use --force to override)"
            )

    # -- loading -----------------------------------------------------------
    def load_model(self):
        if not (self.sparse_dir / "cameras.txt").exists():
            raise WorkspaceError(f"no sparse model in {self.sparse_dir}")
        return load_sparse_dir(self.sparse_dir)

    def load_images(self, model, ids=None):
        out = {}
        for v in model.views:
            if ids is not None and v.id not in ids:
                continue
            name = v.image_ref or f"view_{v.id:04d}.ppm"
            out[v.id] = read_image(self.images_dir / name)
        return out

    def scene_hash(self):
        return file_digest(sorted(self.sparse_dir.glob("*.txt")))

    def log_timing(self, stage, seconds):
        self.reports_dir.mkdir(parents=True, exist_ok=True)
        with open(self.reports_dir / "timing.txt", "a", encoding="utf-8") as fh:
            fh.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} {stage} {seconds:.3f}s\n")


def parse_view_spec(spec, model, holdout_every):
    """``test`` (held-out split), ``all`` or a comma list of view ids."""
    ids = model.view_ids
    if spec == "all":
        return list(ids)
    if spec == "test":
        _, test = holdout_split(ids, holdout_every)
        return test
    try:
        wanted = [int(t) for t in spec.split(",") if t.strip()]
    except ValueError:
        raise WorkspaceError(f"bad view list {spec!r}") from None
    unknown = sorted(set(wanted) - set(ids))
    if unknown:
        raise WorkspaceError(f"unknown view ids {unknown}")
    return wanted

