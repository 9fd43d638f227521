"""Sparse-model parsing, covisibility edges, image and sidecar I/O.

The sparse model is read from the COLMAP text layout (``cameras.txt``,
``images.txt``, ``points3D.txt``) plus an optional ``matches.txt`` holding
``<id_a> <id_b> <count>`` lines.
"""
from __future__ import annotations

import itertools
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ImageFormatError, IntegrityError, ParseError, ValidationError
from .geometry import quat_to_rotmat, rotmat_to_quat


@dataclass(frozen=True, eq=False)
class CameraView:
    """Pinhole camera: intrinsics, world-to-camera pose and image size.

    Pixel centres sit at integer coordinates, so the image rectangle spans
    ``[-0.5, width - 0.5] x [-0.5, height - 0.5]``.
    """

    id: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int
    image_ref: str | None = None
    camera_id: int | None = None

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError(f"view {self.id}: focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValidationError(f"view {self.id}: image size must be positive")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9:
            raise ValidationError(f"view {self.id}: rotation is not orthonormal")

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self):
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    @property
    def center(self):
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def project(self, points):
        """Pixel coordinates and camera-space depth of world points (N, 3)."""
        pc = np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = np.stack([self.fx * pc[:, 0] / z + self.cx, self.fy * pc[:, 1] / z + self.cy], axis=1)
        return uv, z

    def downsampled(self, factor):
        """Same pose with intrinsics for an image reduced ``factor`` times per axis."""
        return CameraView(
            id=self.id,
            fx=self.fx / factor,
            fy=self.fy / factor,
            cx=(self.cx + 0.5) / factor - 0.5,
            cy=(self.cy + 0.5) / factor - 0.5,
            rotation=self.rotation,
            translation=self.translation,
            width=self.width // factor,
            height=self.height // factor,
            image_ref=self.image_ref,
            camera_id=self.camera_id,
        )


@dataclass(frozen=True, eq=False)
class SparsePoint:
    id: int
    position: np.ndarray
    color: tuple  # 8-bit RGB
    observers: tuple  # sorted view ids
    error: float = 0.0


@dataclass(eq=False)
class SparseModel:
    views: list
    points: list
    match_edges: list = field(default_factory=list)

    def __post_init__(self):
        ids = [v.id for v in self.views]
        if len(set(ids)) != len(ids):
            raise IntegrityError("duplicate view ids")
        known = set(ids)
        for p in self.points:
            missing = [o for o in p.observers if o not in known]
            if missing:
                raise IntegrityError(f"point {p.id} observed by unknown view(s) {missing}")
        for a, b, w in self.match_edges:
            if a == b:
                raise IntegrityError(f"match edge ({a}, {b}) is a self-loop")
            if a not in known or b not in known:
                raise IntegrityError(f"match edge ({a}, {b}) references an unknown view")
            if w < 0:
                raise IntegrityError(f"match edge ({a}, {b}) has negative weight")

    def view(self, view_id):
        for v in self.views:
            if v.id == view_id:
                return v
        raise KeyError(view_id)

    @property
    def view_ids(self):
        return [v.id for v in self.views]

    def positions(self):
        if not self.points:
            return np.zeros((0, 3))
        return np.stack([p.position for p in self.points])

    def colors(self):
        """Point colours as floats in [0, 1]."""
        if not self.points:
            return np.zeros((0, 3))
        return np.array([p.color for p in self.points], dtype=np.float64) / 255.0


# ---------------------------------------------------------------------------
# COLMAP text layout


def _records(path):
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if line and not line.startswith("#"):
                yield lineno, line


def _parse_cameras(path):
    cameras = {}
    for lineno, line in _records(path):
        toks = line.split()
        try:
            cam_id, model = int(toks[0]), toks[1]
            width, height = int(toks[2]), int(toks[3])
            params = [float(x) for x in toks[4:]]
        except (IndexError, ValueError) as exc:
            raise ParseError(f"malformed camera record ({exc})", path, lineno) from None
        if model == "PINHOLE" and len(params) == 4:
            fx, fy, cx, cy = params
        elif model == "SIMPLE_PINHOLE" and len(params) == 3:
            fx = fy = params[0]
            cx, cy = params[1:]
        else:
            raise ParseError(f"unsupported camera model {model!r} with {len(params)} params", path, lineno)
        cameras[cam_id] = (fx, fy, cx, cy, width, height)
    return cameras


def _parse_images(path):
    images = {}
    pending = None
    for lineno, line in _records_keep_empty(path):
        if pending is None:
            if not line:
                continue
            toks = line.split()
            if len(toks) < 10:
                raise ParseError("image record needs 10 fields", path, lineno)
            try:
                image_id = int(toks[0])
                q = [float(x) for x in toks[1:5]]
                t = [float(x) for x in toks[5:8]]
                cam_id = int(toks[8])
            except ValueError as exc:
                raise ParseError(f"malformed image record ({exc})", path, lineno) from None
            pending = (image_id, q, t, cam_id, " ".join(toks[9:]), lineno)
        else:
            toks = line.split()
            if len(toks) % 3:
                raise ParseError("POINTS2D must be (X, Y, POINT3D_ID) triplets", path, lineno)
            try:
                pids = []
                for i in range(0, len(toks), 3):
                    float(toks[i]), float(toks[i + 1])
                    pids.append(int(toks[i + 2]))
            except ValueError as exc:
                raise ParseError(f"malformed POINTS2D ({exc})", path, lineno) from None
            image_id, q, t, cam_id, name, rec_line = pending
            images[image_id] = dict(q=q, t=t, camera_id=cam_id, name=name, point_ids=pids, line=rec_line)
            pending = None
    if pending is not None:
        image_id, q, t, cam_id, name, rec_line = pending
        images[image_id] = dict(q=q, t=t, camera_id=cam_id, name=name, point_ids=[], line=rec_line)
    return images


def _records_keep_empty(path):
    # images.txt alternates pose / POINTS2D lines and the second may be blank
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if line.startswith("#"):
                continue
            yield lineno, line


def _parse_points(path):
    points = {}
    for lineno, line in _records(path):
        toks = line.split()
        if len(toks) < 8 or (len(toks) - 8) % 2:
            raise ParseError("points3D record needs 8 fields plus (IMAGE_ID, POINT2D_IDX) pairs", path, lineno)
        try:
            pid = int(toks[0])
            xyz = np.array([float(x) for x in toks[1:4]])
            rgb = tuple(int(x) for x in toks[4:7])
            err = float(toks[7])
            track = [int(toks[i]) for i in range(8, len(toks), 2)]
            for i in range(9, len(toks), 2):
                int(toks[i])
        except ValueError as exc:
            raise ParseError(f"malformed points3D record ({exc})", path, lineno) from None
        points[pid] = (xyz, rgb, err, track, lineno)
    return points


def parse_sparse_model(camera_file, image_file, points_file, matches_file=None):
    """Read a COLMAP text sparse model into a :class:`SparseModel`.

    Observer lists are the union of each point's track and the images whose
    POINTS2D reference it.  Without ``matches_file`` the model's
    ``match_edges`` stay empty and callers fall back to covisibility counts.
    """
    cameras = _parse_cameras(camera_file)
    images = _parse_images(image_file)
    raw_points = _parse_points(points_file)

    observers = {pid: set(track) for pid, (_, _, _, track, _) in raw_points.items()}
    for image_id, rec in images.items():
        for pid in rec["point_ids"]:
            if pid == -1:
                continue
            if pid not in raw_points:
                raise IntegrityError(
                    f"{image_file}:{rec['line']}: image {image_id} references unknown point3D id {pid}"
                )
            observers[pid].add(image_id)

    views = []
    for image_id in sorted(images):
        rec = images[image_id]
        if rec["camera_id"] not in cameras:
            raise IntegrityError(f"{image_file}:{rec['line']}: unknown camera id {rec['camera_id']}")
        fx, fy, cx, cy, width, height = cameras[rec["camera_id"]]
        views.append(
            CameraView(
                id=image_id,
                fx=fx,
                fy=fy,
                cx=cx,
                cy=cy,
                rotation=quat_to_rotmat(rec["q"]),
                translation=rec["t"],
                width=width,
                height=height,
                image_ref=rec["name"],
                camera_id=rec["camera_id"],
            )
        )

    points = []
    for pid in sorted(raw_points):
        xyz, rgb, err, _, lineno = raw_points[pid]
        obs = observers[pid]
        unknown = sorted(o for o in obs if o not in images)
        if unknown:
            raise IntegrityError(f"{points_file}:{lineno}: point {pid} tracks unknown image(s) {unknown}")
        points.append(SparsePoint(id=pid, position=xyz, color=rgb, observers=tuple(sorted(obs)), error=err))

    edges = read_matches(matches_file) if matches_file is not None else []
    return SparseModel(views=views, points=points, match_edges=edges)


def load_sparse_dir(directory):
    d = Path(directory)
    matches = d / "matches.txt"
    return parse_sparse_model(
        d / "cameras.txt", d / "images.txt", d / "points3D.txt", matches if matches.exists() else None
    )


def _num(x):
    # shortest round-tripping text for a float
    return repr(float(x))


def write_sparse_model(model, directory, write_matches=True):
    """Serialize ``model`` to the COLMAP text layout inside ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)

    # one PINHOLE record per distinct intrinsics tuple
    intr_ids = {}
    view_cam = {}
    for v in model.views:
        key = (v.fx, v.fy, v.cx, v.cy, v.width, v.height)
        if key not in intr_ids:
            intr_ids[key] = len(intr_ids) + 1
        view_cam[v.id] = intr_ids[key]
    with open(d / "cameras.txt", "w", encoding="utf-8") as fh:
        fh.write("# CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n")
        for (fx, fy, cx, cy, w, h), cid in sorted(intr_ids.items(), key=lambda kv: kv[1]):
            fh.write(f"{cid} PINHOLE {w} {h} {_num(fx)} {_num(fy)} {_num(cx)} {_num(cy)}\n")

    # POINTS2D entries per image, with track indices pointing back at them
    per_image = {v.id: [] for v in model.views}
    track_entries = {}
    views_by_id = {v.id: v for v in model.views}
    for p in model.points:
        entries = []
        for vid in p.observers:
            v = views_by_id[vid]
            uv, _ = v.project(p.position[None])
            idx = len(per_image[vid])
            per_image[vid].append((float(uv[0, 0]), float(uv[0, 1]), p.id))
            entries.append((vid, idx))
        track_entries[p.id] = entries

    with open(d / "images.txt", "w", encoding="utf-8") as fh:
        fh.write("# IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n")
        fh.write("# POINTS2D[] as (X, Y, POINT3D_ID)\n")
        for v in model.views:
            q = [_num(c) for c in rotmat_to_quat(v.rotation)]
            t = [_num(c) for c in v.translation]
            name = v.image_ref or f"view_{v.id:04d}.ppm"
            fh.write(
                f"{v.id} {' '.join(q)} {' '.join(t)} {view_cam[v.id]} {name}\n"
            )
            fh.write(" ".join(f"{_num(x)} {_num(y)} {pid}" for x, y, pid in per_image[v.id]) + "\n")

    with open(d / "points3D.txt", "w", encoding="utf-8") as fh:
        fh.write("# POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n")
        for p in model.points:
            x, y, z = (float(c) for c in p.position)
            track = " ".join(f"{vid} {idx}" for vid, idx in track_entries[p.id])
            r, g, b = p.color
            fh.write(f"{p.id} {_num(x)} {_num(y)} {_num(z)} {r} {g} {b} {_num(p.error)} {track}".rstrip() + "\n")

    if write_matches and model.match_edges:
        write_matches_file(model.match_edges, d / "matches.txt")


def read_matches(path):
    edges = []
    for lineno, line in _records(path):
        toks = line.split()
        if len(toks) != 3:
            raise ParseError("expected '<id_a> <id_b> <count>'", path, lineno)
        try:
            a, b = int(toks[0]), int(toks[1])
            w = float(toks[2])
        except ValueError as exc:
            raise ParseError(str(exc), path, lineno) from None
        if w < 0:
            raise ParseError("negative match count", path, lineno)
        edges.append((a, b, int(w) if w == int(w) else w))
    return edges


def write_matches_file(edges, path):
    with open(path, "w", encoding="utf-8") as fh:
        for a, b, w in edges:
            fh.write(f"{a} {b} {w}\n")


def derive_covisibility_edges(model):
    """Edges weighted by the number of points two views both observe.

    Returned as ``(a, b, count)`` with ``a < b``, sorted, zero counts omitted.
    """
    counts = Counter()
    for p in model.points:
        for a, b in itertools.combinations(sorted(set(p.observers)), 2):
            counts[(a, b)] += 1
    return [(a, b, w) for (a, b), w in sorted(counts.items()) if w > 0]


# ---------------------------------------------------------------------------
# images


def to_bytes(image):
    """Quantize [0, 1] floats to uint8 by clamping and rounding half up."""
    img = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(img)):
        raise ImageFormatError("image contains non-finite values")
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_image(image, path):
    path = Path(path)
    data = to_bytes(image)
    if data.ndim != 3 or data.shape[2] != 3:
        raise ImageFormatError(f"expected an (H, W, 3) image, got shape {data.shape}")
    h, w, _ = data.shape
    suffix = path.suffix.lower()
    if suffix == ".ppm":
        with open(path, "wb") as fh:
            fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            fh.write(data.tobytes())
    elif suffix == ".png":
        from PIL import Image as PILImage

        PILImage.fromarray(data, mode="RGB").save(path)
    else:
        raise ImageFormatError(f"unsupported image container {suffix!r}")


def _ppm_tokens(buf, count):
    # header tokens separated by whitespace, '#' comments allowed
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PPM header")
        tokens.append(buf[start:pos])
    return tokens, pos + 1


def read_image(path):
    """Read an 8-bit RGB image as an ``(H, W, 3)`` float array in [0, 1]."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image as PILImage

        with PILImage.open(path) as im:
            if im.mode != "RGB":
                raise ImageFormatError(f"{path}: unsupported PNG mode {im.mode!r}")
            return np.asarray(im, dtype=np.float64) / 255.0
    buf = path.read_bytes()
    if buf[:2] != b"P6":
        if buf[:2] in (b"P5", b"P2", b"P3"):
            raise ImageFormatError(f"{path}: unsupported channel count or encoding ({buf[:2].decode()})")
        raise ImageFormatError(f"{path}: not a binary PPM file")
    (magic, w, h, maxval), offset = _ppm_tokens(buf, 4)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise ImageFormatError(f"{path}: malformed PPM header") from None
    if maxval != 255:
        raise ImageFormatError(f"{path}: unsupported bit depth (maxval {maxval})")
    need = w * h * 3
    body = buf[offset : offset + need]
    if len(body) != need:
        raise ImageFormatError(f"{path}: truncated pixel data ({len(body)} of {need} bytes)")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def write_sidecar(array, path):
    """Raw float buffer: ASCII header ``W H C\\n`` then little-endian float32, row-major."""
    a = np.asarray(array, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
    h, w, c = a.shape
    with open(path, "wb") as fh:
        fh.write(f"{w} {h} {c}\n".encode("ascii"))
        fh.write(a.astype("<f4").tobytes())


def read_sidecar(path):
    buf = Path(path).read_bytes()
    nl = buf.index(b"\n")
    w, h, c = (int(x) for x in buf[:nl].split())
    body = buf[nl + 1 :]
    if len(body) != w * h * c * 4:
        raise ImageFormatError(f"{path}: sidecar size does not match header")
    return np.frombuffer(body, dtype="<f4").reshape(h, w, c).astype(np.float64)


# ---------------------------------------------------------------------------
# key = value text (manifests, configs)


def read_kv(path):
    """Parse ``key = value`` lines; returns ``{key: (value, lineno)}``."""
    out = {}
    for lineno, line in _records(path):
        if "=" not in line:
            raise ParseError("expected 'key = value'", path, lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ParseError("empty key", path, lineno)
        out[key] = (value, lineno)
    return out


def write_kv(mapping, path):
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in mapping.items():
            fh.write(f"{key} = {value}\n")
