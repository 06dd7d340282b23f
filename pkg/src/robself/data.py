"""Image I/O, synthetic degradation and misalignment, and on-disk pair layouts.

Arrays are ``C x H x W`` floats.  8-bit rasters load into ``[0, 1]``;
16-bit rasters (depth) keep their raw integer values and the pair records
a ``value_scale`` converting stored units to physical units.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import diffengine as de
from .errors import ContractError

IMAGE_SUFFIXES = (".png", ".pft", ".tif", ".tiff", ".bmp")


@dataclass
class ImagePair:
    source_lr: np.ndarray
    guide_hr: np.ndarray
    gt_hr: np.ndarray | None = None
    value_scale: float = 1.0
    name: str = "pair"
    modality: str | None = None
    homography: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def phi(self) -> int:
        return self.source_lr.shape[0]

    @property
    def psi(self) -> int:
        return self.guide_hr.shape[0]

    def check(self, factor: int) -> None:
        _, h, w = self.source_lr.shape
        _, big_h, big_w = self.guide_hr.shape
        if (big_h, big_w) != (h * factor, w * factor):
            raise ContractError(
                f"{self.name}: guide {big_h}x{big_w} is not {factor}x the source {h}x{w}")
        if self.gt_hr is not None and self.gt_hr.shape[1:] != (big_h, big_w):
            raise ContractError(f"{self.name}: ground truth {self.gt_hr.shape[1:]} does not match guide")
        for label, arr in (("source", self.source_lr), ("guide", self.guide_hr), ("gt", self.gt_hr)):
            if arr is not None and not np.isfinite(arr).all():
                raise ContractError(f"{self.name}: {label} contains non-finite values")
        if self.modality == "depth" and self.source_lr.min() < 0:
            raise ContractError(f"{self.name}: negative depth values")


@dataclass
class MisalignSpec:
    translation: float = 8.0
    rotation: float = 4.0
    perspective: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if min(self.translation, self.rotation, self.perspective) < 0:
            raise ContractError("misalignment ranges must be non-negative")


# ---------------------------------------------------------------------------
# raster and float-map I/O


def read_pft(path) -> np.ndarray:
    """Plain-text float map: a ``PFT`` line, a ``C H W`` line, then one row per image row."""
    with open(path) as fh:
        magic = fh.readline().strip()
        if magic != "PFT":
            raise ContractError(f"{path}: not a PFT float map")
        c, h, w = (int(v) for v in fh.readline().split())
        data = np.loadtxt(fh, dtype=np.float64, ndmin=2)
    return data.reshape(c, h, w)


def write_pft(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    c, h, w = arr.shape
    with open(path, "w") as fh:
        fh.write(f"PFT\n{c} {h} {w}\n")
        np.savetxt(fh, arr.reshape(c * h, w), fmt="%.17g")


def read_image(path) -> tuple[np.ndarray, int]:
    """Return ``(array, bits)``; ``bits`` is 0 for float maps."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing image file: {path}")
    if path.suffix.lower() == ".pft":
        return read_pft(path), 0
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64)
            return arr[None], 16
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        return arr[None], 8
    return arr.transpose(2, 0, 1).copy(), 8


def write_image(path, arr: np.ndarray, bits: int = 8) -> None:
    """Write a PNG.  8-bit expects ``[0, 1]`` data; 16-bit expects raw grayscale units."""
    path = Path(path)
    if path.suffix.lower() == ".pft":
        write_pft(path, arr)
        return
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if bits == 16:
        if arr.ndim != 2:
            raise ContractError("16-bit output supports grayscale only")
        data = np.clip(np.rint(arr), 0, 65535).astype(np.uint16)
        Image.fromarray(data).save(path)
        return
    if arr.ndim == 3:
        arr = arr.transpose(1, 2, 0)
    data = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(path)


def to_display(arr: np.ndarray) -> np.ndarray:
    """Min-max stretch to ``[0, 1]`` for visualization."""
    arr = np.asarray(arr, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    if hi <= lo:
        return np.zeros_like(arr)
    return (arr - lo) / (hi - lo)


# ---------------------------------------------------------------------------
# degradation


def degrade(hr: np.ndarray, factor: int) -> np.ndarray:
    """Average pooling; the same operator the consistency loss uses."""
    with de.precision("f64"):
        return de.avg_pool2d(de.as_tensor(hr), factor).value


def broadcast(lr: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour upsampling, the right inverse of :func:`degrade`."""
    return np.repeat(np.repeat(np.asarray(lr), factor, axis=1), factor, axis=2)


# ---------------------------------------------------------------------------
# homographies


def warp_homography(image: np.ndarray, hmat: np.ndarray) -> np.ndarray:
    """Inverse-mapping bilinear warp: ``out(p) = image(H^-1 p)`` with edge replication."""
    image = np.asarray(image, dtype=np.float64)
    hmat = np.asarray(hmat, dtype=np.float64)
    if hmat.shape != (3, 3):
        raise ContractError(f"homography must be 3x3, got {hmat.shape}")
    if abs(np.linalg.det(hmat)) < 1e-12 or np.linalg.cond(hmat) > 1e12:
        raise ContractError("homography is singular")
    inv = np.linalg.inv(hmat)
    c, h, w = image.shape
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    xs = inv[0, 0] * xx + inv[0, 1] * yy + inv[0, 2]
    ys = inv[1, 0] * xx + inv[1, 1] * yy + inv[1, 2]
    zs = inv[2, 0] * xx + inv[2, 1] * yy + inv[2, 2]
    sampler = de._BilinearSampler(image, (xs / zs).ravel(), (ys / zs).ravel())
    return sampler.sample().reshape(c, h, w)


def homography_from_points(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Direct linear solve for the homography taking four ``src`` points to ``dst``."""
    rows, rhs = [], []
    for (x, y), (u, v) in zip(src, dst):
        rows.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        rows.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        rhs.extend([u, v])
    sol = np.linalg.solve(np.array(rows, dtype=np.float64), np.array(rhs, dtype=np.float64))
    return np.append(sol, 1.0).reshape(3, 3)


def random_homography(spec: MisalignSpec, height: int, width: int) -> np.ndarray:
    """Perspective . rotation . translation, each drawn uniformly within ``spec``."""
    rng = np.random.default_rng(spec.seed)
    tx, ty = rng.uniform(-1.0, 1.0, size=2) * spec.translation
    angle = np.deg2rad(rng.uniform(-1.0, 1.0) * spec.rotation)
    corner_shift = rng.uniform(-1.0, 1.0, size=(4, 2)) * spec.perspective * min(height, width)

    t = np.eye(3)
    t[0, 2], t[1, 2] = tx, ty

    r = np.eye(3)
    if angle != 0.0:
        cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
        cos, sin = np.cos(angle), np.sin(angle)
        rot = np.array([[cos, -sin, 0.0], [sin, cos, 0.0], [0.0, 0.0, 1.0]])
        to_center = np.array([[1.0, 0.0, -cx], [0.0, 1.0, -cy], [0.0, 0.0, 1.0]])
        back = np.array([[1.0, 0.0, cx], [0.0, 1.0, cy], [0.0, 0.0, 1.0]])
        r = back @ rot @ to_center

    p = np.eye(3)
    if spec.perspective > 0:
        corners = np.array([[0, 0], [width - 1, 0], [width - 1, height - 1], [0, height - 1]], dtype=np.float64)
        p = homography_from_points(corners, corners + corner_shift)
    return p @ r @ t


def translation_homography(tx: float, ty: float) -> np.ndarray:
    hmat = np.eye(3)
    hmat[0, 2], hmat[1, 2] = tx, ty
    return hmat


def make_synthetic_pair(hr_source, hr_guide, spec: MisalignSpec, factor: int, name: str = "synthetic",
                        homography: np.ndarray | None = None) -> ImagePair:
    """Misalign the guide, pool the source; the untouched source becomes ground truth."""
    hr_source = np.asarray(hr_source, dtype=np.float64)
    hr_guide = np.asarray(hr_guide, dtype=np.float64)
    if hr_source.shape[1:] != hr_guide.shape[1:]:
        raise ContractError(f"source {hr_source.shape[1:]} and guide {hr_guide.shape[1:]} must be aligned")
    h, w = hr_guide.shape[1:]
    if homography is None:
        homography = random_homography(spec, h, w)
    guide = warp_homography(hr_guide, homography)
    return ImagePair(
        source_lr=degrade(hr_source, factor),
        guide_hr=guide,
        gt_hr=hr_source.copy(),
        name=name,
        homography=homography,
    )


# ---------------------------------------------------------------------------
# on-disk layouts


def read_meta(path) -> dict[str, str]:
    meta = {}
    path = Path(path)
    if not path.exists():
        return meta
    for raw in path.read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if "=" in line:
            key, value = (s.strip() for s in line.split("=", 1))
            meta[key] = value
    return meta


def write_meta(path, meta: dict) -> None:
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in meta.items()))


def find_image(directory: Path, stem: str, required: bool = True) -> Path | None:
    for suffix in IMAGE_SUFFIXES:
        candidate = directory / f"{stem}{suffix}"
        if candidate.exists():
            return candidate
    if required:
        raise FileNotFoundError(f"{directory}: missing {stem}.* (looked for {', '.join(IMAGE_SUFFIXES)})")
    return None


def load_pair(path=None, layout: str = "realmis", factor: int = 2, *, source=None, guide=None, gt=None,
              phi: int | None = None, psi: int | None = None, modality: str | None = None) -> ImagePair:
    """Load one pair.

    ``realmis``: ``path`` is a group directory with ``source_lr.*``,
    ``guide_x{f}.*``, optional ``gt_x{f}.*`` and a ``meta.txt``.
    ``flat``: explicit ``source``/``guide``/``gt`` file paths.
    ``phi``/``psi``/``modality`` are checked against the data when given.
    """
    if layout == "realmis":
        group = Path(path)
        if not group.is_dir():
            raise FileNotFoundError(f"pair directory not found: {group}")
        source = find_image(group, "source_lr")
        guide = find_image(group, f"guide_x{factor}")
        gt = find_image(group, f"gt_x{factor}", required=False)
        meta = read_meta(group / "meta.txt")
        name = group.name
    elif layout == "flat":
        if source is None or guide is None:
            raise ContractError("flat layout needs explicit source and guide paths")
        meta = {}
        name = Path(source).stem
    else:
        raise ContractError(f"unknown layout {layout!r}")

    src, _ = read_image(source)
    gde, _ = read_image(guide)
    gt_arr = read_image(gt)[0] if gt is not None else None
    hmat = None
    if layout == "realmis" and (Path(path) / "homography.txt").exists():
        hmat = np.loadtxt(Path(path) / "homography.txt").reshape(3, 3)
    pair = ImagePair(
        source_lr=src,
        guide_hr=gde,
        gt_hr=gt_arr,
        value_scale=float(meta.get("value_scale", 1.0)),
        name=name,
        modality=meta.get("modality"),
        homography=hmat,
        meta=meta,
    )
    if phi is not None and pair.phi != phi:
        raise ContractError(f"{name}: source has {pair.phi} channels, expected {phi}")
    if psi is not None and pair.psi != psi:
        raise ContractError(f"{name}: guide has {pair.psi} channels, expected {psi}")
    if modality is not None and pair.modality is not None and pair.modality != modality:
        raise ContractError(f"{name}: pair modality {pair.modality!r} does not match expected {modality!r}")
    pair.check(factor)
    return pair


def save_group(directory, pair: ImagePair, factor: int, raster_bits: int = 0) -> Path:
    """Write a pair in the ``realmis`` layout.

    ``raster_bits=0`` stores float maps (bit-exact); 16 stores 16-bit PNG
    for the source and ground truth (raw depth units) and float maps for
    the guide.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ext = ".png" if raster_bits == 16 else ".pft"
    write_image(directory / f"source_lr{ext}", pair.source_lr, bits=16)
    write_pft(directory / f"guide_x{factor}.pft", pair.guide_hr)
    if pair.gt_hr is not None:
        write_image(directory / f"gt_x{factor}{ext}", pair.gt_hr, bits=16)
    meta = {"value_scale": repr(pair.value_scale)}
    if pair.modality:
        meta["modality"] = pair.modality
    write_meta(directory / "meta.txt", meta)
    if pair.homography is not None:
        np.savetxt(directory / "homography.txt", pair.homography, fmt="%.17g")
    return directory
