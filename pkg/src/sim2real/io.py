"""On-disk formats: RGBD image containers, label CSVs, manifests, PNG sheets.

RGBD container: magic "RGBD" | u32 version=1 | u32 H | u32 W | u32 C=4 |
H*W*C float32 little-endian values, row-major, channel-last. One image per
file. A dataset is a directory of numbered containers plus labels.csv and
manifest.txt.
"""

import struct
from pathlib import Path

import numpy as np

from . import scene as sc

RGBD_MAGIC = b"RGBD"
RGBD_VERSION = 1
LABELS_HEADER = "index,tx_cm,ty_cm,object_id,domain"


def fmt6(x):
    """Six significant digits, the repo-wide CSV float format."""
    return f"{float(x):.6g}"


def save_rgbd(path, img):
    img = np.ascontiguousarray(img, dtype="<f4")
    if img.ndim != 3:
        raise ValueError(f"expected (H, W, C) image, got shape {img.shape}")
    h, w, c = img.shape
    with open(path, "wb") as fh:
        fh.write(RGBD_MAGIC)
        fh.write(struct.pack("<IIII", RGBD_VERSION, h, w, c))
        fh.write(img.tobytes())


def load_rgbd(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != RGBD_MAGIC:
        raise ValueError(f"not an RGBD container: bad magic {blob[:4]!r}")
    if len(blob) < 20:
        raise ValueError("truncated RGBD container: missing header")
    version, h, w, c = struct.unpack_from("<IIII", blob, 4)
    if version != RGBD_VERSION:
        raise ValueError(f"unsupported RGBD version {version}")
    count = h * w * c
    if len(blob) != 20 + 4 * count:
        raise ValueError(f"truncated RGBD container: expected {count} values")
    return np.frombuffer(blob, dtype="<f4", count=count, offset=20).reshape(h, w, c).copy()


def save_manifest(path, entries):
    lines = [f"{k} = {v}" for k, v in entries.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path):
    entries = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"bad manifest line: {line!r}")
        k, _, v = line.partition("=")
        entries[k.strip()] = v.strip()
    return entries


def _image_name(index, domain):
    return f"{index:06d}_{domain}.rgbd"


def save_dataset(root, dataset, force=False):
    """Persist a LabeledDataset or PairedDataset as a directory.

    Refuses to overwrite an existing dataset directory unless force=True.
    """
    root = Path(root)
    if root.exists() and any(root.iterdir()) and not force:
        raise FileExistsError(f"{root} already exists; pass force to overwrite")
    root.mkdir(parents=True, exist_ok=True)

    paired = isinstance(dataset, sc.PairedDataset)
    parts = [dataset.sim, dataset.real] if paired else [dataset]
    rows = []
    for part in parts:
        for i, img in enumerate(part.images):
            save_rgbd(root / _image_name(i, part.domain), img)
            tx, ty = part.labels[i]
            rows.append(f"{i},{fmt6(tx)},{fmt6(ty)},{part.object_id},{part.domain}")
    (root / "labels.csv").write_text(LABELS_HEADER + "\n" + "\n".join(rows) + "\n")

    first = parts[0]
    manifest = {
        "name": root.name,
        "object_id": first.object_id,
        "paired": str(paired).lower(),
        "count": len(first),
        "domains": ",".join(p.domain for p in parts),
    }
    for k in ("grid_cm", "random_count", "seed", "distractor_count", "lighting_shift"):
        if k in first.meta:
            manifest[k] = first.meta[k]
    save_manifest(root / "manifest.txt", manifest)


def load_dataset(root):
    """Load a dataset directory; returns LabeledDataset or PairedDataset."""
    root = Path(root)
    manifest = load_manifest(root / "manifest.txt")
    lines = (root / "labels.csv").read_text().splitlines()
    if not lines or lines[0] != LABELS_HEADER:
        raise ValueError(f"bad labels.csv header: {lines[:1]}")

    by_domain = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        idx_s, tx_s, ty_s, oid_s, domain = line.split(",")
        by_domain.setdefault(domain, []).append((int(idx_s), float(tx_s), float(ty_s), int(oid_s)))

    def load_part(domain, rows):
        rows.sort()
        images, labels = [], []
        oid = rows[0][3]
        for idx, tx, ty, _ in rows:
            path = root / _image_name(idx, domain)
            if not path.exists():
                raise ValueError(f"label/image count mismatch: missing {path.name}")
            images.append(load_rgbd(path))
            labels.append((tx, ty))
        n_files = len(list(root.glob(f"*_{domain}.rgbd")))
        if n_files != len(rows):
            raise ValueError(
                f"label/image count mismatch for {domain}: {len(rows)} labels, {n_files} images")
        return sc.LabeledDataset(np.stack(images), np.array(labels, dtype=np.float64),
                                 oid, domain, dict(manifest))

    parts = {d: load_part(d, rows) for d, rows in sorted(by_domain.items())}
    if manifest.get("paired") == "true":
        return sc.PairedDataset(sim=parts[sc.DOMAIN_SIM], real=parts[sc.DOMAIN_REAL])
    (only,) = parts.values()
    return only


def quantize_u8(values):
    """Map [0,1] floats to bytes with round-half-up."""
    return np.floor(np.clip(values, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def render_sheet(images, path, columns=None, pad=2, with_depth=True):
    """Tile RGB-D images into one 8-bit PNG; depth rides as a gray tile."""
    from PIL import Image

    if not images:
        raise ValueError("render_sheet needs at least one image")
    shapes = {img.shape for img in images}
    if len(shapes) > 1:
        raise ValueError(f"images must share one shape, got {sorted(shapes)}")
    tiles = []
    for img in images:
        rgb = quantize_u8(img[:, :, :3])
        if with_depth and img.shape[2] == 4:
            d = quantize_u8(img[:, :, 3])
            tiles.append(np.concatenate([rgb, np.stack([d] * 3, axis=2)], axis=1))
        else:
            tiles.append(rgb)
    h, w, _ = tiles[0].shape
    n = len(tiles)
    cols = columns or min(n, 4)
    rows = (n + cols - 1) // cols
    sheet = np.zeros((rows * (h + pad) - pad, cols * (w + pad) - pad, 3), dtype=np.uint8)
    for k, tile in enumerate(tiles):
        r, c = divmod(k, cols)
        sheet[r * (h + pad):r * (h + pad) + h, c * (w + pad):c * (w + pad) + w] = tile
    Image.fromarray(sheet).save(path)
    return path
