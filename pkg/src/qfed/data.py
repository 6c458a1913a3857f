"""Dataset ingestion, preprocessing, non-IID partitioning, and EMD.

Pipeline: IDX files -> RawImage -> bilinear resize to 16x16 -> amplitude
encoding into an 8-qubit StateVector -> star / cycle-m client partitions.
Heterogeneity of a partition is measured by the earth mover's distance
between each client's label distribution and the global one.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .qsim import StateVector

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

ENCODING_QUBITS = 8
ENCODING_PIXELS = 2**ENCODING_QUBITS


class IdxFormatError(ValueError):
    """Malformed IDX file; message carries the byte offset of the problem."""


class DegenerateImageError(ValueError):
    """Image cannot be amplitude encoded (all pixels zero)."""


@dataclass(frozen=True)
class RawImage:
    width: int
    height: int
    pixels: np.ndarray  # row-major, values in [0, 1]

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 1 or px.size != self.width * self.height:
            raise ValueError(
                f"expected {self.width * self.height} pixels, got shape {px.shape}"
            )
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)


@dataclass(frozen=True)
class EncodedSample:
    state: StateVector
    label: int


@dataclass(frozen=True)
class ClientDataset:
    client_id: int
    samples: tuple[EncodedSample, ...]
    weight_p: float
    indices: tuple[int, ...] = ()  # positions in the source dataset, for manifests

    def __post_init__(self):
        if not (0.0 < self.weight_p <= 1.0):
            raise ValueError(f"weight_p must be in (0, 1], got {self.weight_p}")
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "indices", tuple(self.indices))

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class LabelDistribution:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1:
            raise ValueError("probs must be 1-D")
        if np.any(p < 0):
            raise ValueError("probabilities must be non-negative")
        if abs(float(p.sum()) - 1.0) > 1e-9:
            raise ValueError(f"probabilities must sum to 1, got {float(p.sum())!r}")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    def __len__(self) -> int:
        return self.probs.size


# ---------------------------------------------------------------------------
# IDX files
# ---------------------------------------------------------------------------


def _read_u32(buf: bytes, offset: int, path: str) -> int:
    if offset + 4 > len(buf):
        raise IdxFormatError(f"{path}: truncated header at offset {offset}")
    return struct.unpack_from(">I", buf, offset)[0]


def load_idx(images_path, labels_path) -> list[tuple[RawImage, int]]:
    """Read an IDX image/label file pair; pixel bytes are scaled to [0,1] by /255."""
    with open(images_path, "rb") as fh:
        img_buf = fh.read()
    with open(labels_path, "rb") as fh:
        lbl_buf = fh.read()

    magic = _read_u32(img_buf, 0, str(images_path))
    if magic != IDX_IMAGES_MAGIC:
        raise IdxFormatError(
            f"{images_path}: bad images magic 0x{magic:08x} at offset 0, "
            f"expected 0x{IDX_IMAGES_MAGIC:08x}"
        )
    n_images = _read_u32(img_buf, 4, str(images_path))
    rows = _read_u32(img_buf, 8, str(images_path))
    cols = _read_u32(img_buf, 12, str(images_path))
    expected = 16 + n_images * rows * cols
    if len(img_buf) < expected:
        raise IdxFormatError(
            f"{images_path}: truncated pixel data at offset {len(img_buf)}, "
            f"expected {expected} bytes"
        )

    magic = _read_u32(lbl_buf, 0, str(labels_path))
    if magic != IDX_LABELS_MAGIC:
        raise IdxFormatError(
            f"{labels_path}: bad labels magic 0x{magic:08x} at offset 0, "
            f"expected 0x{IDX_LABELS_MAGIC:08x}"
        )
    n_labels = _read_u32(lbl_buf, 4, str(labels_path))
    if len(lbl_buf) < 8 + n_labels:
        raise IdxFormatError(
            f"{labels_path}: truncated label data at offset {len(lbl_buf)}, "
            f"expected {8 + n_labels} bytes"
        )
    if n_images != n_labels:
        raise IdxFormatError(
            f"{images_path}: image count {n_images} != label count {n_labels}"
        )

    pixels = np.frombuffer(img_buf, dtype=np.uint8, count=n_images * rows * cols, offset=16)
    pixels = pixels.reshape(n_images, rows * cols).astype(np.float64) / 255.0
    labels = np.frombuffer(lbl_buf, dtype=np.uint8, count=n_labels, offset=8)
    return [
        (RawImage(width=cols, height=rows, pixels=pixels[i]), int(labels[i]))
        for i in range(n_images)
    ]


def save_idx(images: list[RawImage], labels, images_path, labels_path) -> None:
    """Write an IDX image/label pair (inverse of load_idx, bytes = round(px*255))."""
    labels = list(labels)
    if len(images) != len(labels):
        raise ValueError(f"{len(images)} images but {len(labels)} labels")
    if not images:
        raise ValueError("refusing to write an empty IDX pair")
    rows, cols = images[0].height, images[0].width
    for img in images:
        if (img.height, img.width) != (rows, cols):
            raise ValueError("all images must share one shape")
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, len(images), rows, cols))
        for img in images:
            fh.write(np.round(img.pixels * 255.0).astype(np.uint8).tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(bytes(int(l) for l in labels))


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------


def resize_bilinear(img: RawImage, out_w: int, out_h: int) -> RawImage:
    """Corner-aligned bilinear resize.

    Output pixel (i, j) samples the input at (i*(h-1)/(out_h-1), j*(w-1)/(out_w-1));
    a singleton output axis samples the input midpoint.
    """
    if out_w < 1 or out_h < 1:
        raise ValueError(f"target size must be positive, got {out_w}x{out_h}")
    src = img.pixels.reshape(img.height, img.width)

    def grid(n_out: int, n_in: int) -> np.ndarray:
        if n_out == 1:
            return np.array([(n_in - 1) / 2.0])
        return np.arange(n_out) * (n_in - 1) / (n_out - 1)

    ys = grid(out_h, img.height)
    xs = grid(out_w, img.width)
    y0 = np.clip(np.floor(ys).astype(int), 0, img.height - 1)
    y1 = np.clip(y0 + 1, 0, img.height - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, img.width - 1)
    x1 = np.clip(x0 + 1, 0, img.width - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    out = (
        src[np.ix_(y0, x0)] * (1 - wy) * (1 - wx)
        + src[np.ix_(y0, x1)] * (1 - wy) * wx
        + src[np.ix_(y1, x0)] * wy * (1 - wx)
        + src[np.ix_(y1, x1)] * wy * wx
    )
    return RawImage(width=out_w, height=out_h, pixels=np.clip(out, 0.0, 1.0).reshape(-1))


def amplitude_encode(img: RawImage) -> StateVector:
    """Map 256 pixels to the amplitudes x_j / sqrt(sum_u x_u^2) of an 8-qubit state."""
    if img.width * img.height != ENCODING_PIXELS:
        raise ValueError(
            f"amplitude encoding needs {ENCODING_PIXELS} pixels, "
            f"got {img.width}x{img.height}"
        )
    norm = float(np.sqrt(np.sum(img.pixels**2)))
    if norm == 0.0:
        raise DegenerateImageError("all-zero image cannot be normalized")
    return StateVector(img.pixels / norm)


def encode_dataset(
    pairs: list[tuple[RawImage, int]], out_w: int = 16, out_h: int = 16
) -> tuple[list[EncodedSample], int]:
    """Resize + amplitude-encode a raw dataset; returns (samples, n_rejected).

    All-zero images are rejected (counted) rather than silently mapped.
    """
    samples: list[EncodedSample] = []
    rejected = 0
    for img, label in pairs:
        resized = resize_bilinear(img, out_w, out_h)
        try:
            state = amplitude_encode(resized)
        except DegenerateImageError:
            rejected += 1
            continue
        samples.append(EncodedSample(state=state, label=label))
    return samples, rejected


# ---------------------------------------------------------------------------
# Label distributions and EMD
# ---------------------------------------------------------------------------


def label_distribution(samples, n_classes: int) -> LabelDistribution:
    counts = np.zeros(n_classes, dtype=np.float64)
    for s in samples:
        if not (0 <= s.label < n_classes):
            raise ValueError(f"label {s.label} out of range for {n_classes} classes")
        counts[s.label] += 1.0
    total = counts.sum()
    if total == 0:
        raise ValueError("cannot build a label distribution from zero samples")
    return LabelDistribution(counts / total)


def emd(local: LabelDistribution, global_dist: LabelDistribution) -> float:
    """sum_k |local_k - global_k|; 0 for identical distributions, at most 2."""
    if len(local) != len(global_dist):
        raise ValueError(f"length mismatch: {len(local)} vs {len(global_dist)}")
    return float(np.sum(np.abs(local.probs - global_dist.probs)))


# ---------------------------------------------------------------------------
# Non-IID partitioners
# ---------------------------------------------------------------------------


def _indices_by_class(dataset, n_classes: int) -> list[np.ndarray]:
    by_class: list[list[int]] = [[] for _ in range(n_classes)]
    for i, s in enumerate(dataset):
        if not (0 <= s.label < n_classes):
            raise ValueError(f"label {s.label} out of range for {n_classes} classes")
        by_class[s.label].append(i)
    return [np.asarray(ix, dtype=np.int64) for ix in by_class]


def _build_clients(dataset, assignment: dict[int, list[int]]) -> list[ClientDataset]:
    total = sum(len(ix) for ix in assignment.values())
    clients = []
    for cid in sorted(assignment):
        ix = assignment[cid]
        clients.append(
            ClientDataset(
                client_id=cid,
                samples=tuple(dataset[i] for i in ix),
                weight_p=len(ix) / total,
                indices=tuple(int(i) for i in ix),
            )
        )
    return clients


def partition_star(
    dataset, n_clients: int, fixed_class: int, seed: int = 0
) -> list[ClientDataset]:
    """Star structure: client i (1..n_clients) holds all samples of its own class
    plus an even share of the fixed class (remainder to the lowest client ids)."""
    n_classes = n_clients + 1
    if not (0 <= fixed_class < n_classes):
        raise ValueError(f"fixed_class {fixed_class} out of range for {n_classes} classes")
    by_class = _indices_by_class(dataset, n_classes)
    for c, ix in enumerate(by_class):
        if ix.size == 0:
            raise ValueError(f"class {c} has no samples; star needs classes 0..{n_clients}")
    rng = np.random.default_rng(seed)
    own_classes = [c for c in range(n_classes) if c != fixed_class]
    fixed_ix = by_class[fixed_class].copy()
    rng.shuffle(fixed_ix)
    fixed_chunks = np.array_split(fixed_ix, n_clients)  # larger chunks first
    assignment = {}
    for i in range(n_clients):
        cid = i + 1
        own_ix = by_class[own_classes[i]].copy()
        rng.shuffle(own_ix)
        assignment[cid] = list(fixed_chunks[i]) + list(own_ix)
    return _build_clients(dataset, assignment)


def partition_cycle(dataset, n_clients: int, m: int, seed: int = 0) -> list[ClientDataset]:
    """Cycle-m structure: client i holds classes i..i+m-1 (mod n_classes).

    Each class is split into m equal contiguous chunks after a seeded shuffle,
    one chunk per owning client, so the union over clients is a partition.
    Requires n_clients == n_classes for the cyclic ownership to tile.
    """
    n_classes = n_clients
    if not (1 <= m <= n_classes):
        raise ValueError(f"m must be in 1..{n_classes}, got {m}")
    by_class = _indices_by_class(dataset, n_classes)
    for c, ix in enumerate(by_class):
        if ix.size == 0:
            raise ValueError(f"class {c} has no samples; cycle needs all {n_classes} classes")
    rng = np.random.default_rng(seed)
    assignment: dict[int, list[int]] = {cid: [] for cid in range(n_clients)}
    for c in range(n_classes):
        ix = by_class[c].copy()
        rng.shuffle(ix)
        chunks = np.array_split(ix, m)
        # owners of class c are the m clients i with c in {i, ..., i+m-1 mod n}
        for j, chunk in enumerate(chunks):
            owner = (c - j) % n_clients
            assignment[owner].extend(int(i) for i in chunk)
    return _build_clients(dataset, assignment)


# ---------------------------------------------------------------------------
# Synthetic benchmark images
# ---------------------------------------------------------------------------


def synthesize_images(
    n_per_class: int,
    n_classes: int = 8,
    width: int = 16,
    height: int = 16,
    seed: int = 0,
    shift: float = 0.7,
    noise: float = 0.06,
    wobble: float = 0.12,
    n_modes: int = 4,
    template_seed: int = 12345,
) -> list[tuple[RawImage, int]]:
    """Deterministic 8-class image benchmark for environments without MNIST.

    Class templates are rectified mixtures of a few low-frequency cosine modes
    (broad bright/dark regions, like the coarse structure of handwriting);
    samples get integer-pixel shifts, amplitude wobble, and pixel noise.  The
    coarse structure keeps the classes learnable by shallow circuits while the
    per-sample variation keeps accuracies below saturation.
    """
    rng = np.random.default_rng(seed)
    template_rng = np.random.default_rng(template_seed)
    yy, xx = np.mgrid[0:height, 0:width]
    modes = []
    for fy in range(3):
        for fx in range(3):
            if fy == fx == 0:
                continue
            modes.append(
                np.cos(np.pi * fy * (yy + 0.5) / height)
                * np.cos(np.pi * fx * (xx + 0.5) / width)
            )
    mode_stack = np.stack(modes)
    templates = []
    for _ in range(n_classes):
        coef = template_rng.normal(size=len(modes))
        top = np.argsort(-np.abs(coef))[:n_modes]
        mask = np.zeros_like(coef)
        mask[top] = coef[top]
        t = np.clip(np.tensordot(mask, mode_stack, axes=1), 0.0, None)
        templates.append(t / t.max())

    out: list[tuple[RawImage, int]] = []
    order = np.repeat(np.arange(n_classes), n_per_class)
    rng.shuffle(order)
    for label in order:
        dy, dx = rng.normal(scale=shift, size=2)
        img = np.roll(templates[label], (int(round(dy)), int(round(dx))), axis=(0, 1))
        img = img * (1.0 + wobble * rng.normal())
        img = np.clip(img + noise * rng.random(size=(height, width)), 0.0, 1.0)
        out.append((RawImage(width=width, height=height, pixels=img.reshape(-1)), int(label)))
    return out
