"""Data pipeline: volume IO, normalization, slicing, masking, and phantom generation.

On-disk layout for a dataset root::

    <root>/<subject_id>/<modality>.f32   raw little-endian float32, C-order, D*H*W values
    <root>/<subject_id>/labels.u8        optional tissue label map, raw uint8, D*H*W values
    <root>/<subject_id>/meta.txt         UTF-8 key=value lines (shape, modalities,
                                         normalization mode, per-modality priors)

All in-memory images are float32 in [-1, 1] once normalized; modality axis is
always first (index order matches the ``modalities`` list in ``meta.txt``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DataError,
    DegenerateRangeError,
    ParameterError,
    PriorError,
    ShapeMismatchError,
)

# Tissue label codes used by label maps (phantom and otherwise).
LABEL_BACKGROUND = 0
LABEL_SKULL = 1
LABEL_GRAY = 2
LABEL_WHITE = 3
LABEL_CSF = 4
LABEL_LESION_CORE = 5
LABEL_LESION_RIM = 6
N_LABELS = 7

DEFAULT_MODALITY_NAMES = {
    2: ("T1", "T2"),
    3: ("T1", "T2", "PD"),
    4: ("T1", "T2", "T1c", "FL"),
}

META_FILENAME = "meta.txt"
LABELS_FILENAME = "labels.u8"


def check_availability_mask(mask: Sequence[int], n_modalities: int) -> tuple[int, ...]:
    """Validate an availability mask and return it as a tuple of 0/1 ints."""
    mask = tuple(int(m) for m in mask)
    if len(mask) != n_modalities:
        raise ParameterError(
            f"availability mask has length {len(mask)}, expected {n_modalities}"
        )
    if any(m not in (0, 1) for m in mask):
        raise ParameterError(f"availability mask entries must be 0 or 1, got {mask}")
    return mask


@dataclass
class MultisequenceVolume:
    """A co-registered multi-sequence volume for one subject.

    ``volumes`` is ``[N, D, H, W]`` float32; slots for unavailable modalities
    (``available[i] == 0``) are zero-filled placeholders.
    """

    subject_id: str
    modalities: tuple[str, ...]
    volumes: np.ndarray
    available: tuple[int, ...]
    labels: np.ndarray | None = None
    priors: dict[str, float] | None = None
    normalization: str = "native"
    extra: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.modalities = tuple(self.modalities)
        if self.volumes.ndim != 4:
            raise ShapeMismatchError(
                f"volumes must be [N, D, H, W], got shape {self.volumes.shape}"
            )
        if self.volumes.shape[0] != len(self.modalities):
            raise ShapeMismatchError(
                f"{len(self.modalities)} modalities declared but volumes has "
                f"{self.volumes.shape[0]} channels"
            )
        if self.volumes.dtype != np.float32:
            raise DataError(f"volumes must be float32, got {self.volumes.dtype}")
        self.available = check_availability_mask(self.available, len(self.modalities))
        if self.labels is not None:
            if self.labels.shape != self.volumes.shape[1:]:
                raise ShapeMismatchError(
                    f"labels shape {self.labels.shape} does not match volume "
                    f"shape {self.volumes.shape[1:]}"
                )
            if self.labels.dtype != np.uint8:
                raise DataError(f"labels must be uint8, got {self.labels.dtype}")

    @property
    def n_modalities(self) -> int:
        return len(self.modalities)

    @property
    def shape(self) -> tuple[int, int, int]:
        """(D, H, W) of each modality volume."""
        return self.volumes.shape[1:]

    def brain_mask(self, source: str = "provided") -> np.ndarray:
        """Boolean [D, H, W] head mask.

        ``provided`` uses the shipped label map (any non-background label);
        ``nonzero`` marks voxels where any *available* modality exceeds its
        per-volume minimum, which works whether background is 0 (raw) or -1
        (normalized).
        """
        if source == "provided":
            if self.labels is None:
                raise DataError(
                    f"subject {self.subject_id}: mask source 'provided' requires a label map"
                )
            return self.labels > 0
        if source == "nonzero":
            mask = np.zeros(self.shape, dtype=bool)
            for i, avail in enumerate(self.available):
                if avail:
                    vol = self.volumes[i]
                    mask |= vol > vol.min()
            return mask
        raise ParameterError(f"unknown mask source {source!r}")

    def validate_range(self) -> None:
        """Raise if any voxel falls outside the normalized [-1, 1] contract."""
        lo = float(self.volumes.min())
        hi = float(self.volumes.max())
        if lo < -1.0 or hi > 1.0:
            raise DataError(
                f"subject {self.subject_id}: intensities outside [-1, 1] "
                f"(min {lo:.4f}, max {hi:.4f})"
            )


@dataclass
class SliceRecord:
    """One axial slice selected for training or evaluation."""

    subject_id: str
    slice_index: int
    images: np.ndarray  # [N, H, W] float32, full (unmasked) intensities
    brain_pixels: int
    labels: np.ndarray | None = None  # [H, W] uint8
    priors: np.ndarray | None = None  # [N] float32, per-modality intensity priors

    @property
    def n_modalities(self) -> int:
        return self.images.shape[0]


@dataclass
class SlicePolicy:
    """Slice selection rule applied per volume.

    ``brain_threshold`` keeps slices whose head mask has at least
    ``min_brain_pixels`` pixels; ``center_k`` keeps the ``center_k`` middle
    slices; ``all`` keeps everything.
    """

    mode: str = "brain_threshold"
    min_brain_pixels: int = 2000
    center_k: int = 80

    def __post_init__(self) -> None:
        if self.mode not in ("brain_threshold", "center_k", "all"):
            raise ParameterError(f"unknown slice policy mode {self.mode!r}")
        if self.min_brain_pixels < 0:
            raise ParameterError("min_brain_pixels must be >= 0")
        if self.center_k <= 0:
            raise ParameterError("center_k must be positive")


def selected_slice_indices(
    volume: MultisequenceVolume, policy: SlicePolicy, mask_source: str = "provided"
) -> list[int]:
    """Indices (ascending, no duplicates) of slices the policy keeps."""
    depth = volume.shape[0]
    if policy.mode == "all":
        return list(range(depth))
    if policy.mode == "center_k":
        if policy.center_k > depth:
            raise ParameterError(
                f"center_k={policy.center_k} exceeds volume depth {depth}"
            )
        start = (depth - policy.center_k) // 2
        return list(range(start, start + policy.center_k))
    mask = volume.brain_mask(mask_source)
    counts = mask.reshape(depth, -1).sum(axis=1)
    return [z for z in range(depth) if counts[z] >= policy.min_brain_pixels]


def extract_slices(
    volume: MultisequenceVolume, policy: SlicePolicy, mask_source: str = "provided"
) -> list[SliceRecord]:
    """Materialize the selected slices of a volume as ``SliceRecord`` objects."""
    indices = selected_slice_indices(volume, policy, mask_source)
    try:
        mask = volume.brain_mask(mask_source)
    except DataError:
        mask = None  # only needed for the count; policies above already ran
    priors = None
    if volume.priors is not None:
        priors = np.array(
            [volume.priors[name] for name in volume.modalities], dtype=np.float32
        )
    records = []
    for z in indices:
        count = int(mask[z].sum()) if mask is not None else 0
        records.append(
            SliceRecord(
                subject_id=volume.subject_id,
                slice_index=z,
                images=volume.volumes[:, z],
                brain_pixels=count,
                labels=None if volume.labels is None else volume.labels[z],
                priors=priors,
            )
        )
    return records


def apply_availability_mask(images: np.ndarray, mask: Sequence[int]) -> np.ndarray:
    """Zero out unavailable modalities: ``X_i = I_i * AS_i``.

    ``images`` is ``[N, H, W]``; returns a new array, input untouched.
    The operation is idempotent: masking an already-masked stack is a no-op.
    """
    mask = check_availability_mask(mask, images.shape[0])
    scale = np.asarray(mask, dtype=images.dtype).reshape(-1, 1, 1)
    return images * scale


# ---------------------------------------------------------------------------
# Normalization


def normalize_intensity(
    volume: np.ndarray, mode: str = "minmax", upper_percentile: float = 99.5
) -> np.ndarray:
    """Linearly rescale a single-modality volume to [-1, 1].

    ``minmax`` maps [min, max] onto [-1, 1]. ``percentile`` first clips the
    upper tail at the given percentile (robust to hot voxels), then rescales.
    A constant volume has no meaningful scale and raises
    ``DegenerateRangeError``.
    """
    volume = np.asarray(volume, dtype=np.float32)
    lo = float(volume.min())
    if mode == "minmax":
        hi = float(volume.max())
    elif mode == "percentile":
        if not 0.0 < upper_percentile <= 100.0:
            raise ParameterError(f"upper_percentile must be in (0, 100], got {upper_percentile}")
        hi = float(np.percentile(volume, upper_percentile))
    else:
        raise ParameterError(f"unknown normalization mode {mode!r}")
    if hi <= lo:
        raise DegenerateRangeError(
            f"degenerate intensity range [{lo}, {hi}] under mode {mode!r}"
        )
    clipped = np.clip(volume, lo, hi)
    scaled = (clipped - lo) / (hi - lo) * 2.0 - 1.0
    return np.clip(scaled, -1.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# Intensity priors


def soft_tissue_mask(labels: np.ndarray) -> np.ndarray:
    """Soft-tissue voxels (everything but background and skull)."""
    return labels >= LABEL_GRAY


def compute_intensity_prior(volume: np.ndarray, tissue_mask: np.ndarray) -> float:
    """Median intensity over the soft-tissue region of one modality volume."""
    if volume.shape != tissue_mask.shape:
        raise ShapeMismatchError(
            f"volume shape {volume.shape} does not match mask shape {tissue_mask.shape}"
        )
    values = volume[tissue_mask]
    if values.size == 0:
        raise PriorError("tissue mask selects no voxels; cannot compute intensity prior")
    prior = float(np.median(values))
    if not -1.0 <= prior <= 1.0:
        raise PriorError(f"intensity prior {prior} outside the normalized range [-1, 1]")
    return prior


def compute_dataset_mean_prior(root: str | Path, modality: str) -> float:
    """Mean of the stored per-subject priors for one modality across a dataset."""
    values = []
    for subject_dir in list_subjects(root):
        meta = read_meta(subject_dir / META_FILENAME)
        key = f"prior_{modality}"
        if key in meta:
            values.append(float(meta[key]))
    if not values:
        raise PriorError(f"no stored priors for modality {modality!r} under {root}")
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# On-disk IO


def read_meta(path: Path) -> dict[str, str]:
    if not path.is_file():
        raise FileNotFoundError(f"missing metadata file {path}")
    meta: dict[str, str] = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"malformed metadata line in {path}: {line!r}")
        key, value = line.split("=", 1)
        meta[key.strip()] = value.strip()
    return meta


def write_meta(path: Path, meta: dict[str, str]) -> None:
    lines = [f"{key}={value}" for key, value in meta.items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def save_volume_set(root: str | Path, volume: MultisequenceVolume) -> Path:
    """Write one subject under ``root`` in the f32 + meta.txt layout.

    Only available modalities get an ``.f32`` file; the metadata still lists
    the full modality order so loaders can tell present from missing.
    """
    subject_dir = Path(root) / volume.subject_id
    subject_dir.mkdir(parents=True, exist_ok=True)
    depth, height, width = volume.shape
    meta: dict[str, str] = {
        "subject": volume.subject_id,
        "shape": f"{depth},{height},{width}",
        "modalities": ",".join(volume.modalities),
        "normalization": volume.normalization,
        "has_labels": "1" if volume.labels is not None else "0",
    }
    if volume.priors is not None:
        for name in volume.modalities:
            if name in volume.priors:
                meta[f"prior_{name}"] = repr(float(volume.priors[name]))
    meta.update(volume.extra)
    write_meta(subject_dir / META_FILENAME, meta)
    for i, name in enumerate(volume.modalities):
        if volume.available[i]:
            (subject_dir / f"{name}.f32").write_bytes(
                np.ascontiguousarray(volume.volumes[i], dtype="<f4").tobytes()
            )
    if volume.labels is not None:
        (subject_dir / LABELS_FILENAME).write_bytes(
            np.ascontiguousarray(volume.labels).tobytes()
        )
    return subject_dir


def load_volume_set(subject_dir: str | Path) -> MultisequenceVolume:
    """Load one subject directory; missing modality files become zero slots."""
    subject_dir = Path(subject_dir)
    meta = read_meta(subject_dir / META_FILENAME)
    for required in ("shape", "modalities"):
        if required not in meta:
            raise DataError(f"{subject_dir}: metadata lacks required key {required!r}")
    try:
        depth, height, width = (int(x) for x in meta["shape"].split(","))
    except ValueError as exc:
        raise DataError(f"{subject_dir}: bad shape entry {meta['shape']!r}") from exc
    modalities = tuple(m for m in meta["modalities"].split(",") if m)
    if not modalities:
        raise DataError(f"{subject_dir}: empty modality list")
    n_voxels = depth * height * width

    volumes = np.zeros((len(modalities), depth, height, width), dtype=np.float32)
    available = []
    for i, name in enumerate(modalities):
        path = subject_dir / f"{name}.f32"
        if path.is_file():
            raw = np.frombuffer(path.read_bytes(), dtype="<f4")
            if raw.size != n_voxels:
                raise ShapeMismatchError(
                    f"{path}: {raw.size} values on disk, expected {n_voxels} "
                    f"for shape {depth}x{height}x{width}"
                )
            volumes[i] = raw.reshape(depth, height, width)
            available.append(1)
        else:
            available.append(0)
    if not any(available):
        raise DataError(f"{subject_dir}: no modality files found")

    labels = None
    labels_path = subject_dir / LABELS_FILENAME
    if labels_path.is_file():
        raw = np.frombuffer(labels_path.read_bytes(), dtype=np.uint8)
        if raw.size != n_voxels:
            raise ShapeMismatchError(
                f"{labels_path}: {raw.size} values on disk, expected {n_voxels}"
            )
        labels = raw.reshape(depth, height, width).copy()

    priors = None
    prior_items = {
        name: float(meta[f"prior_{name}"])
        for name in modalities
        if f"prior_{name}" in meta
    }
    if prior_items:
        priors = prior_items

    consumed = {"subject", "shape", "modalities", "normalization", "has_labels"}
    consumed |= {f"prior_{name}" for name in modalities}
    extra = {k: v for k, v in meta.items() if k not in consumed}

    return MultisequenceVolume(
        subject_id=meta.get("subject", subject_dir.name),
        modalities=modalities,
        volumes=volumes,
        available=tuple(available),
        labels=labels,
        priors=priors,
        normalization=meta.get("normalization", "native"),
        extra=extra,
    )


def list_subjects(root: str | Path) -> list[Path]:
    """Sorted subject directories (those containing a meta.txt) under root."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    return sorted(
        p for p in root.iterdir() if p.is_dir() and (p / META_FILENAME).is_file()
    )


def load_dataset(
    root: str | Path,
    policy: SlicePolicy | None = None,
    mask_source: str = "provided",
    require_complete: bool = False,
) -> list[SliceRecord]:
    """Load every subject under root and flatten to slice records."""
    policy = policy or SlicePolicy(mode="all")
    records: list[SliceRecord] = []
    for subject_dir in list_subjects(root):
        volume = load_volume_set(subject_dir)
        if require_complete and not all(volume.available):
            raise DataError(
                f"subject {volume.subject_id} is incomplete "
                f"(available={volume.available}); a complete dataset is required"
            )
        records.extend(extract_slices(volume, policy, mask_source))
    if not records:
        raise DataError(f"no slices selected from dataset {root}")
    return records


# ---------------------------------------------------------------------------
# Phantom generation


def contrast_table(n_modalities: int) -> np.ndarray:
    """Per-modality intensity assigned to each tissue label, shape [N, 7].

    The lesion is deliberately split across inputs: its core has distinct
    contrast only in modality 0 (elsewhere it matches white matter except in
    modalities >= 2), its rim only in modality 1, while modalities >= 2 show
    the full lesion extent at a single uniform value. Recovering those later
    modalities therefore requires combining what modalities 0 and 1 each see.
    """
    table = np.array(
        [
            #  bg   skull   GM     WM    CSF   core   rim
            [-1.0, -0.45, 0.10, 0.42, -0.62, 0.85, 0.42],
            [-1.0, -0.55, 0.28, -0.05, 0.72, -0.05, 0.80],
            [-1.0, -0.35, 0.05, 0.30, -0.50, 0.65, 0.65],
            [-1.0, -0.50, 0.20, 0.08, -0.75, 0.70, 0.70],
        ],
        dtype=np.float32,
    )
    if not 2 <= n_modalities <= table.shape[0]:
        raise ParameterError(
            f"phantom supports 2..{table.shape[0]} modalities, got {n_modalities}"
        )
    return table[:n_modalities]


def _ellipse_mask(
    height: int, width: int, cy: float, cx: float, ay: float, ax: float
) -> np.ndarray:
    if ay <= 0 or ax <= 0:
        return np.zeros((height, width), dtype=bool)
    yy, xx = np.mgrid[0:height, 0:width]
    return ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2 <= 1.0


def _render_subject_labels(
    rng: np.random.Generator, size: int, depth: int, lesion_prob: float
) -> np.ndarray:
    """Draw one subject's label volume: nested head/tissue ellipses plus an
    optional two-part lesion, scaled along z so the stack ends taper to empty
    slices."""
    labels = np.zeros((depth, size, size), dtype=np.uint8)

    cy = size * (0.5 + rng.uniform(-0.03, 0.03))
    cx = size * (0.5 + rng.uniform(-0.03, 0.03))
    head_ay = size * rng.uniform(0.30, 0.38)
    head_ax = size * rng.uniform(0.30, 0.38)
    brain_scale = rng.uniform(0.82, 0.90)
    white_scale = rng.uniform(0.55, 0.65)
    csf_scale = rng.uniform(0.12, 0.20)
    csf_dy = size * rng.uniform(-0.04, 0.04)
    csf_dx = size * rng.uniform(-0.04, 0.04)

    zc = depth * (0.5 + rng.uniform(-0.05, 0.05))
    zr = depth * rng.uniform(0.40, 0.46)

    has_lesion = rng.random() < lesion_prob
    # Lesion parameters are always drawn so the RNG stream does not depend on
    # the lesion coin flip; they are simply unused for lesion-free subjects.
    theta = rng.uniform(0.0, 2.0 * math.pi)
    radial = rng.uniform(0.25, 0.55)
    core_r = size * rng.uniform(0.06, 0.10)
    rim_r = core_r * rng.uniform(1.5, 1.9)
    lz_c = zc + rng.uniform(-0.4, 0.4) * zr
    lz_r = zr * rng.uniform(0.30, 0.55)
    ly = cy + radial * head_ay * white_scale * math.sin(theta)
    lx = cx + radial * head_ax * white_scale * math.cos(theta)

    for z in range(depth):
        s2 = 1.0 - ((z - zc) / zr) ** 2
        s = math.sqrt(s2) if s2 > 0 else 0.0
        if s < 0.35:
            continue  # outside the head: slice stays empty
        head = _ellipse_mask(size, size, cy, cx, head_ay * s, head_ax * s)
        brain = _ellipse_mask(
            size, size, cy, cx, head_ay * s * brain_scale, head_ax * s * brain_scale
        )
        white = _ellipse_mask(
            size, size, cy, cx, head_ay * s * white_scale, head_ax * s * white_scale
        )
        csf = _ellipse_mask(
            size,
            size,
            cy + csf_dy,
            cx + csf_dx,
            head_ay * s * csf_scale,
            head_ax * s * csf_scale,
        )
        plane = labels[z]
        plane[head] = LABEL_SKULL
        plane[brain] = LABEL_GRAY
        plane[white] = LABEL_WHITE
        plane[csf & brain] = LABEL_CSF

        if has_lesion:
            t2 = 1.0 - ((z - lz_c) / lz_r) ** 2
            t = math.sqrt(t2) if t2 > 0 else 0.0
            if t >= 0.4:
                rim = _ellipse_mask(size, size, ly, lx, rim_r * t, rim_r * t)
                core = _ellipse_mask(size, size, ly, lx, core_r * t, core_r * t)
                inside = brain  # lesion never spills outside the brain
                plane[rim & inside] = LABEL_LESION_RIM
                plane[core & inside] = LABEL_LESION_CORE
    return labels


def render_modalities(
    labels: np.ndarray,
    table: np.ndarray,
    offsets: np.ndarray | None = None,
    noise_sigma: float = 0.0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Map a label volume through per-modality contrast tables.

    ``offsets`` (one scalar per modality) shifts all non-background tissue,
    emulating per-acquisition gain differences; Gaussian noise is added last
    and the result clipped back to [-1, 1].
    """
    n_modalities = table.shape[0]
    volumes = table[:, labels.astype(np.int64)]  # [N, D, H, W]
    if offsets is not None:
        tissue = (labels > 0)[None].astype(np.float32)
        volumes = volumes + np.asarray(offsets, dtype=np.float32).reshape(
            n_modalities, 1, 1, 1
        ) * tissue
    if noise_sigma > 0:
        if rng is None:
            raise ParameterError("noise_sigma > 0 requires an RNG")
        volumes = volumes + rng.normal(0.0, noise_sigma, size=volumes.shape)
    return np.clip(volumes, -1.0, 1.0).astype(np.float32)


def generate_phantom_subject(
    rng: np.random.Generator,
    subject_id: str,
    size: int,
    depth: int,
    n_modalities: int,
    lesion_prob: float,
    noise_sigma: float,
    intensity_jitter: float,
    modality_names: Sequence[str],
) -> MultisequenceVolume:
    labels = _render_subject_labels(rng, size, depth, lesion_prob)
    table = contrast_table(n_modalities)
    offsets = rng.uniform(-intensity_jitter, intensity_jitter, size=n_modalities)
    volumes = render_modalities(labels, table, offsets, noise_sigma, rng)
    tissue = soft_tissue_mask(labels)
    priors = {
        name: compute_intensity_prior(volumes[i], tissue)
        for i, name in enumerate(modality_names)
    }
    return MultisequenceVolume(
        subject_id=subject_id,
        modalities=tuple(modality_names),
        volumes=volumes,
        available=(1,) * n_modalities,
        labels=labels,
        priors=priors,
        normalization="native",
    )


def generate_phantom_dataset(
    out_dir: str | Path,
    n_subjects: int,
    seed: int,
    size: int = 64,
    depth: int = 12,
    n_modalities: int = 4,
    lesion_prob: float = 0.5,
    noise_sigma: float = 0.02,
    intensity_jitter: float = 0.12,
    modality_names: Sequence[str] | None = None,
) -> dict:
    """Write a deterministic synthetic dataset and return its manifest.

    The same (seed, parameters) always produce byte-identical files; each
    subject's randomness comes from an independent spawned stream, so subject
    k does not depend on how many subjects precede it.
    """
    if size < 32:
        raise ParameterError(f"phantom size must be >= 32, got {size}")
    if depth < 4:
        raise ParameterError(f"phantom depth must be >= 4, got {depth}")
    if n_subjects < 1:
        raise ParameterError("n_subjects must be >= 1")
    if not 0.0 <= lesion_prob <= 1.0:
        raise ParameterError(f"lesion_prob must be in [0, 1], got {lesion_prob}")
    if modality_names is None:
        modality_names = DEFAULT_MODALITY_NAMES.get(
            n_modalities, tuple(f"M{i}" for i in range(n_modalities))
        )
    if len(modality_names) != n_modalities:
        raise ParameterError(
            f"{len(modality_names)} modality names given for {n_modalities} modalities"
        )

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    streams = np.random.SeedSequence(seed).spawn(n_subjects)
    subjects = []
    for k in range(n_subjects):
        rng = np.random.Generator(np.random.PCG64(streams[k]))
        subject_id = f"s{k:03d}"
        volume = generate_phantom_subject(
            rng,
            subject_id,
            size,
            depth,
            n_modalities,
            lesion_prob,
            noise_sigma,
            intensity_jitter,
            modality_names,
        )
        save_volume_set(out_dir, volume)
        subjects.append(subject_id)
    return {
        "root": str(out_dir),
        "subjects": subjects,
        "n_subjects": n_subjects,
        "n_modalities": n_modalities,
        "modalities": list(modality_names),
        "size": size,
        "depth": depth,
        "seed": seed,
    }
