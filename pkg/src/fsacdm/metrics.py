"""Image comparison metrics: DTW over pixel columns, RMSE, SSIM, PSNR,
ERGAS and RASE, plus batch evaluation over paired directories.

All metrics take float images in [0, 1] and rescale to [0, 255] internally
so the values line up with the usual 8-bit conventions.  Where a reference
image is needed it is always the second argument.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

SCALE = 255.0


def binarize(img: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Threshold to {0, 1}; values equal to the threshold count as ink."""
    return (np.asarray(img) >= threshold).astype(np.float64)


def dtw(a: np.ndarray, b: np.ndarray) -> float:
    """Dynamic time warping distance between two images read as column
    sequences, with unit steps and Euclidean column cost, unnormalized.

    Inputs are (H, Wa) and (H, Wb); 1-D inputs are treated as height-1.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"dtw: height mismatch {a.shape} vs {b.shape}")
    n, m = a.shape[1], b.shape[1]
    if n == 0 or m == 0:
        raise ValueError("dtw: empty sequence")
    # cost[i, j] = Euclidean distance between column i of a and column j of b
    diff = a.T[:, None, :] - b.T[None, :, :]
    cost = np.sqrt((diff ** 2).sum(axis=2))
    acc = np.full((n, m), np.inf)
    acc[0, 0] = cost[0, 0]
    for i in range(1, n):
        acc[i, 0] = cost[i, 0] + acc[i - 1, 0]
    for j in range(1, m):
        acc[0, j] = cost[0, j] + acc[0, j - 1]
    for i in range(1, n):
        acc[i, 1:] = cost[i, 1:]
        prev = np.minimum(acc[i - 1, 1:], acc[i - 1, :-1])
        for j in range(1, m):
            acc[i, j] += min(prev[j - 1], acc[i, j - 1])
    return float(acc[n - 1, m - 1])


def rmse(img: np.ndarray, ref: np.ndarray) -> float:
    """Root mean squared error on the [0, 255] scale."""
    img, ref = _check_pair(img, ref)
    return float(np.sqrt(np.mean((img * SCALE - ref * SCALE) ** 2)))


def ssim(img: np.ndarray, ref: np.ndarray) -> float:
    """Mean structural similarity over 8x8 windows with stride 4.

    Uses the conventional stabilizers C1 = (0.01 * 255)^2 and
    C2 = (0.03 * 255)^2 on the [0, 255] scale.
    """
    img, ref = _check_pair(img, ref)
    a = img * SCALE
    b = ref * SCALE
    c1 = (0.01 * SCALE) ** 2
    c2 = (0.03 * SCALE) ** 2
    h, w = a.shape
    win, step = 8, 4
    if h < win or w < win:
        raise ValueError(f"ssim: image {a.shape} smaller than the 8x8 window")
    vals = []
    for r in range(0, h - win + 1, step):
        for c in range(0, w - win + 1, step):
            pa = a[r:r + win, c:c + win]
            pb = b[r:r + win, c:c + win]
            mu_a = pa.mean()
            mu_b = pb.mean()
            var_a = pa.var()
            var_b = pb.var()
            cov = ((pa - mu_a) * (pb - mu_b)).mean()
            num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
            den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
            vals.append(num / den)
    return float(np.mean(vals))


def psnr(img: np.ndarray, ref: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB against peak 255, capped at 100."""
    e = rmse(img, ref)
    if e == 0.0:
        return 100.0
    return float(min(100.0, 20.0 * math.log10(SCALE / e)))


def ergas(img: np.ndarray, ref: np.ndarray) -> float:
    """ERGAS with unit resolution ratio; single-band for grayscale input."""
    img, ref = _check_pair(img, ref)
    mu = ref.mean() * SCALE
    if mu == 0.0:
        raise ValueError("ergas: reference mean is zero")
    return float(100.0 * math.sqrt((rmse(img, ref) / mu) ** 2))


def rase(img: np.ndarray, ref: np.ndarray) -> float:
    """Relative average spectral error against the reference mean."""
    img, ref = _check_pair(img, ref)
    mu = ref.mean() * SCALE
    if mu == 0.0:
        raise ValueError("rase: reference mean is zero")
    return float((100.0 / mu) * math.sqrt(rmse(img, ref) ** 2))


def _check_pair(img, ref):
    img = np.asarray(img, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if img.shape != ref.shape:
        raise ValueError(f"shape mismatch {img.shape} vs {ref.shape}")
    return img, ref


METRIC_NAMES = ("dtw", "rmse", "ssim", "psnr", "ergas", "rase")


def _load_gray(path: Path) -> np.ndarray:
    if path.suffix.lower() == ".pgm":
        from .corpus import read_pgm

        return read_pgm(path)
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def evaluate_set(generated_dir, reference_dir, csv_path=None, allow_partial=False):
    """Compare images paired by filename and return per-file metric rows.

    Returns (rows, means) where rows is a list of dicts with a ``name`` key
    plus one entry per metric, and means averages each metric.  The dtw
    column follows the column-series protocol (both images binarized at
    0.5 first); the remaining metrics compare raw grayscale.  Filenames
    present on only one side raise unless ``allow_partial`` is set, in which
    case they are skipped and reported in the returned ``means['skipped']``.
    If ``csv_path`` is given the table is also written as CSV with a final
    mean row.
    """
    gen_dir, ref_dir = Path(generated_dir), Path(reference_dir)
    exts = (".pgm", ".png")
    gen_files = {p.name: p for p in sorted(gen_dir.iterdir()) if p.suffix.lower() in exts}
    ref_files = {p.name: p for p in sorted(ref_dir.iterdir()) if p.suffix.lower() in exts}
    unmatched = sorted(set(gen_files) ^ set(ref_files))
    if unmatched and not allow_partial:
        raise ValueError(f"unmatched filenames: {', '.join(unmatched)}")
    names = sorted(set(gen_files) & set(ref_files))
    if not names:
        raise ValueError("no paired images to evaluate")
    rows = []
    # TODO: fan per-pair scoring out to a process pool once corpora outgrow
    # a few hundred images; rows are independent and ordering is restored
    # by the sort above
    for name in names:
        a = _load_gray(gen_files[name])
        b = _load_gray(ref_files[name])
        row = {"name": name}
        for metric in METRIC_NAMES:
            if metric == "dtw":
                # the column-series protocol compares binarized ink columns;
                # the pixel metrics below stay on the raw grayscale
                row[metric] = dtw(binarize(a), binarize(b))
            else:
                row[metric] = globals()[metric](a, b)
        rows.append(row)
    means = {metric: float(np.mean([r[metric] for r in rows])) for metric in METRIC_NAMES}
    means["skipped"] = unmatched
    if csv_path is not None:
        with open(csv_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(("name",) + METRIC_NAMES)
            for row in rows:
                writer.writerow([row["name"]] + [repr(row[m]) for m in METRIC_NAMES])
            writer.writerow(["mean"] + [repr(means[m]) for m in METRIC_NAMES])
    return rows, means
