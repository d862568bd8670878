"""Paired snowy/clean image loading, patch cropping and dihedral augmentation."""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
import re

import numpy as np
import torch

from .errors import DatasetError, DimensionError
from .imageio import read_png

SNOW_SUFFIX = "_snow.png"
GT_SUFFIX = "_gt.png"
_PAIR_RE = re.compile(r"^(?P<id>.+)_(?P<kind>snow|gt)\.png$")


@dataclass
class PairSample:
    snowy: np.ndarray
    clean: np.ndarray
    source_id: str

    def __post_init__(self):
        if self.snowy.shape != self.clean.shape:
            raise DimensionError(
                f"pair {self.source_id}: snowy {self.snowy.shape} vs clean {self.clean.shape}"
            )


class PairSource:
    """Indexed, read-only access to the pairs of one directory.

    Images are decoded lazily and cached; ``__getitem__`` is safe to call
    from several threads.
    """

    def __init__(self, directory, ids):
        self.directory = Path(directory)
        self.ids = list(ids)
        self._cache = {}

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, index):
        sid = self.ids[index]
        sample = self._cache.get(sid)
        if sample is None:
            sample = PairSample(
                snowy=read_png(self.directory / f"{sid}{SNOW_SUFFIX}"),
                clean=read_png(self.directory / f"{sid}{GT_SUFFIX}"),
                source_id=sid,
            )
            self._cache[sid] = sample
        return sample

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


def scan_pairs(directory):
    """Return ``(ids, orphans)`` for ``<id>_snow.png`` / ``<id>_gt.png`` files."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(f"{directory} is not a directory")
    kinds = {}
    for p in directory.iterdir():
        m = _PAIR_RE.match(p.name)
        if m:
            kinds.setdefault(m["id"], set()).add(m["kind"])
    ids = sorted(k for k, v in kinds.items() if v == {"snow", "gt"})
    orphans = sorted(
        str(directory / f"{k}_{next(iter(v))}.png") for k, v in kinds.items() if len(v) == 1
    )
    return ids, orphans


def load_pairs(directory):
    """Index a pair directory, sorted by id.

    Raises :class:`DatasetError` listing every orphaned file.
    """
    ids, orphans = scan_pairs(directory)
    if orphans:
        raise DatasetError(
            f"{len(orphans)} orphaned file(s) in {directory}: " + ", ".join(orphans),
            orphans=orphans,
        )
    if not ids:
        raise DatasetError(f"no image pairs found in {directory}")
    return PairSource(directory, ids)


def reflect_pad(image, min_h, min_w):
    h, w = image.shape[:2]
    ph, pw = max(min_h - h, 0), max(min_w - w, 0)
    if ph == 0 and pw == 0:
        return image
    return np.pad(image, ((0, ph), (0, pw), (0, 0)), mode="symmetric")


def random_patch(sample, size=256, rng=None):
    """Crop the same random ``size x size`` window from both images.

    Images smaller than ``size`` are reflect-padded first.
    """
    rng = rng if rng is not None else np.random.default_rng()
    snowy = reflect_pad(sample.snowy, size, size)
    clean = reflect_pad(sample.clean, size, size)
    h, w = snowy.shape[:2]
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return replace(
        sample,
        snowy=snowy[top: top + size, left: left + size],
        clean=clean[top: top + size, left: left + size],
    )


def dihedral(image, rotations, flip):
    """``rot90`` by ``rotations`` quarter turns, then optional horizontal flip."""
    out = np.rot90(image, rotations, axes=(0, 1))
    if flip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def augment(sample, rng=None, rotations=None, flip=None):
    """Apply one of the 8 rotation/flip variants, uniformly drawn, to both images."""
    rng = rng if rng is not None else np.random.default_rng()
    if rotations is None or flip is None:
        variant = int(rng.integers(0, 8))
        rotations, flip = variant % 4, variant >= 4
    if rotations % 2 and sample.snowy.shape[0] != sample.snowy.shape[1]:
        raise DimensionError("quarter-turn rotations need a square patch")
    return replace(
        sample,
        snowy=dihedral(sample.snowy, rotations, flip),
        clean=dihedral(sample.clean, rotations, flip),
    )


def _stack(images):
    arr = np.stack([np.asarray(i).transpose(2, 0, 1) for i in images])
    return torch.from_numpy(np.ascontiguousarray(arr)).float()


class BatchLoader:
    """Deterministic training batches.

    The batch for step ``s`` depends only on ``(seed, s)``: its sample
    indices, crop windows and augmentations are drawn from a generator
    seeded with that pair.  Producers (threads) build batches ahead of the
    consumer; ``batches`` yields them in step order regardless of how many
    producers run.
    """

    def __init__(self, source, batch_size, patch_size=256, seed=0, augment=True,
                 producers=1):
        if len(source) == 0:
            raise DatasetError("empty pair source")
        self.source = source
        self.batch_size = batch_size
        self.patch_size = patch_size
        self.seed = seed
        self.augment = augment
        self.producers = max(int(producers), 1)

    def batch(self, step):
        rng = np.random.default_rng([self.seed, step])
        n = len(self.source)
        if self.batch_size <= n:
            idx = rng.choice(n, size=self.batch_size, replace=False)
        else:
            idx = rng.integers(0, n, size=self.batch_size)
        snowy, clean = [], []
        for i in idx:
            s = random_patch(self.source[int(i)], self.patch_size, rng)
            if self.augment:
                s = augment(s, rng)
            snowy.append(s.snowy)
            clean.append(s.clean)
        return _stack(snowy), _stack(clean)

    def batches(self, start, stop):
        if self.producers == 1:
            for step in range(start, stop):
                yield step, self.batch(step)
            return
        with ThreadPoolExecutor(self.producers) as pool:
            window = self.producers * 2
            pending = {}
            nxt = start
            for step in range(start, stop):
                while nxt < stop and nxt < step + window:
                    pending[nxt] = pool.submit(self.batch, nxt)
                    nxt += 1
                yield step, pending.pop(step).result()
