"""Glue between skeleton files, feature caches and training datasets."""

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .errors import EmptyDataset, MalformedFile, UnknownLabel
from .skeleton import (
    ExtractionStats,
    read_feature_cache,
    resample_sequence,
    sequence_to_lie,
    write_feature_cache,
)
from .training import Dataset

INDEX_NAME = "index.csv"


def worker_count():
    raw = os.environ.get("LIENET_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        n = os.cpu_count() or 1
    return max(1, n)


def extract(topology, sequences, length, mode="geodesic", threads=None):
    """Lie-group curves of fixed ``length`` for raw skeleton sequences.

    Returns:
        ``(lie_sequences, stats)``; order follows ``sequences``.
    """

    def one(seq):
        stats = ExtractionStats()
        lie = sequence_to_lie(seq.positions, topology, seq.label, seq.source_id, stats)
        return resample_sequence(lie, length, mode=mode, stats=stats), stats

    threads = threads or worker_count()
    if threads > 1 and len(sequences) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, sequences))
    else:
        results = [one(s) for s in sequences]
    total = ExtractionStats()
    for _, s in results:
        total.merge(s)
    return [r for r, _ in results], total


def to_dataset(lie_sequences, class_names=None):
    """Stack sequences into a Dataset; labels map to sorted class names."""
    if not lie_sequences:
        raise EmptyDataset("no sequences")
    if class_names is None:
        class_names = tuple(sorted({s.label for s in lie_sequences}))
    lookup = {name: i for i, name in enumerate(class_names)}
    missing = sorted({s.label for s in lie_sequences} - lookup.keys())
    if missing:
        raise UnknownLabel(f"labels {missing} not among classes {list(class_names)}")
    shapes = {s.frames.shape for s in lie_sequences}
    if len(shapes) != 1:
        raise MalformedFile(f"sequences have differing shapes {sorted(shapes)}")
    x = np.stack([s.frames for s in lie_sequences])
    y = np.array([lookup[s.label] for s in lie_sequences])
    return Dataset(x, y, tuple(class_names))


def write_cache_dir(directory, lie_sequences):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for seq in lie_sequences:
        name = f"{seq.source_id}.lief"
        write_feature_cache(directory / name, seq)
        rows.append((name, seq.label, seq.source_id))
    with open(directory / INDEX_NAME, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("file", "label", "source_id"))
        w.writerows(rows)


def read_cache_dir(directory):
    directory = Path(directory)
    index = directory / INDEX_NAME
    if not index.exists():
        raise MalformedFile(f"{directory}: missing {INDEX_NAME}")
    with open(index, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [read_feature_cache(directory / r["file"], r["label"], r["source_id"]) for r in rows]
