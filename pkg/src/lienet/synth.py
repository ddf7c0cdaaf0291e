"""Synthetic skeleton action data for desk-scale experiments.

Each class is a template of per-bone angular velocities. A sample rotates
every bone's rest direction by its class velocity integrated over time,
adds Gaussian angular jitter, chains the bones into joint positions and
finally applies a random global rotation, translation and scale.

Optional nuisance factors (all off by default): a per-sample speed factor,
a random start offset in frames, and a per-sample perturbation of the rest
pose that mimics different subjects.
"""

from dataclasses import dataclass, field

import numpy as np

from . import liegroup as lg
from .skeleton import SkeletonSequence, SkeletonTopology

# 6 joints, 5 bones: pelvis-chest, chest-head, chest-elbow, elbow-hand, pelvis-knee
DEFAULT_TOPOLOGY = SkeletonTopology(6, ((0, 1), (1, 2), (1, 3), (3, 4), (0, 5)))


@dataclass
class SyntheticTaskSpec:
    class_count: int = 4
    topology: SkeletonTopology = DEFAULT_TOPOLOGY
    frames: int = 20
    sigma: float = 0.1
    samples_per_class: int = 50
    test_per_class: int = 50
    seed: int = 0
    speed_range: tuple = (1.0, 1.0)
    pose_sigma: float = 0.0
    max_offset: float = 0.0
    max_velocity: float = 0.08
    min_template_distance: float = 0.05
    templates: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.class_count < 1 or self.frames < 1 or self.samples_per_class < 0:
            raise ValueError("class_count and frames must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")


def _topological_order(topology):
    # bones ordered so that each bone's start joint is already placed
    placed = {topology.bones[0][0]}
    order, pending = [], list(range(topology.bone_count))
    while pending:
        progress = False
        for b in list(pending):
            s, e = topology.bones[b]
            if s in placed:
                order.append(b)
                placed.add(e)
                pending.remove(b)
                progress = True
        if not progress:
            raise ValueError("synthetic generator needs a tree-shaped topology rooted at bone 0")
    return order


def make_templates(spec, rng):
    """Per-class angular velocities ``(K, M, 3)``, pairwise distinct."""
    m = spec.topology.bone_count
    for _ in range(1000):
        v = rng.standard_normal((spec.class_count, m, 3))
        v *= spec.max_velocity / np.sqrt(3.0)
        flat = v.reshape(spec.class_count, -1)
        d = np.linalg.norm(flat[:, None] - flat[None], axis=-1)
        np.fill_diagonal(d, np.inf)
        if d.min() > spec.min_template_distance:
            return v
    raise RuntimeError("could not draw distinct class templates")


def _rest_pose(topology, rng):
    dirs = rng.standard_normal((topology.bone_count, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    lengths = rng.uniform(0.5, 1.5, topology.bone_count)
    return dirs, lengths


def _sample(spec, order, dirs, lengths, velocity, rng):
    topo = spec.topology
    t = np.arange(spec.frames, dtype=float) + rng.uniform(0.0, spec.max_offset)
    speed = rng.uniform(*spec.speed_range)
    # per-sample subject variation of the rest pose
    dirs = np.einsum(
        "mij,mj->mi", lg.exp_map(lg.hat(spec.pose_sigma * rng.standard_normal(dirs.shape))), dirs
    )
    # (T, M, 3, 3) template rotation times jitter
    motion = lg.exp_map(lg.hat(speed * t[:, None, None] * velocity[None]))
    jitter = lg.exp_map(lg.hat(spec.sigma * rng.standard_normal((spec.frames, topo.bone_count, 3))))
    bone_dirs = np.einsum("tmij,tmjk,mk->tmi", jitter, motion, dirs)
    pos = np.zeros((spec.frames, topo.joint_count, 3))
    for b in order:
        s, e = topo.bones[b]
        pos[:, e] = pos[:, s] + lengths[b] * bone_dirs[:, b]
    g = lg.random_rotation(rng)
    offset = rng.uniform(-2.0, 2.0, 3)
    scale = rng.uniform(0.5, 2.0)
    return scale * pos @ g.T + offset


def generate(spec):
    """Return ``(templates, train, test)``; sequences are SkeletonSequence lists.

    Class labels are ``c0 .. c{K-1}``. Output depends only on ``spec``.
    """
    rng = np.random.default_rng(spec.seed)
    templates = spec.templates if spec.templates is not None else make_templates(spec, rng)
    dirs, lengths = _rest_pose(spec.topology, rng)
    order = _topological_order(spec.topology)
    splits = []
    for split, per_class in (("train", spec.samples_per_class), ("test", spec.test_per_class)):
        seqs = []
        for i in range(per_class):
            for c in range(spec.class_count):
                pos = _sample(spec, order, dirs, lengths, templates[c], rng)
                seqs.append(SkeletonSequence(pos, f"c{c}", f"{split}-{c}-{i:04d}"))
        splits.append(seqs)
    return templates, splits[0], splits[1]
