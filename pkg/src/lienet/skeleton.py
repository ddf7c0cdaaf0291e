"""Skeleton sequences to curves on SO(3) x ... x SO(3).

Each frame of joint positions becomes ``2 * C(M, 2)`` rotations, one for
every ordered pair of bones, describing the partner bone in the local
coordinate system of the reference bone. Sequences are resampled to a fixed
length along geodesics.
"""

import logging
import re
import struct
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path

import numpy as np

from . import liegroup as lg
from .errors import (
    DegenerateBone,
    InconsistentJointCount,
    MalformedFile,
    UnknownLabel,
)

log = logging.getLogger(__name__)

EPS_LEN = 1e-8
EPS_CROSS = 1e-12
DEFAULT_LENGTHS = {"g3d": 100, "hdm05": 16, "ntu": 64}

_X_AXIS = np.array([1.0, 0.0, 0.0])
LIEF_MAGIC = b"LIEF"
LIEF_VERSION = 1


@dataclass(frozen=True)
class SkeletonTopology:
    joint_count: int
    bones: tuple

    def __post_init__(self):
        bones = tuple((int(s), int(e)) for s, e in self.bones)
        object.__setattr__(self, "bones", bones)
        if self.joint_count < 1:
            raise ValueError("joint_count must be positive")
        for s, e in bones:
            if not (0 <= s < self.joint_count and 0 <= e < self.joint_count):
                raise ValueError(f"bone {s}-{e} references a missing joint")
            if s == e:
                raise ValueError(f"bone {s}-{e} connects a joint to itself")

    @property
    def bone_count(self):
        return len(self.bones)

    @property
    def feature_count(self):
        m = self.bone_count
        return m * (m - 1)

    def pair_index(self):
        """Canonical ordered pairs ``(0,1), (1,0), (0,2), (2,0), ...``."""
        return pair_index(self.bone_count)


def pair_index(bone_count):
    out = []
    for m, n in combinations(range(bone_count), 2):
        out.append((m, n))
        out.append((n, m))
    return out


@dataclass
class LieSequence:
    """A curve on the product group: ``frames`` has shape ``(T, M_hat, 3, 3)``."""

    frames: np.ndarray
    label: str = None
    source_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=float)
        if self.frames.ndim != 4 or self.frames.shape[-2:] != (3, 3):
            raise ValueError(f"frames must be (T, M_hat, 3, 3), got {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise ValueError("a sequence needs at least one frame")

    @property
    def length(self):
        return self.frames.shape[0]

    @property
    def feature_count(self):
        return self.frames.shape[1]


@dataclass
class SkeletonSequence:
    """Raw joint positions ``(T, J, 3)`` with a label."""

    positions: np.ndarray
    label: str
    source_id: str = ""


@dataclass
class ExtractionStats:
    """Explicit accumulator for degenerate-bone fallbacks."""

    degenerate_pairs: int = 0
    near_pi_fallbacks: int = 0
    frames: int = 0

    def merge(self, other):
        self.degenerate_pairs += other.degenerate_pairs
        self.near_pi_fallbacks += other.near_pi_fallbacks
        self.frames += other.frames


def edge_vector(frame, topology, bone_index):
    s, e = topology.bones[bone_index]
    frame = np.asarray(frame, dtype=float)
    return frame[e] - frame[s]


def _perpendicular(u):
    # normalized rejection of z from u; y when u is collinear with z
    ref = np.broadcast_to(np.array([0.0, 0.0, 1.0]), u.shape)
    rej = ref - np.sum(ref * u, axis=-1, keepdims=True) * u
    norm = np.linalg.norm(rej, axis=-1, keepdims=True)
    collinear = norm[..., 0] < 1e-9
    alt = np.broadcast_to(np.array([0.0, 1.0, 0.0]), u.shape)
    alt = alt - np.sum(alt * u, axis=-1, keepdims=True) * u
    rej = np.where(collinear[..., None], alt, rej)
    return rej / np.linalg.norm(rej, axis=-1, keepdims=True)


def relative_rotation(em, en, eps_len=EPS_LEN, delta=lg.DELTA_THETA):
    """Minimal rotation carrying the direction of ``em`` onto that of ``en``.

    Works on single vectors or stacks ``(..., 3)``. Antiparallel inputs
    rotate by ``pi - delta`` about a deterministic perpendicular so the
    result stays inside the logarithm's domain.

    Raises:
        DegenerateBone: if either vector is shorter than ``eps_len``.
    """
    em = np.asarray(em, dtype=float)
    en = np.asarray(en, dtype=float)
    lm = np.linalg.norm(em, axis=-1)
    ln = np.linalg.norm(en, axis=-1)
    if np.any(lm <= eps_len) or np.any(ln <= eps_len):
        raise DegenerateBone("bone shorter than the length threshold")
    um = em / lm[..., None]
    un = en / ln[..., None]
    cross = np.cross(um, un)
    sin = np.linalg.norm(cross, axis=-1)
    cos = np.sum(um * un, axis=-1)
    theta = np.minimum(np.arctan2(sin, cos), np.pi - delta)
    aligned = sin <= EPS_CROSS
    safe = np.where(aligned, 1.0, sin)
    axis = cross / safe[..., None]
    anti = aligned & (cos < 0)
    if np.any(anti):
        axis = np.where(anti[..., None], _perpendicular(um), axis)
    theta = np.where(aligned & (cos >= 0), 0.0, np.where(anti, np.pi - delta, theta))
    axis = np.where((aligned & (cos >= 0))[..., None], [0.0, 0.0, 1.0], axis)
    return lg.rotation_from_axis_angle(axis, theta)


def _body_frame(edges, valid):
    # Orthonormal frame fixed to the skeleton: first valid bone is x, the
    # first valid bone not parallel to it spans the xy-plane.
    idx = np.flatnonzero(valid)
    if idx.size == 0:
        return np.eye(3)
    x = edges[idx[0]] / np.linalg.norm(edges[idx[0]])
    for j in idx[1:]:
        c = np.cross(x, edges[j] / np.linalg.norm(edges[j]))
        nc = np.linalg.norm(c)
        if nc > 1e-6:
            z = c / nc
            y = np.cross(z, x)
            return np.stack([x, y, z], axis=1)
    # all valid bones collinear: any completion of x works, the pair
    # rotations are identity or antiparallel in every gauge
    return relative_rotation(_X_AXIS, x)


def frame_to_lie(frame, topology, stats=None):
    """Rotations ``R_{m,n}, R_{n,m}`` for every bone pair of one frame.

    Edges are first expressed in a body-fixed frame, which makes the output
    invariant to any global rotation of the joints. For the pair (m, n) the
    reference bone n is rotated onto the x-axis by the minimal rotation,
    the same rotation is applied to bone m, and ``R_{m,n}`` carries the
    transformed m onto the x-axis.

    Returns:
        ``(M_hat, 3, 3)`` array in :func:`pair_index` order.
    """
    frame = np.asarray(frame, dtype=float)
    if frame.shape != (topology.joint_count, 3):
        raise InconsistentJointCount(
            f"frame has shape {frame.shape}, expected ({topology.joint_count}, 3)"
        )
    return frames_to_lie(frame[None], topology, stats)[0]


def frames_to_lie(positions, topology, stats=None):
    """Vectorized :func:`frame_to_lie` over ``(T, J, 3)`` positions."""
    positions = np.asarray(positions, dtype=float)
    if positions.ndim != 3 or positions.shape[1:] != (topology.joint_count, 3):
        raise InconsistentJointCount(
            f"positions have shape {positions.shape}, expected (T, {topology.joint_count}, 3)"
        )
    starts = np.array([s for s, _ in topology.bones])
    ends = np.array([e for _, e in topology.bones])
    edges = positions[:, ends] - positions[:, starts]
    valid = np.linalg.norm(edges, axis=-1) > EPS_LEN
    body = np.stack([_body_frame(e, v) for e, v in zip(edges, valid)])
    local = np.einsum("tmi,tij->tmj", edges, body)

    t, m = valid.shape
    pairs = np.array(pair_index(m)).reshape(-1, 2)
    part, ref = pairs[:, 0], pairs[:, 1]
    out = np.tile(np.eye(3), (t, len(pairs), 1, 1))
    to_x = np.tile(np.eye(3), (t, m, 1, 1))
    if valid.any():
        to_x[valid] = relative_rotation(local[valid], np.broadcast_to(_X_AXIS, local[valid].shape))
    ok = valid[:, part] & valid[:, ref]
    if ok.any():
        moved = np.einsum("tkij,tkj->tki", to_x[:, ref], local[:, part])[ok]
        out[ok] = relative_rotation(moved, np.broadcast_to(_X_AXIS, moved.shape))
    bad = int(np.count_nonzero(~ok))
    if bad:
        log.warning("%d pair rotations replaced by identity (degenerate bones)", bad)
    if stats is not None:
        stats.degenerate_pairs += bad
        stats.frames += t
    return out


def sequence_to_lie(positions, topology, label=None, source_id="", stats=None):
    return LieSequence(frames_to_lie(positions, topology, stats), label=label, source_id=source_id)


def resample_sequence(seq, n, mode="geodesic", stats=None):
    """Resample to exactly ``n`` frames at uniform positions in ``[0, T-1]``.

    ``mode="geodesic"`` interpolates every matrix along the geodesic between
    its bracketing frames; entries whose relative rotation is too close to
    pi fall back to the nearest frame. ``mode="nearest"`` copies frames.
    """
    if n < 1:
        raise ValueError("target length must be >= 1")
    if mode not in ("geodesic", "nearest"):
        raise ValueError(f"unknown resampling mode {mode!r}")
    frames = seq.frames
    t = frames.shape[0]
    if n == t:
        return LieSequence(frames.copy(), seq.label, seq.source_id)
    pos = np.zeros(1) if n == 1 else np.arange(n) * (t - 1) / (n - 1)
    out = np.empty((n,) + frames.shape[1:])
    for j, p in enumerate(pos):
        i0 = min(int(np.floor(p)), t - 1)
        frac = p - i0
        if frac == 0.0:
            out[j] = frames[i0]
            continue
        r0, r1 = frames[i0], frames[i0 + 1]
        if mode == "nearest":
            out[j] = r1 if frac >= 0.5 else r0
            continue
        rel = r1 @ np.swapaxes(r0, -1, -2)
        near_pi = lg.rotation_angle(rel) >= np.pi - lg.DELTA_THETA
        safe_rel = np.where(near_pi[:, None, None], np.eye(3), rel)
        interp = lg.exp_map(frac * lg.log_map(safe_rel)) @ r0
        if np.any(near_pi):
            nearest = r1 if frac >= 0.5 else r0
            interp[near_pi] = nearest[near_pi]
            if stats is not None:
                stats.near_pi_fallbacks += int(np.count_nonzero(near_pi))
        out[j] = interp
    return LieSequence(out, seq.label, seq.source_id)


# -- skeleton text format ----------------------------------------------------

_HEADER = re.compile(r"^SKEL v1 joints=(\d+) bones=(\d+)$")
_SEQ = re.compile(r"^seq (\S+) label=(\S*) frames=(\d+)$")


def load_skeleton_file(path, labels=None):
    """Parse a ``SKEL v1`` file.

    Args:
        path: file path.
        labels: optional collection of allowed labels.

    Returns:
        ``(topology, [SkeletonSequence, ...])``.
    """
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()

    def fail(lineno, msg, exc=MalformedFile):
        raise exc(f"{path}:{lineno}: {msg}")

    if not lines:
        fail(1, "empty file")
    m = _HEADER.match(lines[0].strip())
    if not m:
        fail(1, "expected 'SKEL v1 joints=<J> bones=<M>'")
    joints, nbones = int(m.group(1)), int(m.group(2))
    if len(lines) < 2 or not lines[1].startswith("bones:"):
        fail(2, "expected 'bones:' line")
    tokens = lines[1][len("bones:"):].split()
    if len(tokens) != nbones:
        fail(2, f"expected {nbones} bones, found {len(tokens)}")
    bones = []
    for tok in tokens:
        parts = tok.split("-")
        if len(parts) != 2 or not all(p.isdigit() for p in parts):
            fail(2, f"bad bone token {tok!r}")
        bones.append((int(parts[0]), int(parts[1])))
    try:
        topo = SkeletonTopology(joints, tuple(bones))
    except ValueError as err:
        fail(2, str(err))

    sequences = []
    i = 2
    while i < len(lines):
        line = lines[i].strip()
        if not line:
            i += 1
            continue
        sm = _SEQ.match(line)
        if not sm:
            fail(i + 1, "expected 'seq <id> label=<label> frames=<T>'")
        source_id, label, nframes = sm.group(1), sm.group(2), int(sm.group(3))
        if not label:
            fail(i + 1, f"sequence {source_id} has an empty label", UnknownLabel)
        if labels is not None and label not in labels:
            fail(i + 1, f"label {label!r} not in the allowed set", UnknownLabel)
        if nframes < 1:
            fail(i + 1, f"sequence {source_id} has no frames")
        body = lines[i + 1:i + 1 + nframes]
        if len(body) < nframes:
            fail(i + 1, f"sequence {source_id} declares {nframes} frames, found {len(body)}")
        pos = np.empty((nframes, joints, 3))
        for k, row in enumerate(body):
            lineno = i + 2 + k
            try:
                vals = [float(v) for v in row.split()]
            except ValueError:
                fail(lineno, "non-numeric coordinate")
            if len(vals) != 3 * joints:
                fail(
                    lineno,
                    f"frame {k} of {source_id} has {len(vals)} values, expected {3 * joints}",
                    InconsistentJointCount,
                )
            if not all(np.isfinite(vals)):
                fail(lineno, "non-finite coordinate")
            pos[k] = np.reshape(vals, (joints, 3))
        sequences.append(SkeletonSequence(pos, label, source_id))
        i += 1 + nframes
    if not sequences:
        fail(len(lines), "no sequences in file")
    return topo, sequences


def write_skeleton_file(path, topology, sequences):
    lines = [
        f"SKEL v1 joints={topology.joint_count} bones={topology.bone_count}",
        "bones: " + " ".join(f"{s}-{e}" for s, e in topology.bones),
    ]
    for seq in sequences:
        pos = np.asarray(seq.positions, dtype=float)
        lines.append(f"seq {seq.source_id} label={seq.label} frames={pos.shape[0]}")
        for frame in pos:
            lines.append(" ".join(repr(float(v)) for v in frame.ravel()))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- binary feature cache ----------------------------------------------------

def write_feature_cache(path, seq):
    t, mhat = seq.frames.shape[:2]
    with open(path, "wb") as fh:
        fh.write(LIEF_MAGIC)
        fh.write(struct.pack("<III", LIEF_VERSION, mhat, t))
        fh.write(seq.frames.astype("<f8").tobytes())


def read_feature_cache(path, label=None, source_id=""):
    data = Path(path).read_bytes()
    if data[:4] != LIEF_MAGIC or len(data) < 16:
        raise MalformedFile(f"{path}: not a LIEF cache")
    version, mhat, t = struct.unpack("<III", data[4:16])
    if version != LIEF_VERSION:
        raise MalformedFile(f"{path}: unsupported LIEF version {version}")
    body = data[16:]
    if len(body) != t * mhat * 9 * 8:
        raise MalformedFile(f"{path}: expected {t * mhat * 72} payload bytes, got {len(body)}")
    frames = np.frombuffer(body, dtype="<f8").reshape(t, mhat, 3, 3).astype(float)
    return LieSequence(frames, label=label, source_id=source_id)
