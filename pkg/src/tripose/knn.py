"""Exact nearest-neighbour search over template descriptors."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .imaging import MODALITIES, ConfigurationError, network_input

DB_MAGIC = b"PMDB1"
LEAF_SIZE = 16
TREE_MAX_DIM = 16


class EmptyDatabaseError(ConfigurationError):
    pass


class QueryBoundsError(IndexError):
    pass


class DatabaseFormatError(ValueError):
    pass


@dataclass
class _Node:
    lo: int
    hi: int
    axis: int = -1
    split: float = 0.0
    left: Optional["_Node"] = None
    right: Optional["_Node"] = None


@dataclass
class DescriptorDB:
    """Template descriptors with their class ids and poses.

    ``query`` is exact: ties on distance resolve to the smaller index.
    """
    descriptors: np.ndarray
    class_ids: np.ndarray
    quats: np.ndarray
    method: str = "auto"
    modality: Optional[str] = None
    _order: np.ndarray = field(default=None, init=False, repr=False)
    _root: Optional[_Node] = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.descriptors = np.ascontiguousarray(self.descriptors, dtype=np.float64)
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64)
        self.quats = np.asarray(self.quats, dtype=np.float64)
        if len(self.descriptors) == 0:
            raise EmptyDatabaseError("descriptor database is empty")
        if not (len(self.descriptors) == len(self.class_ids) == len(self.quats)):
            raise ValueError("descriptors, class ids and poses must have equal length")
        if not np.all(np.isfinite(self.descriptors)):
            raise ValueError("descriptors must be finite")
        if self.method == "auto":
            self.method = "kdtree" if self.dim <= TREE_MAX_DIM else "brute"
        if self.method not in ("kdtree", "brute"):
            raise ValueError(f"unknown search method {self.method!r}")
        if self.method == "kdtree":
            self._order = np.arange(len(self.descriptors))
            self._root = self._build(0, len(self.descriptors))

    def __len__(self):
        return len(self.descriptors)

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]

    def _build(self, lo, hi) -> _Node:
        node = _Node(lo, hi)
        if hi - lo <= LEAF_SIZE:
            return node
        idx = self._order[lo:hi]
        pts = self.descriptors[idx]
        axis = int(np.argmax(pts.max(axis=0) - pts.min(axis=0)))
        if pts[:, axis].max() == pts[:, axis].min():
            return node
        srt = idx[np.argsort(pts[:, axis], kind="stable")]
        self._order[lo:hi] = srt
        mid = lo + (hi - lo) // 2
        node.axis = axis
        node.split = float(self.descriptors[self._order[mid], axis])
        # everything in [lo, mid) is <= split, [mid, hi) is >= split
        node.left = self._build(lo, mid)
        node.right = self._build(mid, hi)
        return node

    def _check_k(self, k):
        if not 1 <= k <= len(self):
            raise QueryBoundsError(f"k must be in [1, {len(self)}], got {k}")

    def query(self, q, k: int = 1) -> Tuple[np.ndarray, np.ndarray]:
        """Squared distances and indices of the ``k`` nearest templates, sorted."""
        q = np.asarray(q, dtype=np.float64)
        if q.shape != (self.dim,):
            raise ValueError(f"query must have shape ({self.dim},), got {q.shape}")
        self._check_k(k)
        if self.method == "brute":
            return _brute(self.descriptors, q, k)
        best: List[Tuple[float, int]] = []
        self._search(self._root, q, k, best)
        best.sort()
        return np.array([b[0] for b in best]), np.array([b[1] for b in best], dtype=np.int64)

    def _search(self, node: _Node, q, k, best):
        if node.left is None:
            idx = self._order[node.lo:node.hi]
            diff = self.descriptors[idx] - q
            d2 = np.einsum("ij,ij->i", diff, diff)
            for d, i in zip(d2.tolist(), idx.tolist()):
                if len(best) < k:
                    best.append((d, i))
                    best.sort()
                elif (d, i) < best[-1]:
                    best[-1] = (d, i)
                    best.sort()
            return
        delta = q[node.axis] - node.split
        near, far = (node.left, node.right) if delta <= 0 else (node.right, node.left)
        self._search(near, q, k, best)
        # prune only when the splitting plane is strictly farther than the worst kept
        if len(best) < k or delta * delta <= best[-1][0]:
            self._search(far, q, k, best)

    def query_batch(self, queries, k: int = 1) -> Tuple[np.ndarray, np.ndarray]:
        """Exact nearest neighbours for every row of ``queries``, same ordering as ``query``."""
        queries = np.asarray(queries, dtype=np.float64)
        self._check_k(k)
        dists = np.empty((len(queries), k))
        idx = np.empty((len(queries), k), dtype=np.int64)
        block = max(1, 2_000_000 // (len(self) * self.dim))
        order = np.arange(len(self))
        for s in range(0, len(queries), block):
            diff = queries[s:s + block, None, :] - self.descriptors[None]
            d2 = np.einsum("qnd,qnd->qn", diff, diff)
            for r in range(len(d2)):
                o = np.lexsort((order, d2[r]))[:k]
                dists[s + r], idx[s + r] = d2[r, o], o
        return dists, idx

    def save(self, path) -> None:
        header = dict(count=len(self), dim=self.dim, modality=self.modality)
        hb = json.dumps(header).encode()
        with open(path, "wb") as fh:
            fh.write(DB_MAGIC + struct.pack("<I", len(hb)) + hb)
            fh.write(self.descriptors.astype("<f8").tobytes())
            fh.write(self.class_ids.astype("<i8").tobytes())
            fh.write(self.quats.astype("<f8").tobytes())

    @classmethod
    def load(cls, path, method: str = "auto") -> "DescriptorDB":
        raw = Path(path).read_bytes()
        if raw[:len(DB_MAGIC)] != DB_MAGIC:
            raise DatabaseFormatError(f"{path}: bad magic")
        try:
            (hl,) = struct.unpack_from("<I", raw, len(DB_MAGIC))
            off = len(DB_MAGIC) + 4
            h = json.loads(raw[off:off + hl])
            off += hl
            n, d = int(h["count"]), int(h["dim"])
            need = off + 8 * (n * d + n + 4 * n)
            if len(raw) != need:
                raise DatabaseFormatError(f"{path}: expected {need} bytes, found {len(raw)}")
            desc = np.frombuffer(raw, "<f8", n * d, off).reshape(n, d)
            off += 8 * n * d
            cls_ids = np.frombuffer(raw, "<i8", n, off)
            off += 8 * n
            quats = np.frombuffer(raw, "<f8", 4 * n, off).reshape(n, 4)
        except (struct.error, KeyError, json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise DatabaseFormatError(f"{path}: corrupt database ({exc})") from exc
        return cls(desc.copy(), cls_ids.copy(), quats.copy(), method, h.get("modality"))


def _brute(descriptors, q, k):
    diff = descriptors - q
    d2 = np.einsum("ij,ij->i", diff, diff)
    o = np.lexsort((np.arange(len(d2)), d2))[:k]
    return d2[o], o.astype(np.int64)


def build_db(net, template_set, modality: Optional[str] = None, method: str = "auto",
             batch_size: int = 256) -> DescriptorDB:
    """Embed every template and keep its class id and pose."""
    modality = modality or template_set.meta.get("modality")
    if modality not in MODALITIES:
        raise ConfigurationError(f"unknown or missing modality {modality!r}")
    if net.in_channels != len(MODALITIES[modality]):
        raise ConfigurationError(f"network expects {net.in_channels} input planes, modality "
                                 f"{modality} has {len(MODALITIES[modality])}")
    if len(template_set) == 0:
        raise ConfigurationError("template set is empty")
    desc = net.embed(network_input(template_set.planes, modality), batch_size)
    return DescriptorDB(desc, template_set.class_ids.copy(), template_set.quats.copy(), method, modality)
