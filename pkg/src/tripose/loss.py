"""Ratio triplet loss with static or dynamic margin, pair loss and their gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .geometry import quat_angle, quat_angles

DEFAULT_N = 2.0 * np.pi
DEFAULT_STATIC_MARGIN = 0.01


class LossConfigError(ValueError):
    pass


class TripletInvariantError(ValueError):
    pass


@dataclass(frozen=True)
class Triplet:
    """Indices of anchor, puller and pusher into a descriptor batch, with its margin."""
    anchor: int
    puller: int
    pusher: int
    margin: float


@dataclass(frozen=True)
class Pair:
    first: int
    second: int


def squared_distance(a, b) -> float:
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(d @ d)


def triplet_loss(f_i, f_j, f_k, margin: float) -> float:
    """max(0, 1 - |f_i - f_k|^2 / (|f_i - f_j|^2 + margin))."""
    if margin <= 0:
        raise LossConfigError("triplet margin must be positive")
    return max(0.0, 1.0 - squared_distance(f_i, f_k) / (squared_distance(f_i, f_j) + margin))


def pair_loss(f_i, f_j) -> float:
    return squared_distance(f_i, f_j)


def dynamic_margin(s_i, s_k, n: float = DEFAULT_N) -> float:
    """Anchor-pusher pose angle within a class, the constant ``n`` (> pi) across classes.

    ``s_i`` and ``s_k`` need ``class_id`` and ``pose`` attributes.
    """
    if n <= np.pi:
        raise LossConfigError(f"inter-class margin n must exceed pi, got {n}")
    if s_i.class_id == s_k.class_id:
        return quat_angle(s_i.pose, s_k.pose)
    return float(n)


def dynamic_margins(anchor_classes, anchor_quats, pusher_classes, pusher_quats,
                    n: float = DEFAULT_N) -> np.ndarray:
    """Vectorized ``dynamic_margin`` over aligned arrays of anchors and pushers."""
    if n <= np.pi:
        raise LossConfigError(f"inter-class margin n must exceed pi, got {n}")
    dots = np.abs(np.einsum("ij,ij->i", np.asarray(anchor_quats, float), np.asarray(pusher_quats, float)))
    ang = 2.0 * np.arccos(np.clip(dots, 0.0, 1.0))
    return np.where(np.asarray(anchor_classes) == np.asarray(pusher_classes), ang, float(n))


def check_triplets(triplets: np.ndarray, class_ids: np.ndarray, quats: np.ndarray,
                   margins: np.ndarray) -> None:
    """Raise if a triplet breaks the anchor/puller/pusher contract."""
    for (i, j, k), m in zip(np.asarray(triplets), np.asarray(margins)):
        if class_ids[i] != class_ids[j]:
            raise TripletInvariantError(f"puller {j} is not of the anchor's class")
        if m <= 0:
            raise TripletInvariantError(f"triplet ({i}, {j}, {k}) has non-positive margin")
        if class_ids[k] == class_ids[i]:
            aij = quat_angles(quats[i], quats[j][None])[0]
            aik = quat_angles(quats[i], quats[k][None])[0]
            if aij > aik + 1e-12:
                raise TripletInvariantError(f"same-class pusher {k} is closer in pose than puller {j}")


def total_loss(descriptors: np.ndarray, triplets: np.ndarray, margins: np.ndarray,
               pairs: np.ndarray) -> Tuple[float, np.ndarray]:
    """Sum of triplet terms over ``triplets`` and pair terms over ``pairs``.

    ``triplets`` is (T, 3) and ``pairs`` (P, 2), both indexing rows of
    ``descriptors`` (N, d). Returns the loss and dL/d descriptors (N, d);
    triplets with an inactive hinge contribute no gradient.
    """
    f = np.asarray(descriptors, dtype=np.float64)
    grad = np.zeros_like(f)
    triplets = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(triplets) + len(pairs) == 0:
        raise LossConfigError("total_loss needs at least one triplet or pair")
    loss = 0.0
    if len(triplets):
        m = np.asarray(margins, dtype=np.float64)
        if np.any(m <= 0):
            raise LossConfigError("triplet margins must be positive")
        i, j, k = triplets.T
        dpos = f[i] - f[j]
        dneg = f[i] - f[k]
        a = np.einsum("ij,ij->i", dneg, dneg)
        b = np.einsum("ij,ij->i", dpos, dpos) + m
        terms = 1.0 - a / b
        active = terms > 0
        loss += float(np.sum(np.where(active, terms, 0.0)))
        # L = 1 - a / b:  dL/da = -1/b,  dL/db = a/b^2
        dla = np.where(active, -1.0 / b, 0.0)[:, None]
        dlb = np.where(active, a / b ** 2, 0.0)[:, None]
        ga = 2.0 * dneg * dla
        gb = 2.0 * dpos * dlb
        np.add.at(grad, i, ga + gb)
        np.add.at(grad, j, -gb)
        np.add.at(grad, k, -ga)
    if len(pairs):
        p, q = pairs.T
        diff = f[p] - f[q]
        loss += float(np.sum(diff * diff))
        np.add.at(grad, p, 2.0 * diff)
        np.add.at(grad, q, -2.0 * diff)
    return loss, grad
