"""Maximum Attention: channel perturbation of the global max vector,
attribution to the points that won those channels, and colored export."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError
from .pointcloud import PointCloud

__all__ = [
    "AttentionMap",
    "max_attention",
    "export_attention",
    "dump_scores",
    "COLOR_RGB",
]

COLOR_RGB = {
    "green": (0, 255, 0),
    "red": (255, 0, 0),
    "blue": (0, 0, 255),
}


@dataclass
class AttentionMap:
    score: np.ndarray      # (n,) signed attribution, exactly 0 for non-winners
    color: np.ndarray      # (n,) unicode: green / red / blue
    target_class: int
    cutoff: float
    epsilon: float

    def __post_init__(self):
        if self.score.shape != self.color.shape:
            raise InputError("score and color lengths disagree")


def _head_value(params, config, avg, max_rows, target_class, use_logit):
    """Classifier output for each row of perturbed max vectors, dropout off.

    Everything runs in float64 so tiny perturbations survive the algebra.
    """
    r = max_rows.shape[0]
    if avg is not None:
        h = np.concatenate(
            [np.broadcast_to(avg, (r, avg.size)), max_rows], axis=1
        )
    else:
        h = max_rows
    w1 = params.arrays["fc1.weight"].astype(np.float64)
    w2 = params.arrays["fc2.weight"].astype(np.float64)
    x = h @ w1
    x = np.maximum(x, x * config.leaky_slope)
    logits = x @ w2
    if use_logit:
        return logits[:, target_class]
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=1, keepdims=True))[:, target_class]


def max_attention(
    params, trace, target_class, epsilon=None, cutoff_fraction=0.1, use_logit=False
):
    """Score each point by how much nudging its won max channels moves the
    prediction for ``target_class``.

    For every channel d of the global max vector m, the head is re-run with
    m + epsilon * e_d and the change in the target's softmax probability
    (or raw logit with ``use_logit``) per unit epsilon is credited to the
    point that won channel d. epsilon defaults to 0.1 * std(m) with a 1e-3
    floor. Scores inside ``cutoff_fraction`` of the largest magnitude are
    colored blue; beyond it, green when positive and red when negative.
    """
    config = trace.config
    if config is None:
        raise ConfigError("trace carries no configuration")
    if not config.max_pool or trace.max_vector is None or trace.max_argpoint is None:
        raise ConfigError("attention is undefined without the max-pool branch")
    if not 0 <= int(target_class) < config.n_classes:
        raise InputError(
            f"target class {target_class} out of range for {config.n_classes}"
        )
    if cutoff_fraction < 0:
        raise InputError(f"cutoff_fraction must be >= 0, got {cutoff_fraction}")

    m = trace.max_vector.astype(np.float64)
    argpoint = trace.max_argpoint
    n = trace.graphs[0].neighbors.shape[0]
    avg = None if trace.avg_vector is None else trace.avg_vector.astype(np.float64)

    if epsilon is None:
        epsilon = max(0.1 * float(m.std()), 1e-3)
    epsilon = float(epsilon)
    if epsilon <= 0:
        raise InputError(f"epsilon must be positive, got {epsilon}")

    d = m.size
    rows = np.tile(m, (d + 1, 1))
    rows[np.arange(1, d + 1), np.arange(d)] += epsilon
    values = _head_value(params, config, avg, rows, int(target_class), use_logit)
    delta = (values[1:] - values[0]) / epsilon

    score = np.zeros(n, dtype=np.float64)
    np.add.at(score, argpoint, delta)
    cutoff = float(cutoff_fraction * np.abs(score).max())

    color = np.full(n, "blue", dtype="<U5")
    color[score > cutoff] = "green"
    color[score < -cutoff] = "red"
    return AttentionMap(
        score=score,
        color=color,
        target_class=int(target_class),
        cutoff=cutoff,
        epsilon=epsilon,
    )


def export_attention(cloud, amap):
    """Colored copy of the cloud: green/red/blue per the attention map."""
    if cloud.n != amap.score.shape[0]:
        raise InputError(
            f"cloud has {cloud.n} points, attention map has {amap.score.shape[0]}"
        )
    colors = np.empty((cloud.n, 3), dtype=np.uint8)
    for name, rgb in COLOR_RGB.items():
        colors[amap.color == name] = rgb
    return PointCloud(
        points=cloud.points.copy(), colors=colors, source_id=cloud.source_id
    )


def dump_scores(amap):
    """One line per point: ``point_index<TAB>score<TAB>color``."""
    return "".join(
        f"{i}\t{s:.9g}\t{c}\n"
        for i, (s, c) in enumerate(zip(amap.score, amap.color))
    )
