"""Size-aware garment mask deformation.

Thin wrapper over the C++ core. Size vectors, configs and reports are plain
dicts; masks and images are float64 numpy arrays.
"""

import json

from . import _core
from ._core import DataError, NumericError, ShapeError, UsageError

__all__ = [
    "DataError",
    "Model",
    "NumericError",
    "ShapeError",
    "UsageError",
    "apply_residual",
    "build_dataset",
    "default_train_config",
    "estimate_homography",
    "garment_size",
    "gradcheck",
    "iou",
    "make_pair",
    "residual_from",
    "sem",
    "train",
]

residual_from = _core.residual_from
apply_residual = _core.apply_residual
iou = _core.iou
estimate_homography = _core.estimate_homography


def sem(m_d, parts_d, m_g, parts_g, mode="soft"):
    return json.loads(_core.sem(m_d, parts_d, m_g, parts_g, mode))


def garment_size(garment_id, label):
    return json.loads(_core.garment_size(garment_id, label))


def make_pair(seed, body_id, pose_id, garment_id, ref_label, try_label, jitter=0.0):
    p = _core.make_pair(seed, body_id, pose_id, garment_id, ref_label, try_label, jitter)
    for half in ("ref", "try"):
        p[half]["keypoints"] = json.loads(p[half]["keypoints"])
    p["s_ref"] = json.loads(p["s_ref"])
    p["s_try"] = json.loads(p["s_try"])
    return p


def build_dataset(root, config=None):
    return json.loads(_core.build_dataset(json.dumps(config or {}), str(root)))


def gradcheck(instances_per_case=4):
    return json.loads(_core.gradcheck(instances_per_case))


def default_train_config():
    return json.loads(_core.default_train_config())


def train(config):
    """Trains per config (see default_train_config) and returns the epoch log."""
    return json.loads(_core.train(json.dumps(config)))


class Model:
    def __init__(self, checkpoint):
        self._m = _core.Model(str(checkpoint))

    @property
    def config(self):
        return json.loads(self._m.config)

    @property
    def hash(self):
        return self._m.hash

    def deform(self, person, m_ref, s_ref, s_try):
        """Returns (m_d, rm_d) for the person image (3, H, W) and mask (H, W)."""
        return self._m.deform(person, m_ref, json.dumps(s_ref), json.dumps(s_try))

    def evaluate(self, data_root, split, mode="soft"):
        return json.loads(self._m.evaluate(str(data_root), split, mode))
