"""Model fusion: late (prediction averaging) and early (feature concat).

Late fusion averages member predictions elementwise, which can never be
worse than the mean of the member MAEs (convexity of the absolute error).
Early fusion concatenates the members' penultimate feature vectors and
trains a fresh regression head; members are frozen by default to keep the
parameter count of the trainable part small.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import InvalidConfig, ShapeMismatch
from .layers import DropoutLayer, LinearLayer
from .tensor import Tensor, concat, relu


def late_fuse(predictions):
    """Elementwise mean of >= 2 prediction arrays of equal shape."""
    if len(predictions) < 2:
        raise InvalidConfig("late fusion needs at least 2 members")
    ref = np.asarray(predictions[0])
    stack = [ref]
    for p in predictions[1:]:
        p = np.asarray(p)
        if p.shape != ref.shape:
            raise ShapeMismatch(f"prediction shapes {ref.shape} vs {p.shape}")
        stack.append(p)
    return np.mean(stack, axis=0)


@dataclass
class EnsembleSpec:
    mode: str  # "late" | "early"
    member_paths: list
    fingerprints: list = field(default_factory=list)
    freeze_members: bool = True
    head_checkpoint: str = None

    def to_json(self):
        return json.dumps(
            {
                "mode": self.mode,
                "members": [
                    {"path": p, "fingerprint": f}
                    for p, f in zip(
                        self.member_paths,
                        self.fingerprints or [""] * len(self.member_paths),
                    )
                ],
                "freeze_members": self.freeze_members,
                "head_checkpoint": self.head_checkpoint,
            },
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        if doc["mode"] not in ("late", "early"):
            raise InvalidConfig(f"unknown fusion mode {doc['mode']!r}")
        members = doc["members"]
        if len(members) < 2:
            raise InvalidConfig("ensemble needs at least 2 members")
        return cls(
            doc["mode"],
            [m["path"] for m in members],
            [m.get("fingerprint", "") for m in members],
            doc.get("freeze_members", True),
            doc.get("head_checkpoint"),
        )


class EarlyFusionModel:
    """Concatenated member features feeding a fresh three-FC head.

    Satisfies the same protocol the training loop uses for a plain Model
    (forward / trainable_parameters / named_parameters / running_stats /
    reseed_dropout / input_size).
    """

    def __init__(self, members, head_dims=(128, 64), dropout_rate=0.5,
                 freeze_members=True, seed=0):
        if len(members) < 2:
            raise InvalidConfig("early fusion needs at least 2 members")
        sizes = {m.config.input_size for m in members}
        if len(sizes) != 1:
            raise InvalidConfig(f"members disagree on input size: {sorted(sizes)}")
        self.members = list(members)
        self.freeze_members = freeze_members
        ss = np.random.SeedSequence(seed, spawn_key=(0xF5,))
        seeds = iter(ss.spawn(len(head_dims) + 1))
        width = self.feature_width()
        self.head = []
        for dim in head_dims:
            self.head.append((LinearLayer(width, dim, seed=next(seeds)),
                              DropoutLayer(dropout_rate, seed=0)))
            width = dim
        self.head_out = LinearLayer(width, 1, seed=next(seeds))
        self.reseed_dropout(seed)

    def feature_width(self):
        return sum(m.config.feature_width() for m in self.members)

    @property
    def input_size(self):
        return self.members[0].config.input_size

    def features(self, x, mode="eval"):
        """Concatenation of all members' feature vectors."""
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if self.freeze_members:
            with T.no_grad():
                feats = [m.forward_features(x, "eval") for m in self.members]
            feats = [Tensor(f.data) for f in feats]
        else:
            feats = [m.forward_features(x, mode) for m in self.members]
        return concat(feats, axis=1) if len(feats) > 1 else feats[0]

    def forward(self, x, mode="eval"):
        for _, drop in self.head:
            drop.mode = mode
        h = self.features(x, mode)
        for fc, drop in self.head:
            h = drop(relu(fc(h)))
        return self.head_out(h)

    def named_parameters(self):
        reg = {}
        for i, (fc, _) in enumerate(self.head, start=1):
            for suffix, t in fc.parameters():
                reg[f"head.fc{i}.{suffix}"] = t
        for suffix, t in self.head_out.parameters():
            reg[f"head.fc{len(self.head) + 1}.{suffix}"] = t
        if not self.freeze_members:
            for i, m in enumerate(self.members):
                for name, t in m.named_parameters().items():
                    reg[f"member{i}.{name}"] = t
        return reg

    def trainable_parameters(self):
        return self.named_parameters()

    def running_stats(self):
        stats = {}
        if not self.freeze_members:
            for i, m in enumerate(self.members):
                for name, arr in m.running_stats().items():
                    stats[f"member{i}.{name}"] = arr
        return stats

    def reseed_dropout(self, seed):
        ss = np.random.SeedSequence(seed, spawn_key=(0xD0, 1))
        children = iter(ss.spawn(len(self.head)))
        for _, drop in self.head:
            drop.reseed(next(children))
        if not self.freeze_members:
            for m in self.members:
                m.reseed_dropout(seed)
