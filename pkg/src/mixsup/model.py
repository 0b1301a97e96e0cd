"""Shared-encoder U-Net with two decoders of identical architecture.

The "top" decoder is the teacher trained on full masks, the "bottom"
decoder the student trained on partial labels; inference reads the bottom
branch. Single-branch baselines build the network with one decoder only.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .losses import pseudo_mask

BRANCHES = ("top", "bottom")
CHECKPOINT_VERSION = 1
# sub-seed offsets: encoder, top decoder, bottom decoder
_SEED_OFFSETS = {"encoder": 0, "top": 1, "bottom": 2}


class DualBranchUNet:
    """Desk-scale U-Net: ``levels`` resolutions, 3x3 convs, maxpool down, nearest up.

    Parameters
    ----------
    levels : int
        Number of resolutions (>= 2). Images must have sides divisible by
        ``2 ** (levels - 1)``.
    base_channels : int
        Feature maps at full resolution; doubled at each coarser level.
    classes : int
        Output channels of the softmax head (>= 2).
    seed : int
        Master seed; each component draws from its own fixed-offset sub-seed.
    branches : tuple of str
        Decoders to build, a subset of ``("top", "bottom")``.
    head_gain : float
        Multiplier on the He scale of the 1x1 output heads. Small values
        start every pixel near the uniform distribution.
    standardize : bool
        Shift and scale each input image to zero mean and unit variance
        before the first convolution.
    """

    def __init__(self, levels=3, base_channels=8, classes=2, seed=0, branches=BRANCHES,
                 head_gain=1.0, standardize=False):
        if levels < 2:
            raise ValueError(f"levels must be >= 2, got {levels}")
        if classes < 2:
            raise ValueError(f"classes must be >= 2, got {classes}")
        if base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {base_channels}")
        branches = tuple(branches)
        if not branches or any(b not in BRANCHES for b in branches):
            raise ValueError(f"branches must be a non-empty subset of {BRANCHES}, got {branches}")
        self.levels = levels
        self.base_channels = base_channels
        self.classes = classes
        self.seed = seed
        self.branches = branches
        self.head_gain = float(head_gain)
        self.standardize = bool(standardize)
        self.params: dict[str, Tensor] = {}
        self._init_encoder(np.random.default_rng([seed, _SEED_OFFSETS["encoder"]]))
        for b in branches:
            self._init_decoder(b, np.random.default_rng([seed, _SEED_OFFSETS[b]]))

    # ---------------------------------------------------------------- init

    def _widths(self):
        return [self.base_channels * 2 ** i for i in range(self.levels)]

    def _conv(self, name, cin, cout, k, rng, gain=1.0):
        std = gain * np.sqrt(2.0 / (cin * k * k))
        self.params[f"{name}.w"] = Tensor(rng.normal(0.0, std, (cout, cin, k, k)), requires_grad=True,
                                          name=f"{name}.w")
        self.params[f"{name}.b"] = Tensor(np.zeros(cout), requires_grad=True, name=f"{name}.b")

    def _init_encoder(self, rng):
        cin = 1
        for lvl, width in enumerate(self._widths()):
            self._conv(f"enc{lvl}.0", cin, width, 3, rng)
            self._conv(f"enc{lvl}.1", width, width, 3, rng)
            cin = width

    def _init_decoder(self, branch, rng):
        widths = self._widths()
        for lvl in range(self.levels - 2, -1, -1):
            self._conv(f"{branch}.dec{lvl}.0", widths[lvl + 1] + widths[lvl], widths[lvl], 3, rng)
            self._conv(f"{branch}.dec{lvl}.1", widths[lvl], widths[lvl], 3, rng)
        self._conv(f"{branch}.head", widths[0], self.classes, 1, rng, gain=self.head_gain)

    # ----------------------------------------------------------- parameters

    def parameters(self, group: str | None = None) -> list[Tensor]:
        """All parameters, or those of ``"encoder"``, ``"top"`` or ``"bottom"``."""
        if group is None:
            return list(self.params.values())
        if group == "encoder":
            return [t for k, t in self.params.items() if k.startswith("enc")]
        return [t for k, t in self.params.items() if k.startswith(group + ".")]

    def n_parameters(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, state):
        missing = set(self.params) ^ set(state)
        if missing:
            raise KeyError(f"parameter names differ: {sorted(missing)}")
        for k, v in state.items():
            if self.params[k].shape != np.shape(v):
                raise ad.ShapeError("load_state_dict", self.params[k].shape, np.shape(v))
            self.params[k].data = np.array(v, dtype=np.float64)

    # -------------------------------------------------------------- forward

    def _block(self, x, name):
        x = ad.relu(ad.conv2d(x, self.params[f"{name}.0.w"], self.params[f"{name}.0.b"]))
        return ad.relu(ad.conv2d(x, self.params[f"{name}.1.w"], self.params[f"{name}.1.b"]))

    def check_input(self, images) -> np.ndarray:
        images = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float64)
        if images.ndim == 3:
            images = images[:, None]
        if images.ndim != 4 or images.shape[1] != 1:
            raise ValueError(f"expected images of shape (B, 1, H, W), got {images.shape}")
        step = 2 ** (self.levels - 1)
        if images.shape[2] % step or images.shape[3] % step:
            raise ValueError(
                f"spatial size {images.shape[2:]} not divisible by {step} for {self.levels} levels"
            )
        if self.standardize:
            mean = images.mean(axis=(1, 2, 3), keepdims=True)
            std = images.std(axis=(1, 2, 3), keepdims=True)
            images = (images - mean) / np.where(std > 0, std, 1.0)
        return images

    def encode(self, images):
        x = Tensor(self.check_input(images))
        skips = []
        for lvl in range(self.levels):
            x = self._block(x, f"enc{lvl}")
            skips.append(x)
            if lvl < self.levels - 1:
                x = ad.maxpool2x(x)
        return skips

    def decode(self, skips, branch, logits=False):
        if branch not in self.branches:
            raise KeyError(f"branch {branch!r} not built; available: {self.branches}")
        x = skips[-1]
        for lvl in range(self.levels - 2, -1, -1):
            x = ad.concat([ad.nearest_upsample2x(x), skips[lvl]], axis=1)
            x = self._block(x, f"{branch}.dec{lvl}")
        z = ad.conv2d(x, self.params[f"{branch}.head.w"], self.params[f"{branch}.head.b"])
        return z if logits else ad.softmax_channel(z, axis=1)

    def forward(self, images, branches=None, logits=False) -> dict[str, Tensor]:
        """Per-branch (B, C, H, W) probability maps (or logits) for a batch of images."""
        branches = self.branches if branches is None else tuple(branches)
        skips = self.encode(images)
        return {b: self.decode(skips, b, logits=logits) for b in branches}

    __call__ = forward

    # ------------------------------------------------------------- inference

    @property
    def inference_branch(self) -> str:
        return "bottom" if "bottom" in self.branches else self.branches[0]

    def predict_proba(self, images, branch=None) -> np.ndarray:
        branch = branch or self.inference_branch
        return self.forward(images, branches=(branch,))[branch].data

    def predict(self, images, branch=None) -> np.ndarray:
        """(B, H, W) argmax labels, from the bottom branch by default."""
        return pseudo_mask(self.predict_proba(images, branch)).argmax(axis=1)

    def ensemble_predict(self, images) -> np.ndarray:
        """Argmax of the average of the two branches' probability maps."""
        out = self.forward(images, branches=("top", "bottom"))
        avg = 0.5 * (out["top"].data + out["bottom"].data)
        return pseudo_mask(avg).argmax(axis=1)

    # ------------------------------------------------------------ checkpoint

    def config(self) -> dict:
        return {"levels": self.levels, "base_channels": self.base_channels, "classes": self.classes,
                "seed": self.seed, "branches": list(self.branches), "head_gain": self.head_gain,
                "standardize": self.standardize}

    def save(self, path) -> Path:
        """Write an ``.npz`` checkpoint holding the architecture and raw float64 parameters."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = json.dumps({"version": CHECKPOINT_VERSION, "config": self.config()})
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.frombuffer(meta.encode(), dtype=np.uint8), **self.state_dict())
        return path

    @classmethod
    def load(cls, path) -> "DualBranchUNet":
        with np.load(path) as data:
            meta = json.loads(bytes(data["__meta__"]).decode())
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
            model = cls(**meta["config"])
            model.load_state_dict({k: data[k] for k in data.files if k != "__meta__"})
        return model


def predict(model: DualBranchUNet, images) -> np.ndarray:
    return model.predict(images)


def ensemble_predict(model: DualBranchUNet, images) -> np.ndarray:
    return model.ensemble_predict(images)
