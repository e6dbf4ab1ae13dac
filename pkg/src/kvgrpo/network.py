"""Velocity-field network: per-frame embedding, single-head attention over the
key/value memory, and a two-layer head.

The forward pass is written once against :mod:`kvgrpo.autodiff` operations, so
it runs either in plain numpy (rollouts, finite differences) or on a tape
(replay gradients), depending on the reader it is given.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, NumericalError
from .params import Layout, Params


@dataclass(frozen=True)
class NetworkShape:
    """Dimensions of the velocity network.

    latent_dim: size d of one frame latent.
    hidden_dim: embedding / attention width h (key and value dims equal h).
    prompt_dim: size of the fixed conditioning vector appended to each frame.
    """

    latent_dim: int = 8
    hidden_dim: int = 16
    prompt_dim: int = 4

    def __post_init__(self) -> None:
        for name in ("latent_dim", "hidden_dim", "prompt_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")

    @property
    def input_dim(self) -> int:
        # frame latent + scalar time feature + prompt vector
        return self.latent_dim + 1 + self.prompt_dim


def build_layout(shape: NetworkShape) -> Layout:
    d, h = shape.latent_dim, shape.hidden_dim
    return Layout.build({
        "embed_w": (shape.input_dim, h),
        "embed_b": (h,),
        "wq": (h, h), "bq": (h,),
        "wk": (h, h), "bk": (h,),
        "wv": (h, h), "bv": (h,),
        "head1_w": (h, h), "head1_b": (h,),
        "head2_w": (h, d), "head2_b": (d,),
    })


def shape_from_layout(layout: Layout) -> NetworkShape:
    in_dim, h = layout.segments["embed_w"][1]
    d = layout.segments["head2_w"][1][1]
    return NetworkShape(latent_dim=d, hidden_dim=h, prompt_dim=in_dim - d - 1)


def param_init(shape: NetworkShape, seed: int) -> Params:
    """Deterministic initialization: weight matrices are N(0, 1/fan_in) per
    segment, biases start at zero."""
    layout = build_layout(shape)
    rng = np.random.default_rng(seed)
    values = np.zeros(layout.total)
    for name, (offset, seg_shape) in layout.segments.items():
        size = int(np.prod(seg_shape))
        if len(seg_shape) == 2:
            fan_in = seg_shape[0]
            values[offset:offset + size] = rng.standard_normal(size) / np.sqrt(fan_in)
    return Params(values, layout)


def _augment(x: np.ndarray, t: float, prompt: np.ndarray) -> np.ndarray:
    """Constant network input: [latents | time | prompt] per frame row."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[0]
    cols = [x, np.full((n, 1), float(t)), np.tile(np.asarray(prompt, dtype=np.float64), (n, 1))]
    return np.concatenate(cols, axis=1)


def embed_frames(reader, x: np.ndarray, t: float, prompt: np.ndarray):
    aug = _augment(x, t, prompt)
    return ad.tanh(ad.add_bias(ad.matmul(aug, reader.segment("embed_w")),
                               reader.segment("embed_b")))


def kv_for_frames(reader, x: np.ndarray, prompt: np.ndarray, t: float = 1.0):
    """Key/value projections for frames.  Finished frames are embedded at t=1
    (the clean end of the flow path)."""
    e = embed_frames(reader, x, t, prompt)
    k = ad.add_bias(ad.matmul(e, reader.segment("wk")), reader.segment("bk"))
    v = ad.add_bias(ad.matmul(e, reader.segment("wv")), reader.segment("bv"))
    return k, v


def velocity_forward(reader, x: np.ndarray, t: float, context_keys, context_values,
                     prompt: np.ndarray):
    """Predicted velocity for every frame of the current block.

    ``x`` is the (frames, d) in-flight latent matrix; ``context_keys`` /
    ``context_values`` hold the cached memory as (M, h) arrays (``None`` for an
    empty memory).  Attention runs over [context ; current-block] jointly.
    """
    e = embed_frames(reader, x, t, prompt)
    q = ad.add_bias(ad.matmul(e, reader.segment("wq")), reader.segment("bq"))
    k_cur = ad.add_bias(ad.matmul(e, reader.segment("wk")), reader.segment("bk"))
    v_cur = ad.add_bias(ad.matmul(e, reader.segment("wv")), reader.segment("bv"))
    if context_keys is not None and np.shape(context_keys)[0] > 0:
        keys = ad.concat_rows([context_keys, k_cur])
        vals = ad.concat_rows([context_values, v_cur])
    else:
        keys, vals = k_cur, v_cur
    d_k = np.shape(ad.value(keys))[1]
    scores = ad.mul(ad.matmul(q, ad.transpose(keys)), 1.0 / np.sqrt(d_k))
    weights = ad.row_softmax(scores)
    attended = ad.matmul(weights, vals)
    hid = ad.tanh(ad.add_bias(ad.matmul(attended, reader.segment("head1_w")),
                              reader.segment("head1_b")))
    return ad.add_bias(ad.matmul(hid, reader.segment("head2_w")),
                       reader.segment("head2_b"))


def check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite {what}")
    return arr
