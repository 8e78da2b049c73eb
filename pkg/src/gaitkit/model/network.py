"""The unified multi-modal gait network.

Per-modality encoders (one conv stage to C1 channels), a gated cross-modal
fusion block shared by every pair, a shared 3-stage residual backbone
(C1 -> C1 -> 2*C1/s2 -> 4*C1/s2), temporal max pooling, horizontal part
pooling, a per-part FC to C3, and a BNNeck head. With the paper-scale
defaults (C1=128) the shape chain is
    16 x C x 64 x 64 -> 16 x 128 x 64 x 64 -> 16 x 512 x 16 x 16
    -> 512 x 16 -> 256 x 16.
The two-stream variant keeps two modality-specific encoders in front of the
same shared trunk and skips fusion.

Training always pushes every stream through the backbone as one
concatenated batch so normalization sees mixed-modality statistics.
"""

from dataclasses import dataclass

import numpy as np

from .. import errors
from ..core import Modality
from ..kernels import (conv2d_backward_input, conv2d_backward_weight,
                       conv2d_forward)
from . import layers
from .layers import (BatchNorm1d, EncoderBlock, Module, Param,
                     ResidualBlock, SeparateFC)

VARIANTS = ("omni", "two_stream")


@dataclass(frozen=True)
class OmniGaitConfig:
    modalities: tuple
    base_channels: int = 128
    parts: int = 16
    num_classes: int = 0
    variant: str = "omni"
    seed: int = 0
    frames: int = 16
    input_size: int = 64

    def __post_init__(self):
        mods = tuple(self.modalities)
        if len(mods) == 0 or len(mods) != len(set(mods)):
            raise ValueError("modalities must be a non-empty unique set")
        for m in mods:
            if not isinstance(m, Modality) or not m.is_image:
                raise errors.UnsupportedModality(str(m))
        if len(mods) > 9:
            raise ValueError("at most 9 image modalities")
        if self.variant not in VARIANTS:
            raise errors.WrongVariant(self.variant)
        if self.variant == "two_stream" and len(mods) != 2:
            raise errors.WrongVariant("two_stream requires exactly 2 modalities")
        if (self.input_size // 4) % self.parts != 0:
            raise errors.IndivisibleHeight(
                f"final height {self.input_size // 4} not divisible by P={self.parts}")
        object.__setattr__(self, "modalities", mods)

    @property
    def c1(self):
        return self.base_channels

    @property
    def c2(self):
        return 4 * self.base_channels

    @property
    def c3(self):
        return 2 * self.base_channels

    def to_dict(self):
        return {"modalities": [m.value for m in self.modalities],
                "base_channels": self.base_channels, "parts": self.parts,
                "num_classes": self.num_classes, "variant": self.variant,
                "seed": self.seed, "frames": self.frames,
                "input_size": self.input_size}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["modalities"] = tuple(Modality(v) for v in d["modalities"])
        return cls(**d)


@dataclass
class InferenceFeature:
    parts: np.ndarray      # post-BNNeck (C3, P) or (B, C3, P)
    pre_bnneck: np.ndarray  # same shape, used by the triplet loss


class FusionModule(Module):
    """Channel-concat + 1x1 mix, with a two-way softmax gate over globally
    pooled features; output = mix + w0*f_i + w1*f_j. One parameter set
    serves every modality pair, so one training step calls this module once
    per fused pair: caches form a LIFO stack and backward() must be called
    in reverse order of forward()."""

    def __init__(self, c1, rng, dtype=np.float32):
        self.mix_weight = Param(layers.he_init(rng, (c1, 2 * c1, 1, 1),
                                               2 * c1, dtype))
        hidden = max(c1 // 8, 4)
        # the gate's "two 1x1 convolutions" act on pooled (B, C, 1, 1)
        # features, i.e. plain linear maps
        self.g1_w = Param(layers.he_init(rng, (c1, hidden), c1, dtype))
        self.g1_b = Param(np.zeros(hidden, dtype=dtype))
        self.g2_w = Param(layers.he_init(rng, (hidden, 2), hidden, dtype))
        self.g2_b = Param(np.zeros(2, dtype=dtype))
        self._stack = []

    def gate_weights(self, f_ij):
        """Softmax gate on a post-mix feature (B, T, C, H, W) or (T, C, H, W)."""
        squeeze = f_ij.ndim == 4
        if squeeze:
            f_ij = f_ij[None]
        w, _ = self._gate(f_ij.mean(axis=(1, 3, 4)))
        return w[0] if squeeze else w

    def _gate(self, gap):
        h_pre = gap @ self.g1_w.data + self.g1_b.data
        h = np.maximum(h_pre, 0)
        logits = h @ self.g2_w.data + self.g2_b.data
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        w = e / e.sum(axis=1, keepdims=True)
        return w, (gap, h_pre, h)

    def forward(self, f_i, f_j, training):
        if f_i.shape != f_j.shape:
            raise errors.ShapeMismatch(f"{f_i.shape} vs {f_j.shape}")
        b, t, c, h, w_ = f_i.shape
        cat = np.concatenate([f_i, f_j], axis=2).reshape(b * t, 2 * c, h, w_)
        f_ij = conv2d_forward(cat, self.mix_weight.data, 1, 0).reshape(
            b, t, c, h, w_)
        gap = f_ij.mean(axis=(1, 3, 4))
        w, gate_cache = self._gate(gap)
        out = (f_ij + w[:, 0, None, None, None, None] * f_i
               + w[:, 1, None, None, None, None] * f_j)
        if training:
            self._stack.append((f_i, f_j, cat, w, gate_cache))
        return out

    def backward(self, gy):
        f_i, f_j, cat, w, (gap, h_pre, h) = self._stack.pop()
        b, t, c, hh, ww = f_i.shape
        d_fi = w[:, 0, None, None, None, None] * gy
        d_fj = w[:, 1, None, None, None, None] * gy
        dw = np.stack([(gy * f_i).sum(axis=(1, 2, 3, 4)),
                       (gy * f_j).sum(axis=(1, 2, 3, 4))], axis=1)
        # softmax jacobian
        dlogits = w * (dw - (dw * w).sum(axis=1, keepdims=True))
        self.g2_w.grad += h.T @ dlogits
        self.g2_b.grad += dlogits.sum(axis=0)
        dh = dlogits @ self.g2_w.data.T
        dh_pre = np.where(h_pre > 0, dh, 0)
        self.g1_w.grad += gap.T @ dh_pre
        self.g1_b.grad += dh_pre.sum(axis=0)
        dgap = dh_pre @ self.g1_w.data.T
        d_fij = (gy + dgap[:, None, :, None, None] / (t * hh * ww)).reshape(
            b * t, c, hh, ww)
        self.mix_weight.grad += conv2d_backward_weight(
            d_fij, cat, self.mix_weight.data.shape, 1, 0)
        dcat = conv2d_backward_input(
            d_fij, self.mix_weight.data, cat.shape, 1, 0).reshape(
            b, t, 2 * c, hh, ww)
        d_fi = d_fi + dcat[:, :, :c]
        d_fj = d_fj + dcat[:, :, c:]
        return d_fi, d_fj


class Backbone(Module):
    def __init__(self, c1, rng, dtype=np.float32):
        self.stage1 = ResidualBlock(c1, c1, 1, rng, dtype)
        self.stage2 = ResidualBlock(c1, 2 * c1, 2, rng, dtype)
        self.stage3 = ResidualBlock(2 * c1, 4 * c1, 2, rng, dtype)

    def forward(self, x, training):
        for blk in (self.stage1, self.stage2, self.stage3):
            x = blk.forward(x, training)
        return x

    def backward(self, gy):
        for blk in (self.stage3, self.stage2, self.stage1):
            gy = blk.backward(gy)
        return gy


class Head(Module):
    """TP/HPP output -> per-part FC -> BNNeck -> (optional) cosine
    classifier (triplet reads the pre-BN feature, CE and inference the
    post-BN one)."""

    def __init__(self, parts, c2, c3, num_classes, rng, dtype=np.float32):
        self.fc = SeparateFC(parts, c2, c3, rng, dtype)
        self.bn = BatchNorm1d(c3 * parts, dtype)
        self.classifier = (layers.CosineClassifier(parts, c3, num_classes,
                                                   rng, dtype)
                           if num_classes else None)
        self._shape = None

    def forward(self, parts_feat, training, need_logits):
        pre = self.fc.forward(parts_feat, training)
        n, c3, p = pre.shape
        self._shape = (n, c3, p)
        post = self.bn.forward(pre.reshape(n, c3 * p), training).reshape(n, c3, p)
        logits = None
        if need_logits:
            if self.classifier is None:
                raise errors.ShapeMismatch("model built without num_classes")
            logits = self.classifier.forward(post, training)
        return pre, post, logits

    def backward(self, d_pre, d_post, d_logits):
        n, c3, p = self._shape
        if d_logits is not None:
            d_post = d_post + self.classifier.backward(d_logits)
        d_pre_total = self.bn.backward(
            d_post.reshape(n, c3 * p)).reshape(n, c3, p)
        if d_pre is not None:
            d_pre_total = d_pre_total + d_pre
        return self.fc.backward(d_pre_total)


class GaitNet(Module):
    def __init__(self, config, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence((config.seed, 911))))
        # fixed creation order keeps init deterministic
        self.encoders = {}
        for m in sorted(config.modalities, key=lambda m: m.value):
            self.encoders[m] = EncoderBlock(m.channels, config.c1, rng, dtype)
        self.fusion = (FusionModule(config.c1, rng, dtype)
                       if config.variant == "omni" else None)
        self.backbone = Backbone(config.c1, rng, dtype)
        self.head = Head(config.parts, config.c2, config.c3,
                         config.num_classes, rng, dtype)
        self.backbone_batches = 0  # instrumentation: joint-batch contract
        self._train_cache = None

    # Module protocol: encoders live in a dict, walk them explicitly
    def _children(self):
        for m, enc in self.encoders.items():
            yield f"encoder.{m.value}", enc
        if self.fusion is not None:
            yield "fusion", self.fusion
        yield "backbone", self.backbone
        yield "head", self.head

    # --- building blocks ------------------------------------------------

    def _check_input(self, m, x):
        if m not in self.encoders:
            raise errors.UnsupportedModality(
                f"{m} not in model config {[q.value for q in self.encoders]}")
        if x.ndim == 4:
            x = x[None]
        if x.ndim != 5 or x.shape[2] != m.channels or \
                x.shape[3] != self.config.input_size or \
                x.shape[4] != self.config.input_size:
            raise errors.ShapeMismatch(
                f"expected (B, T, {m.channels}, {self.config.input_size}, "
                f"{self.config.input_size}), got {x.shape}")
        if x.shape[1] != self.config.frames:
            raise errors.ShapeMismatch(
                f"expected T={self.config.frames}, got {x.shape[1]}")
        return np.ascontiguousarray(x, dtype=self.dtype)

    def encode(self, m, x, training=False):
        """Modal-specific encoding: (B, T, C, 64, 64) -> (B, T, C1, 64, 64)."""
        x = self._check_input(m, x)
        b, t = x.shape[:2]
        y = self.encoders[m].forward(x.reshape((b * t,) + x.shape[2:]), training)
        return y.reshape((b, t) + y.shape[1:])

    def fuse(self, f_i, f_j, training=False):
        if self.fusion is None:
            raise errors.WrongVariant("fusion exists only in the omni variant")
        return self.fusion.forward(f_i, f_j, training)

    def gate_weights(self, f_ij):
        return self.fusion.gate_weights(f_ij)

    def shared_forward(self, features, training=False):
        """Concatenate all streams into one batch, run the shared backbone,
        split back. Mixed-modality normalization statistics come from the
        single concatenated batch."""
        if not features:
            raise errors.EmptyInput("no features to forward")
        sizes = [f.shape[0] for f in features]
        joint = np.concatenate(features, axis=0)
        b, t = joint.shape[:2]
        self.backbone_batches += 1
        out = self.backbone.forward(
            joint.reshape((b * t,) + joint.shape[2:]), training)
        out = out.reshape((b, t) + out.shape[1:])
        splits = np.cumsum(sizes)[:-1]
        return [np.ascontiguousarray(s) for s in np.split(out, splits, axis=0)]

    def temporal_pool(self, f):
        out, _ = layers.temporal_max(f if f.ndim == 5 else f[None])
        return out if f.ndim == 5 else out[0]

    def hpp(self, x, parts=None):
        parts = parts or self.config.parts
        squeeze = x.ndim == 3
        out, _ = layers.hpp_forward(x[None] if squeeze else x, parts)
        return out[0] if squeeze else out

    # --- inference ------------------------------------------------------

    def _pool_head_eval(self, feat5):
        pooled, _ = layers.temporal_max(feat5)
        parts_feat, _ = layers.hpp_forward(pooled, self.config.parts)
        pre, post, _ = self.head.forward(parts_feat, False, False)
        return post, pre

    def forward_single(self, m, x):
        """Eval-mode embedding; touches only modality m's encoder."""
        squeeze = x.ndim == 4
        f = self.encode(m, x, training=False)
        f = self.shared_forward([f], training=False)[0]
        post, pre = self._pool_head_eval(f)
        if squeeze:
            return InferenceFeature(post[0], pre[0])
        return InferenceFeature(post, pre)

    def forward_pair(self, mi, xi, mj, xj):
        if self.config.variant != "omni":
            raise errors.WrongVariant("forward_pair requires the omni variant")
        if mi is mj:
            raise errors.SameModalityPair(
                f"{mi.value}: intra-sensor pairs use distinct modality tags")
        squeeze = xi.ndim == 4
        fi = self.encode(mi, xi, training=False)
        fj = self.encode(mj, xj, training=False)
        fused = self.fuse(fi, fj, training=False)
        f = self.shared_forward([fused], training=False)[0]
        post, pre = self._pool_head_eval(f)
        if squeeze:
            return InferenceFeature(post[0], pre[0])
        return InferenceFeature(post, pre)

    def two_stream_forward(self, m1, x1, m2, x2):
        if self.config.variant != "two_stream":
            raise errors.WrongVariant("two_stream_forward needs the "
                                      "two_stream variant")
        f1 = self.encode(m1, x1[None] if x1.ndim == 4 else x1, training=False)
        f2 = self.encode(m2, x2[None] if x2.ndim == 4 else x2, training=False)
        o1, o2 = self.shared_forward([f1, f2], training=False)
        post1, pre1 = self._pool_head_eval(o1)
        post2, pre2 = self._pool_head_eval(o2)
        if x1.ndim == 4:
            return (InferenceFeature(post1[0], pre1[0]),
                    InferenceFeature(post2[0], pre2[0]))
        return InferenceFeature(post1, pre1), InferenceFeature(post2, pre2)

    # --- training -------------------------------------------------------

    def stream_names(self, anchor=None):
        mods = list(self.config.modalities)
        names = [m.value for m in mods]
        if self.config.variant == "omni" and anchor is not None and len(mods) > 1:
            names += [f"{anchor.value}+{m.value}" for m in mods if m is not anchor]
        return names

    def forward_training(self, inputs, anchor=None):
        """inputs: {Modality: (B, T, C, 64, 64)}. Returns an ordered dict
        stream name -> (pre_feat, post_feat, logits); every stream of the
        step rides one concatenated backbone batch."""
        mods = list(self.config.modalities)
        if set(inputs) != set(mods):
            raise errors.ShapeMismatch(
                f"inputs {sorted(m.value for m in inputs)} != config "
                f"{sorted(m.value for m in mods)}")
        enc = {m: self.encode(m, inputs[m], training=True) for m in mods}
        streams = [(m.value, enc[m]) for m in mods]
        fused_pairs = []
        if self.config.variant == "omni" and anchor is not None and len(mods) > 1:
            if anchor not in self.encoders:
                raise errors.UnsupportedModality(f"anchor {anchor}")
            for m in mods:
                if m is anchor:
                    continue
                fused_pairs.append((f"{anchor.value}+{m.value}", anchor, m))
                streams.append((fused_pairs[-1][0],
                                self.fuse(enc[anchor], enc[m], training=True)))
        feats = [f for _, f in streams]
        outs = self.shared_forward(feats, training=True)
        b = feats[0].shape[0]
        joint = np.concatenate(outs, axis=0)
        pooled, tp_cache = layers.temporal_max(joint)
        parts_feat, hpp_cache = layers.hpp_forward(pooled, self.config.parts)
        pre, post, logits = self.head.forward(
            parts_feat, True, self.config.num_classes > 0)
        self._train_cache = {
            "mods": mods, "anchor": anchor, "inputs_shape":
                {m: inputs[m].shape for m in mods},
            "stream_names": [n for n, _ in streams], "b": b,
            "fused_pairs": fused_pairs, "tp": tp_cache, "hpp": hpp_cache,
            "t": feats[0].shape[1],
        }
        result = {}
        for i, (name, _) in enumerate(streams):
            sl = slice(i * b, (i + 1) * b)
            result[name] = (pre[sl], post[sl],
                            None if logits is None else logits[sl])
        return result

    def backward_training(self, d_pre, d_logits):
        """d_pre / d_logits: {stream name: gradient} matching
        forward_training's outputs. Accumulates parameter gradients."""
        c = self._train_cache
        b, t = c["b"], c["t"]
        names = c["stream_names"]
        n_total = b * len(names)
        p = self.config.parts
        d_pre_j = np.zeros((n_total, self.config.c3, p), dtype=self.dtype)
        d_log_j = None
        if self.config.num_classes > 0 and d_logits:
            d_log_j = np.zeros((n_total, self.config.num_classes, p),
                               dtype=self.dtype)
        for i, name in enumerate(names):
            sl = slice(i * b, (i + 1) * b)
            if name in d_pre:
                d_pre_j[sl] = d_pre[name]
            if d_log_j is not None and name in d_logits:
                d_log_j[sl] = d_logits[name]
        zero_post = np.zeros_like(d_pre_j)
        d_parts = self.head.backward(d_pre_j, zero_post, d_log_j)
        d_pooled = layers.hpp_backward(d_parts, c["hpp"], p)
        d_joint = layers.temporal_max_backward(d_pooled, c["tp"], t)
        d_backbone_in = self.backbone.backward(
            d_joint.reshape((n_total * t,) + d_joint.shape[2:]))
        d_backbone_in = d_backbone_in.reshape(
            (n_total, t) + d_backbone_in.shape[1:])
        d_streams = {name: d_backbone_in[i * b:(i + 1) * b]
                     for i, name in enumerate(names)}
        d_enc = {m: np.ascontiguousarray(d_streams[m.value]) for m in c["mods"]}
        for name, anchor, other in reversed(c["fused_pairs"]):
            d_fi, d_fj = self.fusion.backward(d_streams[name])
            d_enc[anchor] = d_enc[anchor] + d_fi
            d_enc[other] = d_enc[other] + d_fj
        for m in reversed(c["mods"]):
            g = d_enc[m]
            bb, tt = g.shape[:2]
            self.encoders[m].backward(g.reshape((bb * tt,) + g.shape[2:]))
        self._train_cache = None
