"""Position-query denoiser with an explicit backward pass.

Pipeline per call::

    [z_t | z_a] -> affine -> + time emb (+ anchor lattice emb) -> encoder
    -> cross-attention (query = positional embedding E, key/value = encoder
       output) -> decoder -> affine to patch channels -> k x k conv over the
       decoded patch grid -> patch sequence

All weights live in one flat vector; ``ParamLayout`` hands out reshaped
views so the optimizer, the checkpoint and the gradient check all work on
the same buffer.
"""

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from . import nn
from .diffusion import q_sample
from .errors import InvalidDimension, InvalidRange, NonFiniteActivation, ShapeMismatch, UntrainedModel
from .position import lattice_grid, sincos_1d, sincos_2d

PE_VARIANTS = ("none", "learnable", "sincos")
PREDICTION_TARGETS = ("noise", "x0")


class PatchCodec:
    """Lossless patchify codec standing in for a learned autoencoder.

    Row ``m*K + n`` of the sequence is the patch at grid cell (m, n),
    flattened channel-major: index ``c*p*p + py*p + px``.
    """

    def __init__(self, image_side, patch_side, channels):
        if patch_side < 1 or image_side % patch_side:
            raise InvalidDimension(f"patch side {patch_side} must divide image side {image_side}")
        self.image_side = image_side
        self.patch_side = patch_side
        self.channels = channels
        self.k = image_side // patch_side
        self.length = self.k * self.k
        self.patch_dim = channels * patch_side * patch_side

    def encode(self, image):
        image = np.asarray(image)
        S, p, K, ch = self.image_side, self.patch_side, self.k, self.channels
        if image.shape[-3:] != (S, S, ch):
            raise ShapeMismatch(f"expected (..., {S}, {S}, {ch}) image, got {image.shape}")
        lead = image.shape[:-3]
        x = image.reshape(*lead, K, p, K, p, ch)
        n = len(lead)
        x = x.transpose(*range(n), n, n + 2, n + 4, n + 1, n + 3)
        return x.reshape(*lead, self.length, self.patch_dim)

    def decode(self, seq):
        seq = np.asarray(seq)
        S, p, K, ch = self.image_side, self.patch_side, self.k, self.channels
        if seq.shape[-2:] != (self.length, self.patch_dim):
            raise ShapeMismatch(f"expected (..., {self.length}, {self.patch_dim}) sequence, got {seq.shape}")
        lead = seq.shape[:-2]
        n = len(lead)
        x = seq.reshape(*lead, K, K, ch, p, p)
        x = x.transpose(*range(n), n, n + 3, n + 1, n + 4, n + 2)
        return x.reshape(*lead, S, S, ch)


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    channels: int = 3
    dim: int = 64
    enc_depth: int = 2
    dec_depth: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    conv_kernel: int = 3
    pe_variant: str = "sincos"
    prediction: str = "noise"
    anchor_pe: bool = True
    cross_residual: bool = True

    def __post_init__(self):
        if self.dim % 4:
            raise InvalidDimension(f"dim must be divisible by 4, got {self.dim}")
        if self.dim % self.heads:
            raise InvalidDimension(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.conv_kernel % 2 == 0:
            raise InvalidDimension("conv_kernel must be odd")
        if self.pe_variant not in PE_VARIANTS:
            raise InvalidRange(f"pe_variant must be one of {PE_VARIANTS}")
        if self.prediction not in PREDICTION_TARGETS:
            raise InvalidRange(f"prediction must be one of {PREDICTION_TARGETS}")
        PatchCodec(self.image_size, self.patch_size, self.channels)

    @property
    def codec(self):
        return PatchCodec(self.image_size, self.patch_size, self.channels)

    def to_dict(self):
        return asdict(self)


class ParamLayout:
    """Ordered name -> shape table over one flat vector."""

    def __init__(self, entries):
        self.entries = list(entries)
        self.offsets = {}
        off = 0
        for name, shape in self.entries:
            size = int(np.prod(shape))
            self.offsets[name] = (off, off + size, tuple(shape))
            off += size
        self.size = off

    def views(self, flat):
        if flat.shape != (self.size,):
            raise ShapeMismatch(f"flat parameter vector must have shape ({self.size},), got {flat.shape}")
        return {name: flat[a:b].reshape(shape) for name, (a, b, shape) in self.offsets.items()}

    def name_of(self, index):
        for name, (a, b, shape) in self.offsets.items():
            if a <= index < b:
                return name, np.unravel_index(index - a, shape)
        raise IndexError(index)


def build_layout(cfg):
    C = cfg.channels * cfg.patch_size ** 2
    D = cfg.dim
    M = cfg.mlp_ratio * D
    k = cfg.conv_kernel
    entries = [("in_w", (2 * C, D)), ("in_b", (D,))]
    if cfg.pe_variant == "learnable":
        entries += [("pe_w1", (2, D)), ("pe_b1", (D,)), ("pe_w2", (D, D)), ("pe_b2", (D,))]

    def block(prefix):
        return [(f"{prefix}.ln1_g", (D,)), (f"{prefix}.ln1_b", (D,)),
                (f"{prefix}.qkv_w", (D, 3 * D)), (f"{prefix}.qkv_b", (3 * D,)),
                (f"{prefix}.proj_w", (D, D)), (f"{prefix}.proj_b", (D,)),
                (f"{prefix}.ln2_g", (D,)), (f"{prefix}.ln2_b", (D,)),
                (f"{prefix}.fc1_w", (D, M)), (f"{prefix}.fc1_b", (M,)),
                (f"{prefix}.fc2_w", (M, D)), (f"{prefix}.fc2_b", (D,))]

    for i in range(cfg.enc_depth):
        entries += block(f"enc{i}")
    entries += [("enc_norm_g", (D,)), ("enc_norm_b", (D,)),
                ("xq_w", (D, D)), ("xk_w", (D, D)), ("xv_w", (D, D))]
    for i in range(cfg.dec_depth):
        entries += block(f"dec{i}")
    entries += [("dec_norm_g", (D,)), ("dec_norm_b", (D,)),
                ("out_w", (D, C)), ("out_b", (C,)),
                ("conv_w", (k, k, cfg.channels, cfg.channels)), ("conv_b", (cfg.channels,))]
    return ParamLayout(entries)


class Batch(NamedTuple):
    """One training batch in patch space.

    ``coords`` holds each target patch's (row, col) in anchor-patch units,
    shape (B, L, 2); ``t`` is one timestep per item.
    """

    z_a: np.ndarray
    z0: np.ndarray
    coords: np.ndarray
    t: np.ndarray
    eps: np.ndarray


def _block_forward(P, pre, x, heads):
    h1, c_ln1 = nn.layernorm_forward(x, P[f"{pre}.ln1_g"], P[f"{pre}.ln1_b"])
    qkv, c_qkv = nn.linear_forward(h1, P[f"{pre}.qkv_w"], P[f"{pre}.qkv_b"])
    q, k, v = np.split(qkv, 3, axis=-1)
    dh = q.shape[-1] // heads
    a, c_att = nn.attention_forward(nn.split_heads(q, heads), nn.split_heads(k, heads),
                                    nn.split_heads(v, heads), 1.0 / math.sqrt(dh))
    o, c_proj = nn.linear_forward(nn.merge_heads(a), P[f"{pre}.proj_w"], P[f"{pre}.proj_b"])
    x = x + o
    h2, c_ln2 = nn.layernorm_forward(x, P[f"{pre}.ln2_g"], P[f"{pre}.ln2_b"])
    f1, c_fc1 = nn.linear_forward(h2, P[f"{pre}.fc1_w"], P[f"{pre}.fc1_b"])
    g, c_gelu = nn.gelu_forward(f1)
    f2, c_fc2 = nn.linear_forward(g, P[f"{pre}.fc2_w"], P[f"{pre}.fc2_b"])
    return x + f2, (c_ln1, c_qkv, c_att, c_proj, c_ln2, c_fc1, c_gelu, c_fc2)


def _block_backward(G, pre, dx, cache, heads):
    c_ln1, c_qkv, c_att, c_proj, c_ln2, c_fc1, c_gelu, c_fc2 = cache
    dg, G[f"{pre}.fc2_w"][...], G[f"{pre}.fc2_b"][...] = nn.linear_backward(dx, c_fc2)
    df1 = nn.gelu_backward(dg, c_gelu)
    dh2, G[f"{pre}.fc1_w"][...], G[f"{pre}.fc1_b"][...] = nn.linear_backward(df1, c_fc1)
    dln2, G[f"{pre}.ln2_g"][...], G[f"{pre}.ln2_b"][...] = nn.layernorm_backward(dh2, c_ln2)
    dx = dx + dln2
    dmerged, G[f"{pre}.proj_w"][...], G[f"{pre}.proj_b"][...] = nn.linear_backward(dx, c_proj)
    dq, dk, dv = nn.attention_backward(nn.split_heads(dmerged, heads), c_att)
    dqkv = np.concatenate([nn.merge_heads(dq), nn.merge_heads(dk), nn.merge_heads(dv)], axis=-1)
    dh1, G[f"{pre}.qkv_w"][...], G[f"{pre}.qkv_b"][...] = nn.linear_backward(dqkv, c_qkv)
    dln1, G[f"{pre}.ln1_g"][...], G[f"{pre}.ln1_b"][...] = nn.layernorm_backward(dh1, c_ln1)
    return dx + dln1


class Denoiser:
    """The conditional noise (or clean-latent) predictor.

    ``params`` is a flat vector; its dtype sets the compute precision
    (float32 for training, float64 for gradient checks).
    """

    def __init__(self, cfg, params=None, dtype=np.float32):
        self.cfg = cfg
        self.codec = cfg.codec
        self.layout = build_layout(cfg)
        if params is None:
            self.params = np.zeros(self.layout.size, dtype=dtype)
            self.initialized = False
        else:
            self.params = np.ascontiguousarray(params)
            self.layout.views(self.params)
            self.initialized = True
        self.calls = 0
        self._anchor_pe = sincos_2d(lattice_grid(self.codec.k).coords(), cfg.dim)

    @property
    def num_params(self):
        return self.layout.size

    def init_params(self, rng, zero_head=True):
        """Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit norm gains.

        With ``zero_head`` the output affine starts at zero so the initial
        prediction is identically 0. The conv starts as identity plus noise.
        """
        flat = np.zeros(self.layout.size, dtype=np.float64)
        P = self.layout.views(flat)
        for name, arr in P.items():
            leaf = name.split(".")[-1]
            if leaf.endswith("_g"):
                arr[...] = 1.0
            elif leaf in ("conv_w",):
                k, _, cin, cout = arr.shape
                bound = 1.0 / math.sqrt(k * k * cin)
                arr[...] = 0.1 * rng.uniform(-bound, bound, arr.shape)
                arr[k // 2, k // 2] += np.eye(cin, cout)
            elif leaf.endswith("_w") or leaf.endswith("_w1") or leaf.endswith("_w2"):
                bound = 1.0 / math.sqrt(arr.shape[0])
                arr[...] = rng.uniform(-bound, bound, arr.shape)
        if zero_head:
            P["out_w"][...] = 0.0
        self.params = flat.astype(self.params.dtype)
        self.initialized = True
        return self

    def views(self, flat=None):
        return self.layout.views(self.params if flat is None else flat)

    def time_embedding(self, t):
        return sincos_1d(np.asarray(t, dtype=np.float64), self.cfg.dim)

    def embed(self, coords, P=None):
        """Positional embedding E of (B, L, 2) coordinates per the configured variant."""
        P = self.views() if P is None else P
        coords = np.asarray(coords)
        variant = self.cfg.pe_variant
        dtype = self.params.dtype
        if variant == "sincos":
            return sincos_2d(coords, self.cfg.dim).astype(dtype), None
        if variant == "none":
            return np.zeros(coords.shape[:-1] + (self.cfg.dim,), dtype=dtype), None
        c = coords.astype(dtype)
        h, c1 = nn.linear_forward(c, P["pe_w1"], P["pe_b1"])
        g, cg = nn.gelu_forward(h)
        e, c2 = nn.linear_forward(g, P["pe_w2"], P["pe_b2"])
        return e, (c1, cg, c2)

    # -- forward / backward -------------------------------------------------

    def _check_inputs(self, z_t, z_a, E, t):
        L, C, D = self.codec.length, self.codec.patch_dim, self.cfg.dim
        if z_t.shape[-2:] != (L, C) or z_a.shape != z_t.shape:
            raise ShapeMismatch(f"z_t {z_t.shape} / z_a {z_a.shape} must be (B, {L}, {C})")
        if E.shape != z_t.shape[:-1] + (D,):
            raise ShapeMismatch(f"E must be (B, {L}, {D}), got {E.shape}")
        if t.shape != z_t.shape[:1]:
            raise ShapeMismatch(f"need one timestep per batch item, got t{t.shape}")

    def _forward(self, P, z_t, z_a, E, t):
        cfg = self.cfg
        dtype = self.params.dtype
        x = np.concatenate([z_t, z_a], axis=-1)
        zg, c_in = nn.linear_forward(x, P["in_w"], P["in_b"])
        zg = zg + self.time_embedding(t).astype(dtype)[:, None, :]
        if cfg.anchor_pe:
            zg = zg + self._anchor_pe.astype(dtype)
        enc = []
        for i in range(cfg.enc_depth):
            zg, c = _block_forward(P, f"enc{i}", zg, cfg.heads)
            enc.append(c)
        h, c_enc_norm = nn.layernorm_forward(zg, P["enc_norm_g"], P["enc_norm_b"])
        q, c_q = nn.linear_forward(E, P["xq_w"])
        k, c_k = nn.linear_forward(h, P["xk_w"])
        v, c_v = nn.linear_forward(h, P["xv_w"])
        zd, c_x = nn.attention_forward(q, k, v, 1.0 / math.sqrt(cfg.dim))
        if cfg.cross_residual:
            zd = zd + h
        dec = []
        for i in range(cfg.dec_depth):
            zd, c = _block_forward(P, f"dec{i}", zd, cfg.heads)
            dec.append(c)
        y, c_dec_norm = nn.layernorm_forward(zd, P["dec_norm_g"], P["dec_norm_b"])
        o, c_out = nn.linear_forward(y, P["out_w"], P["out_b"])
        img, c_conv = nn.conv2d_forward(self.codec.decode(o), P["conv_w"], P["conv_b"])
        out = self.codec.encode(img)
        cache = (c_in, enc, c_enc_norm, c_q, c_k, c_v, c_x, dec, c_dec_norm, c_out, c_conv)
        return out, cache

    def _backward(self, G, dout, cache):
        cfg = self.cfg
        c_in, enc, c_enc_norm, c_q, c_k, c_v, c_x, dec, c_dec_norm, c_out, c_conv = cache
        dimg, G["conv_w"][...], G["conv_b"][...] = nn.conv2d_backward(self.codec.decode(dout), c_conv)
        do = self.codec.encode(dimg)
        dy, G["out_w"][...], G["out_b"][...] = nn.linear_backward(do, c_out)
        dzd, G["dec_norm_g"][...], G["dec_norm_b"][...] = nn.layernorm_backward(dy, c_dec_norm)
        for i in reversed(range(cfg.dec_depth)):
            dzd = _block_backward(G, f"dec{i}", dzd, dec[i], cfg.heads)
        dq, dk, dv = nn.attention_backward(dzd, c_x)
        dE, G["xq_w"][...], _ = nn.linear_backward(dq, c_q)
        dh_k, G["xk_w"][...], _ = nn.linear_backward(dk, c_k)
        dh_v, G["xv_w"][...], _ = nn.linear_backward(dv, c_v)
        dh = dh_k + dh_v
        if cfg.cross_residual:
            dh = dh + dzd
        dzg, G["enc_norm_g"][...], G["enc_norm_b"][...] = nn.layernorm_backward(dh, c_enc_norm)
        for i in reversed(range(cfg.enc_depth)):
            dzg = _block_backward(G, f"enc{i}", dzg, enc[i], cfg.heads)
        _, G["in_w"][...], G["in_b"][...] = nn.linear_backward(dzg, c_in)
        return dE

    def _prepare(self, *arrays):
        dtype = self.params.dtype
        return [np.asarray(a, dtype=dtype) for a in arrays]

    def denoise_embedded(self, z_t, z_a, E, t, params=None):
        """Predict from an explicit embedding matrix E (B, L, D) or (L, D)."""
        if not self.initialized and params is None:
            raise UntrainedModel("denoiser parameters were never initialized or loaded")
        z_t, z_a, E = self._prepare(z_t, z_a, E)
        single = z_t.ndim == 2
        if single:
            z_t, z_a, E = z_t[None], z_a[None], E[None]
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), z_t.shape[:1])
        self._check_inputs(z_t, z_a, E, t)
        P = self.views(params)
        out, _ = self._forward(P, z_t, z_a, E, t)
        self.calls += 1
        if not np.all(np.isfinite(out)):
            raise NonFiniteActivation("denoiser output")
        return out[0] if single else out

    def denoise(self, z_t, z_a, coords, t, params=None):
        """Predict from (row, col) anchor-unit coordinates, shape (B, L, 2) or (L, 2)."""
        P = self.views(params)
        E, _ = self.embed(coords, P)
        return self.denoise_embedded(z_t, z_a, E, t, params)

    def loss_and_grad(self, batch, sched, params=None):
        """Mean squared error against eps (or z0) and its exact gradient."""
        if not self.initialized and params is None:
            raise UntrainedModel("denoiser parameters were never initialized or loaded")
        flat = self.params if params is None else params
        P = self.layout.views(flat)
        dtype = flat.dtype
        t = np.asarray(batch.t, dtype=np.int64)
        z0 = np.asarray(batch.z0, dtype=np.float64)
        eps = np.asarray(batch.eps, dtype=np.float64)
        z_t = q_sample(z0, t, eps, sched).astype(dtype)
        target = (eps if self.cfg.prediction == "noise" else z0).astype(dtype)
        z_a = np.asarray(batch.z_a, dtype=dtype)
        E, pe_cache = self.embed(batch.coords, P)
        self._check_inputs(z_t, z_a, E, t)
        out, cache = self._forward(P, z_t, z_a, E, t)
        self.calls += 1
        if not np.all(np.isfinite(out)):
            raise NonFiniteActivation("denoiser output")
        diff = out - target
        loss = float(np.mean(diff.astype(np.float64) ** 2))
        dout = (2.0 / diff.size) * diff
        grad = np.zeros_like(flat)
        G = self.layout.views(grad)
        dE = self._backward(G, dout, cache)
        if pe_cache is not None:
            c1, cg, c2 = pe_cache
            dg, G["pe_w2"][...], G["pe_b2"][...] = nn.linear_backward(dE, c2)
            dh = nn.gelu_backward(dg, cg)
            _, G["pe_w1"][...], G["pe_b1"][...] = nn.linear_backward(dh, c1)
        return loss, grad
