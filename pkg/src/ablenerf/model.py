"""Attention-based renderer with learnable embeddings.

A ray is a sequence {R, v^1..v^N}: a learned ray token followed by
volume tokens embedded from IPE features of conic frustums, ordered
front to back.  A masked transformer lets v^i see only {R, v^1..v^i}
(alpha compositing's one-sided visibility, learned instead of fixed),
while the ray token row is unmasked and aggregates the whole ray.  The
ray token decodes to a view-independent colour; a bank of learnable
embeddings cross-attends to the volume tokens and is decoded by a
Fourier-encoded view token into a view-dependent colour.  The two are
added in linear space and tone-mapped to sRGB.

Two networks run per ray: a coarse pass on stratified samples, then a
fine pass on samples drawn from the coarse ray token's attention, with
the coarse output ray token reused as the fine input ray token.  The
embedding bank is a single shared parameter; all other weights are per
network, namespaced "coarse/..." and "fine/...".
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import diffcore as dc
from . import kernels, sampling
from .diffcore import Tensor
from .errors import ConfigError, ContractError, ShapeError

log = logging.getLogger("ablenerf.model")

SRGB_CUTOFF = 0.0031308


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ModelConfig:
    token_dim: int = 192
    coarse_layers: int = 2
    fine_layers: int = 6
    heads: int = 4
    ff_ratio: int = 3
    coarse_samples: int = 96
    fine_samples: int = 96
    n_le: int = 32
    view_bands: int = 16
    pos_bands: int = 16
    embed_layers: int = 4
    embed_width: int = 192
    le_blocks: int = 2
    masked: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.token_dim % self.heads != 0:
            raise ConfigError(
                f"token_dim {self.token_dim} not divisible by heads {self.heads}")
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("n_le", "masked"):
                continue
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(f"{f.name} must be a positive integer, got {v!r}")
        if self.n_le < 0:
            raise ConfigError(f"n_le must be >= 0, got {self.n_le}")

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown model config keys: {sorted(bad)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# parameters


def _xavier(rng, n_in, n_out, dtype):
    lim = math.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-lim, lim, size=(n_in, n_out)).astype(dtype)


def init_params(cfg, rng, dtype=np.float32):
    """Fresh parameter dict; draw order is fixed so a seed pins every value."""
    p = {}

    def aff(name, n_in, n_out):
        p[name + "/W"] = Tensor(_xavier(rng, n_in, n_out, dtype),
                                requires_grad=True, name=name + "/W")
        p[name + "/b"] = Tensor(np.zeros(n_out, dtype=dtype),
                                requires_grad=True, name=name + "/b")

    def ln(name, d):
        p[name + "/g"] = Tensor(np.ones(d, dtype=dtype), requires_grad=True,
                                name=name + "/g")
        p[name + "/b"] = Tensor(np.zeros(d, dtype=dtype), requires_grad=True,
                                name=name + "/b")

    def attn(name, d):
        for proj in ("q", "k", "v", "o"):
            aff(f"{name}/{proj}", d, d)

    d = cfg.token_dim
    p["ray_token_init"] = Tensor(
        (0.02 * rng.standard_normal(d)).astype(dtype),
        requires_grad=True, name="ray_token_init")
    if cfg.n_le > 0:
        p["le_bank"] = Tensor(
            (0.02 * rng.standard_normal((cfg.n_le, d))).astype(dtype),
            requires_grad=True, name="le_bank")

    for net, layers in (("coarse", cfg.coarse_layers), ("fine", cfg.fine_layers)):
        n_in = 6 * cfg.pos_bands
        for j in range(cfg.embed_layers):
            aff(f"{net}/embed/{j}", n_in, cfg.embed_width)
            n_in = cfg.embed_width
        aff(f"{net}/embed/proj", cfg.embed_width, d)
        for i in range(layers):
            blk = f"{net}/ab{i}"
            ln(f"{blk}/ln1", d)
            attn(f"{blk}/attn", d)
            ln(f"{blk}/ln2", d)
            aff(f"{blk}/ff/0", d, cfg.ff_ratio * d)
            aff(f"{blk}/ff/1", cfg.ff_ratio * d, d)
        ln(f"{net}/ab_out_ln", d)
        aff(f"{net}/direct/0", d, d)
        aff(f"{net}/direct/1", d, 3)
        # start the radiance heads dim (softplus(-2) ~ 0.13) so the summed
        # colour lands inside the sRGB curve, not on the zero-gradient clamp
        p[f"{net}/direct/1/b"].data[:] = -2.0
        if cfg.n_le > 0:
            aff(f"{net}/view", 6 * cfg.view_bands, d)
            for b in range(cfg.le_blocks):
                ln(f"{net}/le{b}/cross/ln_q", d)
                ln(f"{net}/le{b}/cross/ln_kv", d)
                attn(f"{net}/le{b}/cross/attn", d)
                ln(f"{net}/le{b}/self/ln", d)
                attn(f"{net}/le{b}/self/attn", d)
            ln(f"{net}/le_dec/ln_q", d)
            ln(f"{net}/le_dec/ln_kv", d)
            attn(f"{net}/le_dec/attn", d)
            aff(f"{net}/vhead/0", d, d)
            aff(f"{net}/vhead/1", d, 3)
            p[f"{net}/vhead/1/b"].data[:] = -2.0
    return p


def params_to_arrays(params):
    return {k: v.data for k, v in params.items()}


def params_from_arrays(arrays, dtype=None):
    out = {}
    for k, a in arrays.items():
        if dtype is not None:
            a = a.astype(dtype)
        out[k] = Tensor(a, requires_grad=True, name=k)
    return out


def param_count(params):
    return sum(int(np.prod(t.shape)) for t in params.values())


# ---------------------------------------------------------------------------
# masking


@dataclass(frozen=True)
class AttentionMask:
    allowed: np.ndarray
    # causal masks carry the front-to-back visibility contract and get the
    # hidden-layer ray-row treatment; the all-allowed ablation does not.
    # The flag is needed because at N=1 both masks are the same matrix.
    causal: bool = True

    def __post_init__(self):
        a = np.asarray(self.allowed, dtype=bool)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ShapeError(f"mask must be square, got {a.shape}")
        if not a.any(axis=1).all():
            raise ContractError("every mask row needs at least one allowed key")
        object.__setattr__(self, "allowed", a)


def build_ray_mask(n):
    """Visibility mask over {R, v^1..v^N}: v^i sees {R, v^1..v^i}, R sees all."""
    if n < 1:
        raise ContractError(f"need at least one volume token, got {n}")
    allowed = np.tril(np.ones((n + 1, n + 1), dtype=bool))
    allowed[0, :] = True
    return AttentionMask(allowed, causal=True)


def full_mask(n):
    """The --no-mask ablation: every token sees every token."""
    return AttentionMask(np.ones((n + 1, n + 1), dtype=bool), causal=False)


# ---------------------------------------------------------------------------
# attention plumbing


def _split_heads(x, heads):
    b, t, d = x.shape
    return dc.swapaxes(dc.reshape(x, (b, t, heads, d // heads)), 1, 2)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return dc.reshape(dc.swapaxes(x, 1, 2), (b, t, h * dh))


def _mha(p, prefix, q_in, kv_in, mask, heads):
    """Multi-head attention; returns (output (B,Tq,D), probs (B,H,Tq,Tk))."""
    q = dc.affine(q_in, p[f"{prefix}/q/W"], p[f"{prefix}/q/b"])
    k = dc.affine(kv_in, p[f"{prefix}/k/W"], p[f"{prefix}/k/b"])
    v = dc.affine(kv_in, p[f"{prefix}/v/W"], p[f"{prefix}/v/b"])
    qh = _split_heads(q, heads)
    kh = _split_heads(k, heads)
    vh = _split_heads(v, heads)
    scores = dc.mul(dc.matmul(qh, dc.swapaxes(kh, -1, -2)),
                    1.0 / math.sqrt(q.shape[-1] // heads))
    if mask is None:
        mask = np.ones(scores.shape[-2:], dtype=bool)
    probs = dc.softmax_masked(scores, mask)
    out = dc.affine(_merge_heads(dc.matmul(probs, vh)),
                    p[f"{prefix}/o/W"], p[f"{prefix}/o/b"])
    return out, probs


def _ab_block(p, blk, x, mask, heads):
    h = dc.layer_norm(x, p[f"{blk}/ln1/g"], p[f"{blk}/ln1/b"])
    a, probs = _mha(p, f"{blk}/attn", h, h, mask, heads)
    x = dc.add(x, a)
    h = dc.layer_norm(x, p[f"{blk}/ln2/g"], p[f"{blk}/ln2/b"])
    f = dc.affine(dc.relu(dc.affine(h, p[f"{blk}/ff/0/W"], p[f"{blk}/ff/0/b"])),
                  p[f"{blk}/ff/1/W"], p[f"{blk}/ff/1/b"])
    x = dc.add(x, f)
    return x, probs


def ab_transformer(p, net, tokens, mask, layers, heads):
    """Pre-norm masked transformer over {R, v^1..v^N}.

    tokens: Tensor (B, N+1, D).  Returns (normalized output sequence,
    attention probs of the last layer, shape (B, H, N+1, N+1)).

    The ray token aggregates the sequence only at the final layer.  On
    hidden layers its row is restricted to itself: if it pooled every
    volume at every depth, its column (visible to all volume rows) would
    smuggle rear-sample information past the causal mask, and a volume
    token's receptive field would silently grow beyond {R, v^1..v^i}
    from the second layer on.  Keeping the hidden ray row self-only
    makes prefix truncation exact at any depth while the output ray
    token still sees everything.  An all-allowed mask (the no-mask
    ablation) has no such contract and is used unchanged at every layer.
    """
    if isinstance(mask, AttentionMask):
        allowed, causal = mask.allowed, mask.causal
    else:
        allowed = np.asarray(mask, dtype=bool)
        causal = not allowed.all()
    t = tokens.shape[1]
    if allowed.shape != (t, t):
        raise ShapeError(
            f"mask shape {allowed.shape} does not fit sequence length {t}")
    hidden = allowed.copy()
    if causal:
        hidden[0, 1:] = False
    x, probs = tokens, None
    for i in range(layers):
        m = allowed if i == layers - 1 else hidden
        x, probs = _ab_block(p, f"{net}/ab{i}", x, m, heads)
    x = dc.layer_norm(x, p[f"{net}/ab_out_ln/g"], p[f"{net}/ab_out_ln/b"])
    return x, probs


# ---------------------------------------------------------------------------
# embedding and heads


def embed_volume(p, net, feats):
    """IPE features (..., 6*pos_bands) -> volume tokens (..., D)."""
    x = feats if isinstance(feats, Tensor) else dc.constant(feats)
    j = 0
    while f"{net}/embed/{j}/W" in p:
        x = dc.relu(dc.affine(x, p[f"{net}/embed/{j}/W"], p[f"{net}/embed/{j}/b"]))
        j += 1
    return dc.affine(x, p[f"{net}/embed/proj/W"], p[f"{net}/embed/proj/b"])


def direct_colour_head(p, net, ray_token):
    """Ray token (B, 1, D) -> non-negative linear RGB (B, 3)."""
    h = dc.relu(dc.affine(ray_token, p[f"{net}/direct/0/W"], p[f"{net}/direct/0/b"]))
    y = dc.softplus(dc.affine(h, p[f"{net}/direct/1/W"], p[f"{net}/direct/1/b"]))
    return dc.reshape(y, (y.shape[0], 3))


def view_features(view_dirs, bands):
    """Plain sin/cos Fourier features of a unit direction, (B, 6*bands)."""
    d = np.asarray(view_dirs, dtype=np.float64)
    norms = np.linalg.norm(d, axis=-1, keepdims=True)
    if np.any(np.abs(norms - 1.0) > 1e-4):
        log.warning("view direction not unit length (|d| off by up to %.3g); "
                    "normalizing", float(np.abs(norms - 1.0).max()))
        d = d / norms
    d = np.ascontiguousarray(d)
    return kernels.ipe_features(d, np.zeros_like(d), bands)


def encode_view_token(p, net, view_dirs, bands, dtype):
    """Unit view directions (B, 3) -> view tokens (B, 1, D)."""
    feats = view_features(view_dirs, bands).astype(dtype)
    tok = dc.affine(dc.constant(feats), p[f"{net}/view/W"], p[f"{net}/view/b"])
    return dc.reshape(tok, (tok.shape[0], 1, tok.shape[-1]))


def le_transformer(p, net, cfg, volume_tokens, view_token):
    """Learnable-embedding branch -> view-dependent linear RGB (B, 3).

    The shared bank cross-attends to the (post-transformer) volume
    tokens, mixes internally, and is decoded by the view token.  No
    masking anywhere.  n_le = 0 disables the branch (returns zeros).
    """
    b = volume_tokens.shape[0]
    if cfg.n_le == 0:
        return dc.constant(np.zeros((b, 3), dtype=volume_tokens.dtype))
    bank = p["le_bank"]
    le = dc.broadcast_to(dc.reshape(bank, (1,) + bank.shape),
                         (b,) + bank.shape)
    for i in range(cfg.le_blocks):
        blk = f"{net}/le{i}"
        qn = dc.layer_norm(le, p[f"{blk}/cross/ln_q/g"], p[f"{blk}/cross/ln_q/b"])
        kvn = dc.layer_norm(volume_tokens,
                            p[f"{blk}/cross/ln_kv/g"], p[f"{blk}/cross/ln_kv/b"])
        a, _ = _mha(p, f"{blk}/cross/attn", qn, kvn, None, cfg.heads)
        le = dc.add(le, a)
        sn = dc.layer_norm(le, p[f"{blk}/self/ln/g"], p[f"{blk}/self/ln/b"])
        a, _ = _mha(p, f"{blk}/self/attn", sn, sn, None, cfg.heads)
        le = dc.add(le, a)
    qn = dc.layer_norm(view_token, p[f"{net}/le_dec/ln_q/g"], p[f"{net}/le_dec/ln_q/b"])
    kvn = dc.layer_norm(le, p[f"{net}/le_dec/ln_kv/g"], p[f"{net}/le_dec/ln_kv/b"])
    dec, _ = _mha(p, f"{net}/le_dec/attn", qn, kvn, None, cfg.heads)
    v = dc.add(view_token, dec)
    h = dc.relu(dc.affine(v, p[f"{net}/vhead/0/W"], p[f"{net}/vhead/0/b"]))
    y = dc.softplus(dc.affine(h, p[f"{net}/vhead/1/W"], p[f"{net}/vhead/1/b"]))
    return dc.reshape(y, (b, 3))


def tone_map(direct, viewdep):
    """Linear radiance sum -> sRGB, clamped to [0, 1].

    Both inputs must be non-negative (softplus heads guarantee that in
    the pipeline).  Differentiable everywhere except the clamp edge,
    where the outside subgradient is 0.
    """
    s = dc.add(direct, viewdep)
    if np.any(s.data < 0):
        raise ContractError("tone_map expects non-negative linear colours")
    lo = dc.mul(s, 12.92)
    # shift into [cutoff, inf) before the log so the dark branch never NaNs
    s_hi = dc.add(dc.relu(dc.sub(s, SRGB_CUTOFF)), SRGB_CUTOFF)
    hi = dc.sub(dc.mul(dc.exp(dc.mul(dc.log(s_hi), 1.0 / 2.4)), 1.055), 0.055)
    w = (s.data <= SRGB_CUTOFF).astype(s.dtype)
    return dc.clamp01(dc.add(dc.mul(lo, w), dc.mul(hi, 1.0 - w)))


def ray_attention(probs):
    """Ray-token attention over volumes: head-mean of row 0, ray column
    dropped, renormalized to sum to 1.  Plain numbers, no gradient."""
    a = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    row = a[:, :, 0, 1:].mean(axis=1)
    total = row.sum(axis=-1, keepdims=True)
    row = np.where(total > 0, row, 1.0)
    return row / row.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# full renderer


@dataclass
class RayBatchOutput:
    """Differentiable colours plus plain-number diagnostics for a batch."""

    rgb_coarse: Tensor          # (B, 3) sRGB in [0, 1]
    rgb_fine: Tensor            # (B, 3) sRGB in [0, 1]
    direct_rgb: np.ndarray      # (B, 3) linear, fine network
    viewdep_rgb: np.ndarray     # (B, 3) linear, fine network
    attn_coarse: np.ndarray     # (B, N_c), rows sum to 1
    attn_fine: np.ndarray       # (B, N_f), rows sum to 1
    depth: np.ndarray           # (B,) euclidean, argmax-attention frustum
    depth_expected: np.ndarray = field(repr=False, default=None)  # (B,) attention-weighted mean
    fine_edges: np.ndarray = field(repr=False, default=None)


def _net_pass(p, cfg, net, feats_np, ray0, mask, layers, view_dirs, dtype):
    vol_in = embed_volume(p, net, dc.constant(feats_np.astype(dtype)))
    seq = dc.concat([ray0, vol_in], axis=1)
    seq, probs = ab_transformer(p, net, seq, mask, layers, cfg.heads)
    ray_out = dc.tslice(seq, (slice(None), slice(0, 1)))
    vols = dc.tslice(seq, (slice(None), slice(1, None)))
    direct = direct_colour_head(p, net, ray_out)
    if cfg.n_le > 0:
        vtok = encode_view_token(p, net, view_dirs, cfg.view_bands, dtype)
        viewdep = le_transformer(p, net, cfg, vols, vtok)
    else:
        viewdep = le_transformer(p, net, cfg, vols, None)
    return ray_out, probs, direct, viewdep


def render_rays(p, cfg, origins, dirs, radius, near, far, rng=None,
                fine_edges=None):
    """Render a batch of rays; rng jitters samples (training) or, when
    None, uses deterministic bin midpoints (evaluation).

    fine_edges overrides the attention-driven resampling with caller
    supplied interval edges (B, N_f+1).  Sampling positions are not
    part of the gradient graph, so finite-difference checks must pin
    them; rendering with custom placements reuses the same hook.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    b = origins.shape[0]
    dtype = p["ray_token_init"].dtype
    dnorm = np.linalg.norm(dirs, axis=-1)
    unit_dirs = dirs / dnorm[:, None]

    mask_c = build_ray_mask(cfg.coarse_samples) if cfg.masked \
        else full_mask(cfg.coarse_samples)
    mask_f = build_ray_mask(cfg.fine_samples) if cfg.masked \
        else full_mask(cfg.fine_samples)

    rt = p["ray_token_init"]
    ray0 = dc.broadcast_to(dc.reshape(rt, (1, 1) + rt.shape), (b, 1) + rt.shape)

    # coarse pass on stratified conic frustums
    edges_c = sampling.stratified_edges(near, far, cfg.coarse_samples,
                                        rng=rng, batch=b)
    means, var = sampling.frustum_gaussians(origins, dirs, radius, edges_c)
    feats_c = sampling.ipe_batch(means, var, cfg.pos_bands)
    ray_c, probs_c, direct_c, viewdep_c = _net_pass(
        p, cfg, "coarse", feats_c, ray0, mask_c, cfg.coarse_layers,
        unit_dirs, dtype)
    rgb_c = tone_map(direct_c, viewdep_c)
    attn_c = ray_attention(probs_c)

    # fine pass: resample from the coarse attention, reuse the coarse
    # output ray token as the fine input token (gradients flow through
    # the token, not through the sample positions)
    if fine_edges is not None:
        edges_f = np.asarray(fine_edges, dtype=np.float64)
    elif rng is None:
        u = sampling.midpoint_uniforms(cfg.fine_samples, batch=b)
        edges_f = sampling.resample_edges(edges_c, attn_c, cfg.fine_samples, u)
    else:
        u = sampling.stratified_uniforms(cfg.fine_samples, rng, batch=b)
        edges_f = sampling.resample_edges(edges_c, attn_c, cfg.fine_samples, u)
    means_f, var_f = sampling.frustum_gaussians(origins, dirs, radius, edges_f)
    feats_f = sampling.ipe_batch(means_f, var_f, cfg.pos_bands)
    ray_f, probs_f, direct_f, viewdep_f = _net_pass(
        p, cfg, "fine", feats_f, ray_c, mask_f, cfg.fine_layers,
        unit_dirs, dtype)
    rgb_f = tone_map(direct_f, viewdep_f)
    attn_f = ray_attention(probs_f)

    t_mid = 0.5 * (edges_f[:, 1:] + edges_f[:, :-1])
    peak = np.argmax(attn_f, axis=-1)
    depth = dnorm * t_mid[np.arange(b), peak]
    depth_exp = dnorm * (attn_f * t_mid).sum(axis=-1)

    return RayBatchOutput(
        rgb_coarse=rgb_c, rgb_fine=rgb_f,
        direct_rgb=direct_f.data.copy(), viewdep_rgb=viewdep_f.data.copy(),
        attn_coarse=attn_c, attn_fine=attn_f,
        depth=depth, depth_expected=depth_exp, fine_edges=edges_f)


@dataclass
class RayOutput:
    """Single-ray numeric view of RayBatchOutput."""

    rgb_coarse: np.ndarray
    rgb_fine: np.ndarray
    direct_rgb: np.ndarray
    viewdep_rgb: np.ndarray
    attn_coarse: np.ndarray
    attn_fine: np.ndarray
    depth: float
    depth_expected: float


def render_ray(ray, p, cfg, near, far, rng=None):
    """Render one sampling.Ray; returns plain numbers (no graph kept)."""
    with dc.no_grad():
        out = render_rays(p, cfg, ray.origin[None, :], ray.direction[None, :],
                          ray.pixel_radius, near, far, rng=rng)
    return RayOutput(
        rgb_coarse=out.rgb_coarse.data[0].copy(),
        rgb_fine=out.rgb_fine.data[0].copy(),
        direct_rgb=out.direct_rgb[0], viewdep_rgb=out.viewdep_rgb[0],
        attn_coarse=out.attn_coarse[0], attn_fine=out.attn_fine[0],
        depth=float(out.depth[0]),
        depth_expected=float(out.depth_expected[0]))
