"""Plain ViT encoder with a shallow bilinear-upsampling decoder, in numpy.

Every layer has a forward that returns ``(output, cache)`` and a matching
backward, so :func:`forward` / :func:`backward` give exact reverse-mode
gradients for the whole model.  Batched throughout: images are (B, H, W),
tokens (B, N, D), feature maps (B, C, h, w).  Parameters live in a flat
``dict`` keyed by dotted names.
"""
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

LN_EPS = 1e-6
INIT_STD = 0.02
ELEMENTWISE_FLOPS = 5


@dataclass
class ViTConfig:
    image_size: int = 512
    patch_size: int = 16
    embed_dim: int = 768
    depth: int = 12
    heads: int = 12
    mlp_ratio: float = 4.0
    # first entry is the 1x1 projection width; one more entry per 2x stage
    decoder_channels: tuple = field(default=(256, 128, 64, 32, 16))

    def __post_init__(self):
        self.decoder_channels = tuple(int(c) for c in self.decoder_channels)

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def num_patches(self):
        return self.grid * self.grid

    @property
    def head_dim(self):
        return self.embed_dim // self.heads

    @property
    def hidden_dim(self):
        return int(round(self.mlp_ratio * self.embed_dim))

    @property
    def n_stages(self):
        return int(round(math.log2(self.patch_size)))

    def validate(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if 2 ** self.n_stages != self.patch_size:
            raise ValueError(f"patch_size {self.patch_size} must be a power of two")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.depth < 0:
            raise ValueError("depth must be nonnegative")
        if len(self.decoder_channels) != self.n_stages + 1:
            raise ValueError(f"decoder_channels needs {self.n_stages + 1} entries for patch_size "
                             f"{self.patch_size}, got {len(self.decoder_channels)}")
        return self


def vit_base_config():
    """ViT-Base/16 at 512x512 with the five-level decoder."""
    return ViTConfig()


def tiny_config(image_size=16, embed_dim=8, depth=2, heads=2, decoder_channels=(8, 4, 2)):
    return ViTConfig(image_size=image_size, patch_size=4, embed_dim=embed_dim, depth=depth,
                     heads=heads, mlp_ratio=4.0, decoder_channels=decoder_channels)


# ------------------------------------------------------------------ parameters


def param_shapes(config, include_decoder=True):
    """Ordered ``name -> shape`` for every learnable tensor."""
    c = config
    d, hid, p2 = c.embed_dim, c.hidden_dim, c.patch_size ** 2
    shapes = {"embed.proj": (d, p2), "embed.pos": (c.num_patches, d)}
    for layer in range(c.depth):
        pre = f"blocks.{layer}."
        shapes.update({
            pre + "ln1.weight": (d,), pre + "ln1.bias": (d,),
            pre + "attn.qkv.weight": (3 * d, d), pre + "attn.qkv.bias": (3 * d,),
            pre + "attn.out.weight": (d, d), pre + "attn.out.bias": (d,),
            pre + "ln2.weight": (d,), pre + "ln2.bias": (d,),
            pre + "mlp.fc1.weight": (hid, d), pre + "mlp.fc1.bias": (hid,),
            pre + "mlp.fc2.weight": (d, hid), pre + "mlp.fc2.bias": (d,),
        })
    shapes["norm.weight"] = (d,)
    shapes["norm.bias"] = (d,)
    if include_decoder:
        ch = c.decoder_channels
        shapes["decoder.proj.weight"] = (ch[0], d)
        shapes["decoder.proj.bias"] = (ch[0],)
        for s in range(c.n_stages):
            shapes[f"decoder.stages.{s}.weight"] = (ch[s + 1], ch[s], 3, 3)
            shapes[f"decoder.stages.{s}.bias"] = (ch[s + 1],)
        shapes["decoder.head.weight"] = (1, ch[-1])
        shapes["decoder.head.bias"] = (1,)
    return shapes


def init_params(config, seed=0):
    """Truncated-normal (std 0.02, cut at 2 std) weights, zero biases, unit norm scales."""
    config.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape)
        elif ".ln" in name or name.startswith("norm."):
            params[name] = np.ones(shape)
        else:
            w = rng.standard_normal(shape)
            while True:
                bad = np.abs(w) > 2.0
                if not bad.any():
                    break
                w[bad] = rng.standard_normal(int(bad.sum()))
            params[name] = w * INIT_STD
    return params


def check_params(params, config):
    expected = param_shapes(config)
    missing = set(expected) - set(params)
    extra = set(params) - set(expected)
    if missing or extra:
        raise ValueError(f"parameter set mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
    for name, shape in expected.items():
        if params[name].shape != tuple(shape):
            raise ValueError(f"{name}: expected shape {tuple(shape)}, got {params[name].shape}")


def count_params(config, include_decoder=True):
    """Closed-form learnable-parameter count."""
    c = config
    d, hid, p2 = c.embed_dim, c.hidden_dim, c.patch_size ** 2
    per_layer = (
        2 * d                      # ln1
        + 3 * d * d + 3 * d        # qkv
        + d * d + d                # attention output
        + 2 * d                    # ln2
        + hid * d + hid            # fc1
        + d * hid + d              # fc2
    )
    total = d * p2 + c.num_patches * d + c.depth * per_layer + 2 * d
    if include_decoder:
        ch = c.decoder_channels
        total += ch[0] * d + ch[0]
        total += sum(ch[s + 1] * ch[s] * 9 + ch[s + 1] for s in range(c.n_stages))
        total += ch[-1] + 1
    return total


def count_flops(config, flops_per_mac=2):
    """Analytic forward-pass cost.

    Matmuls and convolutions count ``flops_per_mac`` per multiply-accumulate
    (2 by default).  Softmax, layer norm, GELU and sigmoid count 5 FLOPs per
    element; bilinear upsampling counts 4 MACs per output element.  Bias
    adds and residual sums are not counted.

    Returns a dict of per-term FLOPs plus ``total`` and ``macs`` (the
    matmul/conv/upsample multiply-accumulates alone).
    """
    c = config
    n, d, hid, p2, L = c.num_patches, c.embed_dim, c.hidden_dim, c.patch_size ** 2, c.depth
    k = flops_per_mac
    e = ELEMENTWISE_FLOPS
    terms = {
        "embedding": k * n * p2 * d,
        "qkv_projection": L * k * n * d * 3 * d,
        "attention_scores": L * k * n * n * d,
        "attention_weighting": L * k * n * n * d,
        "attention_output": L * k * n * d * d,
        "ffn": L * 2 * k * n * d * hid,
        "softmax": L * e * c.heads * n * n,
        "layer_norm": (2 * L + 1) * e * n * d,
        "gelu": L * e * n * hid,
    }
    ch = c.decoder_channels
    side = c.grid
    dec_mac = n * d * ch[0]
    up_mac = 0
    conv_mac = 0
    act = 0
    for s in range(c.n_stages):
        side *= 2
        px = side * side
        up_mac += 4 * px * ch[s]
        conv_mac += px * ch[s] * ch[s + 1] * 9
        act += px * ch[s + 1]
    head_mac = side * side * ch[-1]
    terms["decoder_projection"] = k * dec_mac
    terms["decoder_upsample"] = k * up_mac
    terms["decoder_conv"] = k * (conv_mac + head_mac)
    terms["decoder_activation"] = e * (act + side * side)
    macs = (n * p2 * d + L * (4 * n * d * d + 2 * n * n * d + 2 * n * d * hid)
            + dec_mac + up_mac + conv_mac + head_mac)
    out = dict(terms)
    out["total"] = sum(terms.values())
    out["macs"] = macs
    out["flops_per_mac"] = k
    return out


# ---------------------------------------------------------- patches and tokens


def patchify(images, patch_size):
    """(B, H, W) or (H, W) -> (B, N, P*P) / (N, P*P), row-major patches and pixels."""
    images = np.asarray(images, dtype=np.float64)
    squeeze = images.ndim == 2
    if squeeze:
        images = images[None]
    b, h, w = images.shape
    p = patch_size
    if h % p or w % p:
        raise ValueError(f"image {h}x{w} not divisible by patch size {p}")
    out = images.reshape(b, h // p, p, w // p, p).transpose(0, 1, 3, 2, 4).reshape(b, (h // p) * (w // p), p * p)
    return out[0] if squeeze else out


def unpatchify(patches, patch_size, height, width):
    patches = np.asarray(patches)
    squeeze = patches.ndim == 2
    if squeeze:
        patches = patches[None]
    p = patch_size
    b = patches.shape[0]
    out = patches.reshape(b, height // p, width // p, p, p).transpose(0, 1, 3, 2, 4).reshape(b, height, width)
    return out[0] if squeeze else out


def embed(patches, proj, pos):
    """token_i = proj @ patch_i + pos_i."""
    if patches.shape[-2] != pos.shape[0]:
        raise ValueError(f"{patches.shape[-2]} patches but {pos.shape[0]} positional embeddings")
    return patches @ proj.T + pos


# ---------------------------------------------------------------- layer pieces


def linear_fwd(x, w, b):
    return x @ w.T + b, x


def linear_bwd(dy, x, w):
    dw = dy.reshape(-1, dy.shape[-1]).T @ x.reshape(-1, x.shape[-1])
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    return dy @ w, dw, db


def layer_norm_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def layer_norm_bwd(dy, cache):
    xhat, rstd, g = cache
    flat = xhat.reshape(-1, xhat.shape[-1])
    dg = (dy.reshape(flat.shape) * flat).sum(axis=0)
    db = dy.reshape(flat.shape).sum(axis=0)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x):
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def softmax(s):
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def attention_fwd(x, w_qkv, b_qkv, w_out, b_out, heads):
    """Multi-head self-attention; returns (output, cache, attention probabilities)."""
    bsz, n, d = x.shape
    dh = d // heads
    qkv = x @ w_qkv.T + b_qkv
    qkv = qkv.reshape(bsz, n, 3, heads, dh).transpose(2, 0, 3, 1, 4)  # 3, B, h, N, dh
    q, k, v = qkv[0], qkv[1], qkv[2]
    scale = 1.0 / math.sqrt(dh)
    attn = softmax((q @ k.transpose(0, 1, 3, 2)) * scale)
    o = attn @ v
    merged = o.transpose(0, 2, 1, 3).reshape(bsz, n, d)
    out = merged @ w_out.T + b_out
    return out, (x, q, k, v, attn, merged, scale, heads), attn


def attention_bwd(dout, cache, w_qkv, w_out):
    x, q, k, v, attn, merged, scale, heads = cache
    bsz, n, d = x.shape
    dh = d // heads
    dmerged, dw_out, db_out = linear_bwd(dout, merged, w_out)
    do = dmerged.reshape(bsz, n, heads, dh).transpose(0, 2, 1, 3)
    dattn = do @ v.transpose(0, 1, 3, 2)
    dv = attn.transpose(0, 1, 3, 2) @ do
    ds = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True)) * scale
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q
    dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(bsz, n, 3 * d)
    dx, dw_qkv, db_qkv = linear_bwd(dqkv, x, w_qkv)
    return dx, dw_qkv, db_qkv, dw_out, db_out


def encoder_layer_fwd(z, params, prefix, heads):
    """Pre-norm block: z' = MSA(LN(z)) + z ; out = FFN(LN(z')) + z'."""
    p = params
    h1, ln1 = layer_norm_fwd(z, p[prefix + "ln1.weight"], p[prefix + "ln1.bias"])
    a, attn_cache, attn = attention_fwd(h1, p[prefix + "attn.qkv.weight"], p[prefix + "attn.qkv.bias"],
                                        p[prefix + "attn.out.weight"], p[prefix + "attn.out.bias"], heads)
    z1 = z + a
    h2, ln2 = layer_norm_fwd(z1, p[prefix + "ln2.weight"], p[prefix + "ln2.bias"])
    u = h2 @ p[prefix + "mlp.fc1.weight"].T + p[prefix + "mlp.fc1.bias"]
    gu = gelu(u)
    f = gu @ p[prefix + "mlp.fc2.weight"].T + p[prefix + "mlp.fc2.bias"]
    return z1 + f, (ln1, attn_cache, ln2, h2, u, gu), attn


def encoder_layer_bwd(dz_out, cache, params, prefix, grads):
    p = params
    ln1, attn_cache, ln2, h2, u, gu = cache
    dgu, dw2, db2 = linear_bwd(dz_out, gu, p[prefix + "mlp.fc2.weight"])
    du = dgu * gelu_grad(u)
    dh2, dw1, db1 = linear_bwd(du, h2, p[prefix + "mlp.fc1.weight"])
    dz1_ln, dg2, dbeta2 = layer_norm_bwd(dh2, ln2)
    dz1 = dz_out + dz1_ln
    dh1, dwqkv, dbqkv, dwo, dbo = attention_bwd(dz1, attn_cache, p[prefix + "attn.qkv.weight"],
                                                p[prefix + "attn.out.weight"])
    dz_ln, dg1, dbeta1 = layer_norm_bwd(dh1, ln1)
    grads.update({
        prefix + "mlp.fc2.weight": dw2, prefix + "mlp.fc2.bias": db2,
        prefix + "mlp.fc1.weight": dw1, prefix + "mlp.fc1.bias": db1,
        prefix + "ln2.weight": dg2, prefix + "ln2.bias": dbeta2,
        prefix + "attn.qkv.weight": dwqkv, prefix + "attn.qkv.bias": dbqkv,
        prefix + "attn.out.weight": dwo, prefix + "attn.out.bias": dbo,
        prefix + "ln1.weight": dg1, prefix + "ln1.bias": dbeta1,
    })
    return dz1 + dz_ln


# ------------------------------------------------------------- decoder pieces


def upsample_matrix(n):
    """(2n, n) bilinear 2x interpolation matrix, half-pixel centres, edge clamped."""
    a = np.zeros((2 * n, n))
    for i in range(2 * n):
        src = max((i + 0.5) / 2.0 - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n - 1)
        i1 = min(i0 + 1, n - 1)
        w = src - i0
        a[i, i0] += 1.0 - w
        a[i, i1] += w
    return a


def upsample_fwd(x):
    a = upsample_matrix(x.shape[-1])
    return np.einsum("ij,bcjk,lk->bcil", a, x, a, optimize=True), a


def upsample_bwd(dy, a):
    return np.einsum("ij,bcil,lk->bcjk", a, dy, a, optimize=True)


def conv3x3(x, w, b=None):
    """Same-size 3x3 cross-correlation with zero padding; x (B, C, H, W), w (O, C, 3, 3)."""
    bsz, c, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = sliding_window_view(xp, (3, 3), axis=(2, 3))  # B, C, H, W, 3, 3
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(bsz, h, wd, c * 9)
    out = cols @ w.reshape(w.shape[0], -1).T
    if b is not None:
        out = out + b
    return out.transpose(0, 3, 1, 2), cols


def conv3x3_bwd(dy, cols, w):
    o = w.shape[0]
    dy_t = dy.transpose(0, 2, 3, 1)  # B, H, W, O
    dw = (dy_t.reshape(-1, o).T @ cols.reshape(-1, cols.shape[-1])).reshape(w.shape)
    db = dy_t.reshape(-1, o).sum(axis=0)
    # input gradient = correlation of dy with the spatially flipped, transposed kernel
    w_flip = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    dx, _ = conv3x3(dy, np.ascontiguousarray(w_flip))
    return dx, dw, db


def conv1x1(x, w, b):
    return np.einsum("oc,bchw->bohw", w, x, optimize=True) + b[None, :, None, None]


def conv1x1_bwd(dy, x, w):
    dw = np.einsum("bohw,bchw->oc", dy, x, optimize=True)
    db = dy.sum(axis=(0, 2, 3))
    dx = np.einsum("oc,bohw->bchw", w, dy, optimize=True)
    return dx, dw, db


# ------------------------------------------------------------------ full model


def _as_batch(images, config):
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    if images.shape[1:] != (config.image_size, config.image_size):
        raise ValueError(f"expected {config.image_size}x{config.image_size} input, got {images.shape[1:]}")
    return images


def encode(images, params, config, keep_cache=False):
    """Patch embedding, encoder layers and final norm -> tokens (B, N, D)."""
    patches = patchify(_as_batch(images, config), config.patch_size)
    z = embed(patches, params["embed.proj"], params["embed.pos"])
    caches = []
    attns = []
    for layer in range(config.depth):
        z, cache, attn = encoder_layer_fwd(z, params, f"blocks.{layer}.", config.heads)
        caches.append(cache)
        attns.append(attn)
    tokens, norm_cache = layer_norm_fwd(z, params["norm.weight"], params["norm.bias"])
    if not keep_cache:
        return tokens, None
    return tokens, {"patches": patches, "layers": caches, "norm": norm_cache, "attn": attns}


def decode(tokens, params, config, keep_cache=False):
    """Tokens -> logits (B, H, W) through the upsampling head."""
    bsz = tokens.shape[0]
    g = config.grid
    fmap = tokens.reshape(bsz, g, g, config.embed_dim).transpose(0, 3, 1, 2)
    x = conv1x1(fmap, params["decoder.proj.weight"], params["decoder.proj.bias"])
    stages = []
    for s in range(config.n_stages):
        up, a = upsample_fwd(x)
        pre, cols = conv3x3(up, params[f"decoder.stages.{s}.weight"], params[f"decoder.stages.{s}.bias"])
        x = gelu(pre)
        stages.append((a, cols, pre))
    logits = conv1x1(x, params["decoder.head.weight"], params["decoder.head.bias"])[:, 0]
    if not keep_cache:
        return logits, None
    return logits, {"fmap": fmap, "stages": stages, "last": x}


def forward(images, params, config, keep_cache=False):
    """Soft mask in [0, 1] with the input's spatial shape.

    With ``keep_cache`` returns ``(probs, cache)`` for :func:`backward`.
    """
    squeeze = np.asarray(images).ndim == 2
    images = _as_batch(images, config)
    tokens, enc_cache = encode(images, params, config, keep_cache)
    logits, dec_cache = decode(tokens, params, config, keep_cache)
    probs = sigmoid(logits)
    if keep_cache:
        return probs, {"enc": enc_cache, "dec": dec_cache, "tokens": tokens, "logits": logits}
    return probs[0] if squeeze else probs


def backward(dlogits, cache, params, config):
    """Gradients of a scalar loss w.r.t. every parameter, given d loss / d logits."""
    grads = {}
    dec = cache["dec"]
    enc = cache["enc"]
    bsz = dlogits.shape[0]

    dx, grads["decoder.head.weight"], grads["decoder.head.bias"] = conv1x1_bwd(
        dlogits[:, None], dec["last"], params["decoder.head.weight"])
    for s in reversed(range(config.n_stages)):
        a, cols, pre = dec["stages"][s]
        dpre = dx * gelu_grad(pre)
        dup, grads[f"decoder.stages.{s}.weight"], grads[f"decoder.stages.{s}.bias"] = conv3x3_bwd(
            dpre, cols, params[f"decoder.stages.{s}.weight"])
        dx = upsample_bwd(dup, a)
    dfmap, grads["decoder.proj.weight"], grads["decoder.proj.bias"] = conv1x1_bwd(
        dx, dec["fmap"], params["decoder.proj.weight"])
    dtokens = dfmap.transpose(0, 2, 3, 1).reshape(bsz, config.num_patches, config.embed_dim)

    dz, grads["norm.weight"], grads["norm.bias"] = layer_norm_bwd(dtokens, enc["norm"])
    for layer in reversed(range(config.depth)):
        dz = encoder_layer_bwd(dz, enc["layers"][layer], params, f"blocks.{layer}.", grads)
    grads["embed.pos"] = dz.sum(axis=0)
    patches = enc["patches"]
    grads["embed.proj"] = dz.reshape(-1, config.embed_dim).T @ patches.reshape(-1, patches.shape[-1])
    return {name: grads[name] for name in params}
