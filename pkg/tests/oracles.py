"""Slow, independent reference implementations used as test oracles.

Nothing here imports the package: the model is written as plain loops over
pixels, tokens and channels, so agreement with the vectorized paths means
something.
"""
import math

import numpy as np


# ---------------------------------------------------------------- ViT forward


def _matvec(w, x):
    return [sum(w[i][j] * x[j] for j in range(len(x))) for i in range(len(w))]


def _layer_norm(x, g, b, eps=1e-6):
    n = len(x)
    mu = sum(x) / n
    var = sum((v - mu) ** 2 for v in x) / n
    return [(x[i] - mu) / math.sqrt(var + eps) * g[i] + b[i] for i in range(n)]


def _gelu(x):
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def _bilinear_up2(chan):
    """2x upsample of one channel, half-pixel centres, coordinates clamped at 0 and n-1."""
    n = len(chan)
    out = [[0.0] * (2 * n) for _ in range(2 * n)]

    def src(i):
        s = max((i + 0.5) / 2.0 - 0.5, 0.0)
        i0 = min(int(math.floor(s)), n - 1)
        i1 = min(i0 + 1, n - 1)
        return i0, i1, s - i0

    for r in range(2 * n):
        r0, r1, wr = src(r)
        for c in range(2 * n):
            c0, c1, wc = src(c)
            out[r][c] = ((1 - wr) * ((1 - wc) * chan[r0][c0] + wc * chan[r0][c1])
                         + wr * ((1 - wc) * chan[r1][c0] + wc * chan[r1][c1]))
    return out


def _conv3x3(x, w, b):
    cin = len(x)
    n = len(x[0])
    cout = len(w)
    out = []
    for o in range(cout):
        plane = [[b[o]] * n for _ in range(n)]
        for r in range(n):
            for c in range(n):
                acc = 0.0
                for ci in range(cin):
                    for dr in range(3):
                        for dc in range(3):
                            rr, cc = r + dr - 1, c + dc - 1
                            if 0 <= rr < n and 0 <= cc < n:
                                acc += w[o][ci][dr][dc] * x[ci][rr][cc]
                plane[r][c] += acc
        out.append(plane)
    return out


def naive_forward(image, params, cfg):
    """Straight-line forward of one (H, W) image; returns an (H, W) list of probabilities."""
    p = {k: np.asarray(v).tolist() for k, v in params.items()}
    P = cfg.patch_size
    g = cfg.image_size // P
    D = cfg.embed_dim
    H = cfg.heads
    dh = D // H
    img = np.asarray(image).tolist()

    tokens = []
    for pr in range(g):
        for pc in range(g):
            vec = [img[pr * P + i][pc * P + j] for i in range(P) for j in range(P)]
            e = _matvec(p["embed.proj"], vec)
            pos = p["embed.pos"][pr * g + pc]
            tokens.append([e[k] + pos[k] for k in range(D)])

    for layer in range(cfg.depth):
        pre = f"blocks.{layer}."
        normed = [_layer_norm(t, p[pre + "ln1.weight"], p[pre + "ln1.bias"]) for t in tokens]
        qkv = [[a + b for a, b in zip(_matvec(p[pre + "attn.qkv.weight"], t), p[pre + "attn.qkv.bias"])]
               for t in normed]
        heads_out = [[0.0] * D for _ in tokens]
        for h in range(H):
            q = [row[h * dh:(h + 1) * dh] for row in qkv]
            k = [row[D + h * dh:D + (h + 1) * dh] for row in qkv]
            v = [row[2 * D + h * dh:2 * D + (h + 1) * dh] for row in qkv]
            for i in range(len(tokens)):
                scores = [sum(q[i][t] * k[j][t] for t in range(dh)) / math.sqrt(dh) for j in range(len(tokens))]
                m = max(scores)
                ex = [math.exp(s - m) for s in scores]
                tot = sum(ex)
                att = [e / tot for e in ex]
                for t in range(dh):
                    heads_out[i][h * dh + t] = sum(att[j] * v[j][t] for j in range(len(tokens)))
        mid = []
        for i, t in enumerate(tokens):
            proj = _matvec(p[pre + "attn.out.weight"], heads_out[i])
            mid.append([t[d] + proj[d] + p[pre + "attn.out.bias"][d] for d in range(D)])
        tokens = []
        for t in mid:
            n2 = _layer_norm(t, p[pre + "ln2.weight"], p[pre + "ln2.bias"])
            hid = [_gelu(a + b) for a, b in zip(_matvec(p[pre + "mlp.fc1.weight"], n2), p[pre + "mlp.fc1.bias"])]
            f = [a + b for a, b in zip(_matvec(p[pre + "mlp.fc2.weight"], hid), p[pre + "mlp.fc2.bias"])]
            tokens.append([t[d] + f[d] for d in range(D)])

    tokens = [_layer_norm(t, p["norm.weight"], p["norm.bias"]) for t in tokens]
    # channel-first feature map, token i -> (i // g, i % g)
    ch0 = len(p["decoder.proj.weight"])
    x = [[[0.0] * g for _ in range(g)] for _ in range(ch0)]
    for i, t in enumerate(tokens):
        y = _matvec(p["decoder.proj.weight"], t)
        for o in range(ch0):
            x[o][i // g][i % g] = y[o] + p["decoder.proj.bias"][o]
    for s in range(cfg.n_stages):
        up = [_bilinear_up2(chan) for chan in x]
        conv = _conv3x3(up, p[f"decoder.stages.{s}.weight"], p[f"decoder.stages.{s}.bias"])
        x = [[[_gelu(v) for v in row] for row in plane] for plane in conv]
    n = len(x[0])
    out = [[0.0] * n for _ in range(n)]
    for r in range(n):
        for c in range(n):
            z = p["decoder.head.bias"][0] + sum(p["decoder.head.weight"][0][ci] * x[ci][r][c] for ci in range(len(x)))
            out[r][c] = 1.0 / (1.0 + math.exp(-z))
    return out


def naive_embed(patches, proj, pos):
    n, k = len(patches), len(patches[0])
    d = len(proj)
    out = [[0.0] * d for _ in range(n)]
    for i in range(n):
        for r in range(d):
            acc = 0.0
            for j in range(k):
                acc += proj[r][j] * patches[i][j]
            out[i][r] = acc + pos[i][r]
    return out


# -------------------------------------------------------------------- metrics


def loop_confusion(pred, gt, threshold):
    tp = fp = tn = fn = 0
    for p, g in zip(np.ravel(pred).tolist(), np.ravel(gt).tolist()):
        hit = p >= threshold
        if hit and g:
            tp += 1
        elif hit:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return tp, fp, tn, fn


def pairwise_auc(pred, gt):
    """P(score_pos > score_neg) + 0.5 P(tie), by enumerating every pair."""
    s = np.ravel(pred)
    y = np.ravel(gt).astype(bool)
    pos = s[y]
    neg = s[~y]
    gt_count = 0.0
    for v in pos:
        gt_count += np.count_nonzero(v > neg) + 0.5 * np.count_nonzero(v == neg)
    return gt_count / (len(pos) * len(neg))


def loop_ce(pred, gt, eps):
    total = 0.0
    flat_p = np.ravel(pred).tolist()
    flat_g = np.ravel(gt).tolist()
    for p, g in zip(flat_p, flat_g):
        p = min(max(p, eps), 1.0 - eps)
        total += -(g * math.log(p) + (1 - g) * math.log(1 - p))
    return total / len(flat_p)


# ------------------------------------------------------------- image helpers


def global_equalization(image):
    """Direct CDF mapping on 256 levels: out = #(pixels <= level) / n."""
    levels = np.clip(np.rint(np.asarray(image) * 255), 0, 255).astype(int)
    flat = np.sort(levels.ravel())
    return np.searchsorted(flat, levels, side="right") / levels.size


def exhaustive_sq_distance(mask, target_class):
    """Squared distance to the nearest ``target_class`` pixel by checking every pair."""
    mask = np.asarray(mask)
    sites = np.argwhere(mask == target_class)
    pix = np.argwhere(np.ones(mask.shape, dtype=bool))
    out = np.empty(len(pix), dtype=np.int64)
    for start in range(0, len(pix), 512):
        block = pix[start:start + 512]
        d = block[:, None, :] - sites[None, :, :]
        out[start:start + 512] = (d * d).sum(axis=2).min(axis=1)
    return out.reshape(mask.shape)
