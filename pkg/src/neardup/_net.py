"""Numerical core of the chunk embedding network.

Forward and reverse passes are written directly against numpy in float64
so that analytic gradients can be checked against finite differences.
The public model API in :mod:`neardup.model` wraps these with float32
parameter handling and validation.

Pipeline per chunk (B examples, L positions, H hidden dims):

    bits (B,L,bits) -> input projection -> + scaled sinusoidal positions
    -> num_blocks x [ScaleNorm -> gated attention unit -> residual add]
    -> masked pooling over valid positions -> output projection -> L2 norm

The gated attention unit computes U = swish(Y Wu), V = swish(Y Wv),
Z = Y Wz, per-dim scale-offset queries/keys from Z, rotary position
rotation on both, squared-ReLU attention scores normalized by the
example's valid length, and the gated output (U * (A V)) Wo + bo.
Positions at index >= valid_len are excluded from attention keys and
from pooling, so the output depends only on the real characters.
"""

from functools import lru_cache

import numpy as np
from scipy.special import expit

SCALE_NORM_EPS = 1e-6
GEM_CLAMP = 1e-6


# ---------------------------------------------------------------------------
# fixed tables


@lru_cache(maxsize=8)
def sinusoidal_table(length: int, dim: int) -> np.ndarray:
    """Standard sin/cos absolute position table, shape (length, dim)."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    half = (dim + 1) // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    angles = pos * freqs[None, :]
    table = np.zeros((length, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)[:, : table[:, 0::2].shape[1]]
    table[:, 1::2] = np.cos(angles)[:, : table[:, 1::2].shape[1]]
    table.setflags(write=False)
    return table


@lru_cache(maxsize=8)
def rope_tables(length: int, dim: int) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables for rotary rotation in half-split layout, shape (length, dim)."""
    if dim % 2:
        raise ValueError("rotary rotation needs an even key dimension")
    half = dim // 2
    pos = np.arange(length, dtype=np.float64)[:, None]
    freqs = np.exp(-np.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    angles = pos * freqs[None, :]
    cos = np.concatenate([np.cos(angles), np.cos(angles)], axis=-1)
    sin = np.concatenate([np.sin(angles), np.sin(angles)], axis=-1)
    cos.setflags(write=False)
    sin.setflags(write=False)
    return cos, sin


def _rotate_half(x: np.ndarray) -> np.ndarray:
    half = x.shape[-1] // 2
    return np.concatenate([-x[..., half:], x[..., :half]], axis=-1)


def apply_rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    return x * cos + _rotate_half(x) * sin


def unapply_rope(dx: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    # the rotation is orthogonal, so the gradient is the inverse rotation
    return dx * cos - _rotate_half(dx) * sin


# ---------------------------------------------------------------------------
# activations


def swish(x: np.ndarray) -> np.ndarray:
    return x * expit(x)


def swish_grad(x: np.ndarray) -> np.ndarray:
    s = expit(x)
    return s * (1.0 + x * (1.0 - s))


# ---------------------------------------------------------------------------
# pooling


def pool_forward(x, mask, valid, kind, p):
    """Masked pooling over positions: (B,L,H) -> (B,H) plus backward cache."""
    counts = valid.astype(np.float64)[:, None]
    if kind == "average":
        pooled = (x * mask).sum(axis=1) / counts
        return pooled, {"mask": mask, "counts": counts}
    if kind == "max":
        neg = np.where(mask > 0, x, -np.inf)
        idx = neg.argmax(axis=1)
        pooled = np.take_along_axis(x, idx[:, None, :], axis=1)[:, 0, :]
        return pooled, {"idx": idx, "shape": x.shape}
    if kind == "gem":
        c = np.clip(x, GEM_CLAMP, None)
        powed = (c**p) * mask
        means = powed.sum(axis=1) / counts
        pooled = means ** (1.0 / p)
        return pooled, {"x": x, "c": c, "means": means, "mask": mask, "counts": counts, "p": p}
    raise ValueError(f"unknown pooling kind: {kind}")


def pool_backward(d_pooled, kind, cache):
    if kind == "average":
        return d_pooled[:, None, :] * cache["mask"] / cache["counts"][:, None, :]
    if kind == "max":
        dx = np.zeros(cache["shape"], dtype=np.float64)
        np.put_along_axis(dx, cache["idx"][:, None, :], d_pooled[:, None, :], axis=1)
        return dx
    p = cache["p"]
    # pooled = means**(1/p); d means = d_pooled * (1/p) means**(1/p - 1)
    d_means = d_pooled * (1.0 / p) * cache["means"] ** (1.0 / p - 1.0)
    d_powed = d_means[:, None, :] / cache["counts"][:, None, :] * cache["mask"]
    d_c = d_powed * p * cache["c"] ** (p - 1.0)
    return np.where(cache["x"] > GEM_CLAMP, d_c, 0.0)


# ---------------------------------------------------------------------------
# forward / backward


def forward_batch(tensors, cfg, bits, valid, want_cache=False):
    """Run the network over a batch of encoded chunks.

    ``tensors`` maps names to float arrays (any float dtype; upcast here),
    ``bits`` is (B, L, bits_per_char), ``valid``holds per-example real
    lengths. Returns (embeddings (B, D) float64 unit rows, cache or None).
    """
    t = {k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()}
    B, L, _ = bits.shape
    m = np.asarray(bits, dtype=np.float64)
    valid = np.asarray(valid, dtype=np.int64)

    pos_mask = (np.arange(L)[None, :] < valid[:, None]).astype(np.float64)  # (B,L)
    mask3 = pos_mask[:, :, None]

    x = m @ t["input/kernel"] + t["input/bias"]
    pe = None
    if cfg.abs_pos_encoding == "scaled_sin":
        pe = sinusoidal_table(L, cfg.hidden_dim)
        x = x + t["pos/scale"] * pe

    use_rope = cfg.rel_pos_encoding == "rope"
    cos = sin = None
    if use_rope:
        cos, sin = rope_tables(L, cfg.attn_key_dim)

    scale = 1.0 / np.sqrt(cfg.attn_key_dim)
    inv_valid = 1.0 / valid.astype(np.float64)

    blocks = []
    for i in range(cfg.num_blocks):
        pre = f"block{i}/"
        x_in = x
        norms = np.linalg.norm(x_in, axis=-1, keepdims=True)
        safe = np.maximum(norms, SCALE_NORM_EPS)
        y = t[pre + "norm_gain"] * x_in / safe

        a_u = y @ t[pre + "w_u"]
        a_v = y @ t[pre + "w_v"]
        u = swish(a_u)
        v = swish(a_v)
        z = y @ t[pre + "w_z"]
        q = t[pre + "gamma_q"] * z + t[pre + "beta_q"]
        k = t[pre + "gamma_k"] * z + t[pre + "beta_k"]
        qr = apply_rope(q, cos, sin) if use_rope else q
        kr = apply_rope(k, cos, sin) if use_rope else k

        s = (qr @ kr.transpose(0, 2, 1)) * scale  # (B,L,L)
        rm = np.maximum(s, 0.0) * pos_mask[:, None, :]  # masked keys contribute 0
        attn = (rm * rm) * inv_valid[:, None, None]
        av = attn @ v
        gate = u * av
        out = gate @ t[pre + "w_o"] + t[pre + "b_o"]
        x = x_in + out

        if want_cache:
            blocks.append(
                {
                    "x_in": x_in,
                    "norms": norms,
                    "safe": safe,
                    "y": y,
                    "a_u": a_u,
                    "a_v": a_v,
                    "u": u,
                    "v": v,
                    "z": z,
                    "qr": qr,
                    "kr": kr,
                    "rm": rm,
                    "attn": attn,
                    "av": av,
                    "gate": gate,
                }
            )

    pooled, pool_cache = pool_forward(x, mask3, valid, cfg.pooling, cfg.gem_p)
    raw = pooled @ t["output/kernel"] + t["output/bias"]
    out_norms = np.linalg.norm(raw, axis=-1, keepdims=True)
    if np.any(out_norms < 1e-12):
        raise FloatingPointError("embedding collapsed to zero norm")
    emb = raw / out_norms

    cache = None
    if want_cache:
        cache = {
            "m": m,
            "pe": pe,
            "pos_mask": pos_mask,
            "mask3": mask3,
            "valid": valid,
            "inv_valid": inv_valid,
            "cos": cos,
            "sin": sin,
            "scale": scale,
            "blocks": blocks,
            "x_final": x,
            "pooled": pooled,
            "pool_cache": pool_cache,
            "raw": raw,
            "out_norms": out_norms,
            "emb": emb,
            "tensors": t,
        }
    return emb, cache


def backward_batch(cfg, cache, d_emb):
    """Gradients of sum(d_emb * emb) wrt every named tensor.

    ``d_emb`` is (B, D), the upstream gradient at the normalized output.
    Returns a dict of float64 gradient arrays keyed like the tensors.
    """
    t = cache["tensors"]
    grads = {}

    # L2 normalization: emb = raw / |raw|
    emb, out_norms = cache["emb"], cache["out_norms"]
    d_raw = (d_emb - emb * (d_emb * emb).sum(axis=-1, keepdims=True)) / out_norms

    grads["output/kernel"] = cache["pooled"].T @ d_raw
    grads["output/bias"] = d_raw.sum(axis=0)
    d_pooled = d_raw @ t["output/kernel"].T

    dx = pool_backward(d_pooled, cfg.pooling, cache["pool_cache"])

    use_rope = cfg.rel_pos_encoding == "rope"
    cos, sin, scale = cache["cos"], cache["sin"], cache["scale"]
    inv_valid = cache["inv_valid"]
    pos_mask = cache["pos_mask"]

    for i in reversed(range(cfg.num_blocks)):
        pre = f"block{i}/"
        blk = cache["blocks"][i]

        d_out = dx  # residual: x = x_in + out
        grads[pre + "b_o"] = d_out.sum(axis=(0, 1))
        grads[pre + "w_o"] = np.einsum("ble,blh->eh", blk["gate"], d_out)
        d_gate = d_out @ t[pre + "w_o"].T

        d_u = d_gate * blk["av"]
        d_av = d_gate * blk["u"]

        d_attn = d_av @ blk["v"].transpose(0, 2, 1)
        d_v = blk["attn"].transpose(0, 2, 1) @ d_av

        # attn = rm^2 / valid with rm = relu(s) * key_mask
        d_s = d_attn * 2.0 * blk["rm"] * inv_valid[:, None, None]

        d_qr = (d_s @ blk["kr"]) * scale
        d_kr = (d_s.transpose(0, 2, 1) @ blk["qr"]) * scale
        d_q = unapply_rope(d_qr, cos, sin) if use_rope else d_qr
        d_k = unapply_rope(d_kr, cos, sin) if use_rope else d_kr

        z = blk["z"]
        grads[pre + "gamma_q"] = (d_q * z).sum(axis=(0, 1))
        grads[pre + "beta_q"] = d_q.sum(axis=(0, 1))
        grads[pre + "gamma_k"] = (d_k * z).sum(axis=(0, 1))
        grads[pre + "beta_k"] = d_k.sum(axis=(0, 1))
        d_z = d_q * t[pre + "gamma_q"] + d_k * t[pre + "gamma_k"]

        d_au = d_u * swish_grad(blk["a_u"])
        d_av_pre = d_v * swish_grad(blk["a_v"])

        y = blk["y"]
        grads[pre + "w_u"] = np.einsum("blh,ble->he", y, d_au)
        grads[pre + "w_v"] = np.einsum("blh,ble->he", y, d_av_pre)
        grads[pre + "w_z"] = np.einsum("blh,blk->hk", y, d_z)
        d_y = d_au @ t[pre + "w_u"].T + d_av_pre @ t[pre + "w_v"].T + d_z @ t[pre + "w_z"].T

        # ScaleNorm: y = g * x / max(|x|, eps)
        x_in, norms, safe = blk["x_in"], blk["norms"], blk["safe"]
        g = t[pre + "norm_gain"]
        grads[pre + "norm_gain"] = np.sum(d_y * x_in / safe)
        d_x_norm = g * d_y / safe
        live = (norms > SCALE_NORM_EPS).astype(np.float64)
        proj = (d_y * x_in).sum(axis=-1, keepdims=True)
        d_x_norm = d_x_norm - live * g * x_in * proj / (safe**3)

        dx = d_out + d_x_norm  # residual branch + normalized branch

    if cfg.abs_pos_encoding == "scaled_sin":
        grads["pos/scale"] = np.array(np.sum(dx * cache["pe"][None, :, :]))
    grads["input/kernel"] = np.einsum("blc,blh->ch", cache["m"], dx)
    grads["input/bias"] = dx.sum(axis=(0, 1))
    return grads
