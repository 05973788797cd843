"""Brute-force reference implementations used to check the production path.

Everything here is plain numpy in float64 with explicit loops. Nothing is
imported from the model, patching or loss code; weights are read from a
``{name: array}`` dict.
"""
from __future__ import annotations

import math
from typing import Callable, Optional

import numpy as np
import torch


def naive_attention(Q, K, V, mask=None, scale: Optional[float] = None) -> np.ndarray:
    """Single-head scaled dot-product attention, one query and one key at a time.

    ``mask[q][k]`` true means visible; ``None`` means all visible.
    """
    Q, K, V = (np.asarray(a, dtype=np.float64) for a in (Q, K, V))
    Nq, d = Q.shape
    Nk = K.shape[0]
    scale = 1.0 / math.sqrt(d) if scale is None else scale
    out = np.zeros((Nq, V.shape[1]))
    for q in range(Nq):
        scores = []
        for k in range(Nk):
            if mask is not None and not mask[q][k]:
                continue
            s = 0.0
            for i in range(d):
                s += Q[q, i] * K[k, i]
            scores.append((k, s * scale))
        m = max(s for _, s in scores)
        z = sum(math.exp(s - m) for _, s in scores)
        for k, s in scores:
            w = math.exp(s - m) / z
            for j in range(V.shape[1]):
                out[q, j] += w * V[k, j]
    return out


def naive_linear(x, W, b) -> np.ndarray:
    """``x`` is ``[n, in]``; ``W`` is ``[out, in]`` (torch layout)."""
    x = np.asarray(x, dtype=np.float64)
    n, d_in = x.shape
    d_out = W.shape[0]
    y = np.zeros((n, d_out))
    for r in range(n):
        for o in range(d_out):
            acc = b[o]
            for i in range(d_in):
                acc += W[o, i] * x[r, i]
            y[r, o] = acc
    return y


def naive_layernorm(x, gamma, beta, eps=1e-5) -> np.ndarray:
    out = np.zeros_like(x, dtype=np.float64)
    for r in range(x.shape[0]):
        mu = sum(x[r]) / x.shape[1]
        var = sum((v - mu) ** 2 for v in x[r]) / x.shape[1]
        for i in range(x.shape[1]):
            out[r, i] = (x[r, i] - mu) / math.sqrt(var + eps) * gamma[i] + beta[i]
    return out


def naive_gelu(x) -> np.ndarray:
    f = np.vectorize(lambda v: 0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0))))
    return f(np.asarray(x, dtype=np.float64))


def naive_multihead(xq, xkv, w: dict, prefix: str, heads: int, mask=None) -> np.ndarray:
    """Multi-head attention from weights ``{prefix}{q,k,v,o}.{weight,bias}``."""
    q = naive_linear(xq, w[prefix + "q.weight"], w[prefix + "q.bias"])
    k = naive_linear(xkv, w[prefix + "k.weight"], w[prefix + "k.bias"])
    v = naive_linear(xkv, w[prefix + "v.weight"], w[prefix + "v.bias"])
    D = q.shape[1]
    dh = D // heads
    concat = np.zeros((xq.shape[0], D))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        concat[:, sl] = naive_attention(q[:, sl], k[:, sl], v[:, sl], mask)
    return naive_linear(concat, w[prefix + "o.weight"], w[prefix + "o.bias"])


def _ff(x, w, prefix):
    h = naive_gelu(naive_linear(x, w[prefix + "fc1.weight"], w[prefix + "fc1.bias"]))
    return naive_linear(h, w[prefix + "fc2.weight"], w[prefix + "fc2.bias"])


def _ln(x, w, prefix):
    return naive_layernorm(x, w[prefix + "weight"], w[prefix + "bias"])


def naive_encoder_layer(x, w, prefix, heads, mask=None, norm_first=False) -> np.ndarray:
    if norm_first:
        h = _ln(x, w, prefix + "norm1.")
        x = x + naive_multihead(h, h, w, prefix + "attn.", heads, mask)
        return x + _ff(_ln(x, w, prefix + "norm2."), w, prefix + "ff.")
    x = _ln(x + naive_multihead(x, x, w, prefix + "attn.", heads, mask), w, prefix + "norm1.")
    return _ln(x + _ff(x, w, prefix + "ff."), w, prefix + "norm2.")


def naive_decoder_layer(x, memory, w, prefix, heads, mask=None, norm_first=False) -> np.ndarray:
    if norm_first:
        h = _ln(x, w, prefix + "norm1.")
        x = x + naive_multihead(h, h, w, prefix + "self_attn.", heads, mask)
        x = x + naive_multihead(_ln(x, w, prefix + "norm2."), memory, w, prefix + "cross_attn.", heads, mask)
        return x + _ff(_ln(x, w, prefix + "norm3."), w, prefix + "ff.")
    x = _ln(x + naive_multihead(x, x, w, prefix + "self_attn.", heads, mask), w, prefix + "norm1.")
    x = _ln(x + naive_multihead(x, memory, w, prefix + "cross_attn.", heads, mask), w, prefix + "norm2.")
    return _ln(x + _ff(x, w, prefix + "ff."), w, prefix + "norm3.")


def naive_positions(N: int, D: int) -> np.ndarray:
    table = np.zeros((N, D))
    for pos in range(N):
        for i in range(D // 2):
            angle = pos / 10000 ** (2 * i / D)
            table[pos, 2 * i] = math.sin(angle)
            table[pos, 2 * i + 1] = math.cos(angle)
    return table


def _count_layers(w: dict, stack: str) -> int:
    idx = {int(k.split(".")[1]) for k in w if k.startswith(stack + ".")}
    return len(idx)


def naive_reconstruction(
    w: dict,
    window,
    patch_len: int,
    heads: int,
    encoder_mask=None,
    decoder_mask=None,
    gamma=None,
    steps=None,
    eps=None,
    use_decoder: bool = True,
    norm_first: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Full pre-training forward for one univariate window; returns (prediction, clean) ``[N, P]``."""
    w = {k: np.asarray(v, dtype=np.float64) for k, v in w.items()}
    L = len(window)
    N = L // patch_len
    clean = np.zeros((N, patch_len))
    for j in range(N):
        for k in range(patch_len):
            clean[j, k] = window[j * patch_len + k]
    D = w["sos"].shape[0]
    pe = naive_positions(N, D)
    z = naive_linear(clean, w["embedding.weight"], w["embedding.bias"])
    z_in = np.zeros((N, D))
    for j in range(N):
        prev = w["sos"] if j == 0 else z[j - 1]
        z_in[j] = prev + pe[j]
    h = z_in
    for i in range(_count_layers(w, "encoder")):
        h = naive_encoder_layer(h, w, f"encoder.{i}.", heads, encoder_mask, norm_first)
    if not use_decoder:
        return naive_linear(h, w["projector.weight"], w["projector.bias"]), clean
    noisy = np.zeros((N, patch_len))
    for j in range(N):
        g = gamma[int(steps[j])]
        for k in range(patch_len):
            noisy[j, k] = math.sqrt(g) * clean[j, k] + math.sqrt(1 - g) * eps[j][k]
    zn = naive_linear(noisy, w["embedding.weight"], w["embedding.bias"]) + pe
    for i in range(_count_layers(w, "decoder")):
        zn = naive_decoder_layer(zn, h, w, f"decoder.{i}.", heads, decoder_mask, norm_first)
    return naive_linear(zn, w["projector.weight"], w["projector.bias"]), clean


def naive_squared_error(pred, clean) -> float:
    """Mean over patches and elements of the squared residual, by explicit double loop."""
    total, count = 0.0, 0
    for j in range(len(pred)):
        for k in range(len(pred[j])):
            total += (float(clean[j][k]) - float(pred[j][k])) ** 2
            count += 1
    return total / count


def finite_diff_gradient(
    params: dict[str, torch.Tensor],
    loss_fn: Callable[[], torch.Tensor],
    h: float = 1e-3,
) -> dict[str, np.ndarray]:
    """Central differences, one coordinate at a time, perturbing parameters in place."""
    out = {}
    with torch.no_grad():
        for name, p in params.items():
            grad = np.zeros(tuple(p.shape))
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = float(loss_fn())
                flat[i] = orig - h
                down = float(loss_fn())
                flat[i] = orig
                grad.reshape(-1)[i] = (up - down) / (2 * h)
            out[name] = grad
    return out


def monte_carlo_noise_stats(
    window,
    gamma,
    patch_len: int,
    trials: int = 10_000,
    step: Optional[int] = None,
    steps=None,
    seed: int = 0,
) -> dict[str, float]:
    """Average per-trial mean and population variance of a noised sequence.

    Use ``step`` for same-step noising, ``steps`` for an explicit per-patch
    assignment; with neither, each patch draws its own step uniformly.
    """
    if trials < 100:
        raise ValueError(f"need at least 100 trials, got {trials}")
    x = np.asarray(window, dtype=np.float64)
    L = len(x)
    N = L // patch_len
    T = len(gamma) - 1
    rng = np.random.default_rng(seed)
    mean_acc = var_acc = 0.0
    for _ in range(trials):
        if step is not None:
            s = np.full(N, step)
        elif steps is not None:
            s = np.asarray(steps)
        else:
            s = rng.integers(1, T + 1, size=N)
        g = np.repeat(np.asarray(gamma)[s], patch_len)
        noisy = np.sqrt(g) * x + np.sqrt(1 - g) * rng.standard_normal(L)
        m = noisy.mean()
        mean_acc += m
        var_acc += np.mean((noisy - m) ** 2)
    return {"mean": mean_acc / trials, "variance": var_acc / trials}


def yule_walker_acf(coefs, lags: int) -> np.ndarray:
    """Theoretical autocorrelations of a stationary AR(p) by solving the Yule-Walker system."""
    a = np.asarray(coefs, dtype=np.float64)
    p = len(a)
    n = max(lags, p) + 1
    # rho_k - sum_i a_i rho_{|k-i|} = 0 for k >= 1, rho_0 = 1
    A = np.zeros((n, n))
    b = np.zeros(n)
    A[0, 0] = 1.0
    b[0] = 1.0
    for k in range(1, n):
        A[k, k] += 1.0
        for i in range(1, p + 1):
            A[k, abs(k - i)] -= a[i - 1]
    return np.linalg.solve(A, b)[: lags + 1]
