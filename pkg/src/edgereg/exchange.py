"""Attention-based feature exchange between edge-pixel and edge-point features.

Each block applies, with residual connections: self-attention within each
modality, cross-attention in both directions, then a two-layer feed-forward.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError

MODALITIES = ("2d", "3d")


def _attn_params(rng, prefix: str, D: int) -> dict[str, Tensor]:
    params = {}
    for name in ("q", "k", "v"):
        params[f"{prefix}.{name}"] = Tensor(ad.init_uniform(rng, D, D), requires_grad=True, name=f"{prefix}.{name}")
    params.update(ad.linear_params(rng, f"{prefix}.o", D, D))
    return params


def init_exchange_params(rng: np.random.Generator, feature_dim: int, blocks: int) -> dict[str, Tensor]:
    D = feature_dim
    params: dict[str, Tensor] = {}
    for b in range(blocks):
        for m in MODALITIES:
            params.update(_attn_params(rng, f"xch.{b}.{m}.self", D))
            params.update(_attn_params(rng, f"xch.{b}.{m}.cross", D))
            params.update(ad.mlp_params(rng, f"xch.{b}.{m}.ffn", [D, 2 * D, D]))
    return params


def attention(queries_from: Tensor, keys_values_from: Tensor, params, prefix: str, heads: int = 4) -> Tensor:
    """Multi-head scaled dot-product attention followed by the output projection."""
    xq = ad.as_tensor(queries_from)
    xkv = ad.as_tensor(keys_values_from)
    nq, D = xq.shape
    nk = xkv.shape[0]
    if nq < 1 or nk < 1:
        raise ContractError("attention needs at least one query and one key")
    if D % heads:
        raise ContractError(f"feature width {D} is not divisible by {heads} heads")
    dk = D // heads

    def split(x: Tensor, n: int) -> Tensor:
        return ad.transpose(ad.reshape(x, (n, heads, dk)), (1, 0, 2))  # (h, n, dk)

    q = split(ad.matmul(xq, params[f"{prefix}.q"]), nq)
    k = split(ad.matmul(xkv, params[f"{prefix}.k"]), nk)
    v = split(ad.matmul(xkv, params[f"{prefix}.v"]), nk)
    scores = ad.mul(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(dk))
    out = ad.matmul(ad.softmax(scores, axis=-1), v)                      # (h, nq, dk)
    merged = ad.reshape(ad.transpose(out, (1, 0, 2)), (nq, D))
    return ad.linear(merged, params, f"{prefix}.o")


def _norm(x: Tensor, layer_norm: bool) -> Tensor:
    return ad.layer_norm(x) if layer_norm else x


def exchange_block(f2d: Tensor, f3d: Tensor, params, block: int, heads: int = 4,
                   layer_norm: bool = False) -> tuple[Tensor, Tensor]:
    p = f"xch.{block}"
    f2d = ad.add(f2d, attention(_norm(f2d, layer_norm), _norm(f2d, layer_norm), params, f"{p}.2d.self", heads))
    f3d = ad.add(f3d, attention(_norm(f3d, layer_norm), _norm(f3d, layer_norm), params, f"{p}.3d.self", heads))
    n2, n3 = _norm(f2d, layer_norm), _norm(f3d, layer_norm)
    c2 = attention(n2, n3, params, f"{p}.2d.cross", heads)
    c3 = attention(n3, n2, params, f"{p}.3d.cross", heads)
    f2d, f3d = ad.add(f2d, c2), ad.add(f3d, c3)
    f2d = ad.add(f2d, ad.mlp(_norm(f2d, layer_norm), params, f"{p}.2d.ffn", 2))
    f3d = ad.add(f3d, ad.mlp(_norm(f3d, layer_norm), params, f"{p}.3d.ffn", 2))
    return f2d, f3d


def run_exchange_stack(f2d: Tensor, f3d: Tensor, params, blocks: int, heads: int = 4,
                       layer_norm: bool = False) -> tuple[Tensor, Tensor]:
    if blocks < 1:
        raise ContractError("the exchange stack needs at least one block")
    for b in range(blocks):
        f2d, f3d = exchange_block(f2d, f3d, params, b, heads, layer_norm)
    return f2d, f3d
