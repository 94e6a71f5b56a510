"""Attention, copy gate and mixture kernels shared by the recurrent generators."""
from __future__ import annotations

import torch
from torch import nn


def masked_softmax(scores: torch.Tensor, mask: torch.Tensor | None = None, dim: int = -1) -> torch.Tensor:
    if mask is not None:
        scores = scores.masked_fill(~mask, float("-inf"))
    return torch.softmax(scores, dim=dim)


def attend(h: torch.Tensor, s: torch.Tensor, align, mask: torch.Tensor | None = None) -> torch.Tensor:
    """a_t = softmax(align(h, s_t)) over encoder timesteps.

    h: [B, T, D_enc], s: [B, D_dec]; ``align`` returns scores [B, T].
    """
    return masked_softmax(align(h, s), mask)


class BilinearAlign(nn.Module):
    """score_i = s^T W h_i (``general`` form); ``dot`` skips W."""

    def __init__(self, enc_dim: int, dec_dim: int, method: str = "general"):
        super().__init__()
        self.method = method
        if method == "general":
            self.W = nn.Linear(enc_dim, dec_dim, bias=False)
        elif method == "dot":
            if enc_dim != dec_dim:
                raise ValueError("dot alignment needs equal encoder/decoder widths")
        else:
            raise ValueError(f"unknown alignment {method!r}")

    def forward(self, h, s):
        keys = self.W(h) if self.method == "general" else h
        return torch.einsum("btd,bd->bt", keys, s)


def cvae_align(h: torch.Tensor, s_tilde: torch.Tensor, W_e: torch.Tensor, w: torch.Tensor,
               activation: str = "linear") -> torch.Tensor:
    """score_i = w . f(W_e h_i + s~_t), f = identity ("linear") or tanh.

    With f = identity the s~_t term adds the same constant to every score, so
    after the softmax the weights no longer depend on the decoder state.
    h: [B, T, D_enc], s_tilde: [B, D_dec], W_e: [D_dec, D_enc], w: [D_dec].
    """
    proj = torch.einsum("btd,kd->btk", h, W_e) + s_tilde[:, None, :]
    if activation == "tanh":
        proj = torch.tanh(proj)
    elif activation != "linear":
        raise ValueError(f"unknown CVAE attention activation {activation!r}")
    return proj @ w


class CVAEAlign(nn.Module):
    def __init__(self, enc_dim: int, dec_dim: int, activation: str = "tanh"):
        super().__init__()
        self.activation = activation
        self.W_e = nn.Parameter(torch.empty(dec_dim, enc_dim))
        self.w = nn.Parameter(torch.empty(dec_dim))
        nn.init.xavier_uniform_(self.W_e)
        nn.init.normal_(self.w, std=dec_dim ** -0.5)

    def forward(self, h, s):
        return cvae_align(h, s, self.W_e, self.w, self.activation)


def copy_gate(ctx, s, x, w_h, w_s, w_x, b):
    """p_gen = sigmoid(w_h . h*_t + w_s . s_t + w_x . x_t + b_ptr), batched over rows."""
    return torch.sigmoid(ctx @ w_h + s @ w_s + x @ w_x + b)


class CopyGate(nn.Module):
    def __init__(self, ctx_dim: int, state_dim: int, input_dim: int):
        super().__init__()
        self.w_h = nn.Parameter(torch.zeros(ctx_dim))
        self.w_s = nn.Parameter(torch.zeros(state_dim))
        self.w_x = nn.Parameter(torch.zeros(input_dim))
        self.b_ptr = nn.Parameter(torch.zeros(()))
        for p in (self.w_h, self.w_s, self.w_x):
            nn.init.normal_(p, std=0.02)

    def forward(self, ctx, s, x):
        return copy_gate(ctx, s, x, self.w_h, self.w_s, self.w_x, self.b_ptr)


def mixture_distribution(p_vocab: torch.Tensor, attn: torch.Tensor, p_gen: torch.Tensor,
                         src_ext_ids: torch.Tensor, copy_mask: torch.Tensor, ext_size: int) -> torch.Tensor:
    """P(w) = p_gen * P_vocab(w) + (1 - p_gen) * sum of attention on source positions holding w.

    Copy mass only goes to copyable positions (placeholders); attention on the
    other positions is renormalized away. Rows with nothing to copy fall back
    to pure generation.

    p_vocab [B, V], attn [B, T], p_gen [B] or [B, 1], src_ext_ids [B, T] (ids
    in the extended vocabulary), copy_mask [B, T] bool.
    """
    B, V = p_vocab.shape
    p_gen = p_gen.reshape(B, 1)
    copy_attn = attn * copy_mask.to(attn.dtype)
    z = copy_attn.sum(-1, keepdim=True)
    has_copy = z > 0
    copy_attn = copy_attn / torch.where(has_copy, z, torch.ones_like(z))
    gate = torch.where(has_copy, p_gen, torch.ones_like(p_gen))
    out = p_vocab.new_zeros(B, ext_size)
    out[:, :V] = gate * p_vocab
    ids = torch.where(copy_mask, src_ext_ids, torch.zeros_like(src_ext_ids))
    return out.scatter_add(1, ids, (1 - gate) * copy_attn)


def mix_tokens(vocab_tokens, p_vocab, attn, p_gen: float, input_tokens):
    """Token-level view of :func:`mixture_distribution` for single decoding steps.

    ``input_tokens[i]`` is the token at source position i, or None when the
    position cannot be copied. Returns ``{token: probability}`` over the
    extended vocabulary (vocab plus copyable input tokens).
    """
    vocab_tokens = list(vocab_tokens)
    ext = list(vocab_tokens)
    index = {t: i for i, t in enumerate(ext)}
    ids, mask = [], []
    for tok in input_tokens:
        if tok is None:
            ids.append(0)
            mask.append(False)
            continue
        if tok not in index:
            index[tok] = len(ext)
            ext.append(tok)
        ids.append(index[tok])
        mask.append(True)
    p = mixture_distribution(
        torch.as_tensor(p_vocab, dtype=torch.float64)[None],
        torch.as_tensor(attn, dtype=torch.float64)[None],
        torch.tensor([float(p_gen)], dtype=torch.float64),
        torch.tensor([ids]), torch.tensor([mask]), len(ext))[0]
    return {t: float(p[i]) for i, t in enumerate(ext)}


def gaussian_kl(mu_q, logvar_q, mu_p=None, logvar_p=None) -> torch.Tensor:
    """KL(N(mu_q, var_q) || N(mu_p, var_p)) summed over the last dim."""
    if mu_p is None:
        mu_p = torch.zeros_like(mu_q)
    if logvar_p is None:
        logvar_p = torch.zeros_like(logvar_q)
    kl = 0.5 * (logvar_p - logvar_q + (logvar_q.exp() + (mu_q - mu_p) ** 2) / logvar_p.exp() - 1.0)
    return kl.sum(-1)


def copy_nll(p_ext: torch.Tensor, target: torch.Tensor, eps: float = 1e-30) -> torch.Tensor:
    """-log P(target) per row from a mixture distribution."""
    return -torch.log(p_ext.gather(1, target[:, None]).squeeze(1).clamp_min(eps))


def kl_weight(step: int, total_steps: int, warmup_fraction: float = 0.2) -> float:
    """Linear KL annealing from 0 to 1 over the first ``warmup_fraction`` of training."""
    warm = max(1, int(total_steps * warmup_fraction))
    return min(1.0, step / warm)


__all__ = [
    "attend", "BilinearAlign", "cvae_align", "CVAEAlign", "copy_gate", "CopyGate",
    "mixture_distribution", "mix_tokens", "gaussian_kl", "copy_nll", "kl_weight", "masked_softmax",
]
