"""Channel-attention encoder with a diagonal mask and frozen key/value stream.

The encoder turns a (channels x bands) feature matrix into one d_model
vector per channel.  Three properties define it:

- the query stream starts from electrode-position encodings only, so during
  masked training a channel's output row provably never depends on that
  channel's own input features;
- keys and values are computed once from position + source encodings and
  reused unchanged by every layer, so attention maps stay interpretable;
- the diagonal of the attention matrix is removed during training (each
  channel is reconstructed from the other channels) and restored at test
  time.

A projection head maps the encoder output into the contrastive space and a
small MLP head classifies it; both live in the same parameter record.
Parameters are immutable during evaluation, so concurrent read-only
inference is safe; training has a single writer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterSet, Tensor
from .config import ModelConfig

LN_EPS = 1e-5
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
POS_TABLE_STD = 0.1


class ModelError(ValueError):
    pass


@dataclass
class EncoderOutput:
    q_final: Tensor                      # (B, n_channels, d_model)
    attention: list | None = None        # per layer: (B, heads, n, n)
    kv_per_layer: list | None = None     # per layer: (k array, v array) as consumed


class DtaParameters:
    """All learnable weights plus batch-norm running state and the config."""

    def __init__(self, config: ModelConfig, params: ParameterSet, bn_state: dict):
        self.config = config
        self.params = params
        self.bn_state = bn_state

    def encoder_names(self):
        return [n for n in self.params.names()
                if n.split(".")[0] in ("pos_embed", "src_embed", "kv")
                or n == "pos_table" or n.startswith("enc")]

    def projector_names(self):
        return [n for n in self.params.names() if n.startswith("proj.")]

    def classifier_names(self):
        return [n for n in self.params.names() if n.startswith("clf.")]

    def copy(self) -> "DtaParameters":
        return DtaParameters(self.config, self.params.copy(),
                             {k: v.copy() for k, v in self.bn_state.items()})

    def astype(self, dtype) -> "DtaParameters":
        return DtaParameters(self.config, self.params.astype(dtype),
                             {k: v.astype(dtype) for k, v in self.bn_state.items()})

    @property
    def dtype(self):
        return self.params["pos_table"].data.dtype


def _glorot(rng, fan_in, fan_out, scale):
    limit = scale * math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_parameters(config: ModelConfig, seed=0, dtype=np.float64) -> DtaParameters:
    """Fresh parameters; the final classifier layer starts at zero so a
    freshly attached head predicts uniformly."""
    rng = np.random.default_rng(seed)
    d = config.d_model
    s = config.init_scale
    ps = ParameterSet()

    def aff(name, fan_in, fan_out, bias=True):
        ps.add(f"{name}.w", _glorot(rng, fan_in, fan_out, s))
        if bias:
            ps.add(f"{name}.b", np.zeros(fan_out))

    aff("pos_embed.f1", 3, d)
    aff("pos_embed.f2", d, d)
    aff("src_embed.f1", config.n_bands, d)
    aff("src_embed.f2", d, d)
    ps.add("pos_table", rng.normal(0.0, POS_TABLE_STD * s, size=(config.n_channels, d)))
    # a key-projection bias shifts every logit in a row equally, which the
    # softmax cancels; leave the unidentifiable parameter out
    aff("kv.k", d, d, bias=False)
    aff("kv.v", d, d)
    for i in range(config.n_layers):
        aff(f"enc{i}.q", d, d)
        aff(f"enc{i}.out", d, d)
        ps.add(f"enc{i}.ln1.g", np.ones(d))
        ps.add(f"enc{i}.ln1.b", np.zeros(d))
        ps.add(f"enc{i}.ln2.g", np.ones(d))
        ps.add(f"enc{i}.ln2.b", np.zeros(d))
        aff(f"enc{i}.ffn.f1", d, config.ffn_hidden)
        aff(f"enc{i}.ffn.f2", config.ffn_hidden, d)

    flat = config.n_channels * d
    p1, p2, p3 = config.proj_dims
    # pre-batch-norm affines are bias-free; the BN shift parameter owns it
    aff("proj.fc1", flat, p1, bias=False)
    ps.add("proj.bn1.g", np.ones(p1))
    ps.add("proj.bn1.b", np.zeros(p1))
    aff("proj.fc2", p1, p2, bias=False)
    ps.add("proj.bn2.g", np.ones(p2))
    ps.add("proj.bn2.b", np.zeros(p2))
    aff("proj.fc3", p2, p3)

    h1, h2 = config.clf_hidden
    aff("clf.fc1", flat, h1)
    aff("clf.fc2", h1, h2)
    ps.add("clf.fc3.w", np.zeros((h2, config.n_classes)))
    ps.add("clf.fc3.b", np.zeros(config.n_classes))

    bn_state = {
        "proj.bn1.mean": np.zeros(p1), "proj.bn1.var": np.ones(p1),
        "proj.bn2.mean": np.zeros(p2), "proj.bn2.var": np.ones(p2),
    }
    dta = DtaParameters(config, ps, bn_state)
    return dta.astype(dtype) if dtype != np.float64 else dta


def reinit_classifier(dta: DtaParameters, seed) -> None:
    """Fresh classifier head in place (hidden layers random, output zero)."""
    rng = np.random.default_rng(seed)
    cfg = dta.config
    flat = cfg.n_channels * cfg.d_model
    h1, h2 = cfg.clf_hidden
    dt = dta.dtype
    dta.params["clf.fc1.w"].data = _glorot(rng, flat, h1, cfg.init_scale).astype(dt)
    dta.params["clf.fc1.b"].data = np.zeros(h1, dtype=dt)
    dta.params["clf.fc2.w"].data = _glorot(rng, h1, h2, cfg.init_scale).astype(dt)
    dta.params["clf.fc2.b"].data = np.zeros(h2, dtype=dt)
    dta.params["clf.fc3.w"].data = np.zeros((h2, cfg.n_classes), dtype=dt)
    dta.params["clf.fc3.b"].data = np.zeros(cfg.n_classes, dtype=dt)


# -- building blocks ---------------------------------------------------------

def _dense(x, w):
    """x @ w for a 2-D weight, collapsing leading axes into one GEMM."""
    if x.ndim == 2:
        return ad.matmul(x, w)
    *lead, d = x.shape
    flat = ad.reshape(x, (-1, d))
    return ad.reshape(ad.matmul(flat, w), (*lead, int(w.shape[-1])))


def _affine(x, params, name):
    return _dense(x, params[f"{name}.w"]) + params[f"{name}.b"]


def _mlp_embed(x, params, name):
    """f2(ELU(f1(x))): the row-wise two-layer embedding used for positions
    and source features."""
    return _affine(ad.elu(_affine(x, params, f"{name}.f1")), params, f"{name}.f2")


def embed_positions(pos_data, dta: DtaParameters) -> Tensor:
    """(n, 3) unit-norm coordinates -> (n, d_model) position encoding."""
    pos = np.asarray(pos_data, dtype=dta.dtype)
    if pos.ndim != 2 or pos.shape[1] != 3:
        raise ModelError(f"pos_data must be (n, 3), got {pos.shape}")
    return _mlp_embed(Tensor(pos), dta.params, "pos_embed")


def embed_source(de, dta: DtaParameters) -> Tensor:
    """(..., n, n_bands) features -> (..., n, d_model) source encoding."""
    x = de if isinstance(de, Tensor) else Tensor(np.asarray(de, dtype=dta.dtype))
    if x.shape[-1] != dta.config.n_bands:
        raise ModelError(f"expected {dta.config.n_bands} bands, got {x.shape[-1]}")
    return _mlp_embed(x, dta.params, "src_embed")


def init_inputs(p_emb: Tensor, pos_table: Tensor, s_emb: Tensor):
    """First-layer query plus the shared key/value input.

    The key and value inputs are one and the same tensor (query + source
    encoding); they are projected once and never recomputed, so every layer
    consumes bit-identical keys and values.
    """
    q1 = p_emb + pos_table
    kv = q1 + s_emb
    return q1, kv


def _to_heads(x, n_heads):
    *lead, n, d = x.shape
    x = ad.reshape(x, (*lead, n, n_heads, d // n_heads))
    return ad.swapaxes(x, -3, -2)


def _from_heads(x):
    x = ad.swapaxes(x, -3, -2)
    *lead, n, h, dh = x.shape
    return ad.reshape(x, (*lead, n, h * dh))


def masked_attention(q, k_heads, v_heads, dta: DtaParameters, layer: int,
                     mask_diagonal: bool):
    """Multi-head attention over channels; training masks the diagonal.

    With the mask on, diagonal logits are driven to -inf before the softmax,
    so the post-softmax self-weight is exactly zero and each row is a convex
    combination of the *other* channels' values.  Returns the output
    projection and the attention weights array.
    """
    params = dta.params
    cfg = dta.config
    n = q.shape[-2]
    if mask_diagonal and n < 2:
        raise ModelError("diagonal masking needs at least 2 channels")
    # fold the 1/sqrt(d_head) scale into the (much smaller) query tensor
    qh = _to_heads(_affine(q, params, f"enc{layer}.q") * (1.0 / math.sqrt(cfg.d_head)),
                   cfg.n_heads)
    logits = ad.matmul(qh, ad.swapaxes(k_heads, -1, -2))
    blocked = None
    if mask_diagonal:
        if cfg.literal_diag_mask:
            keep = (1.0 - np.eye(n, dtype=logits.data.dtype))
            logits = logits * Tensor(keep)
        else:
            blocked = np.eye(n, dtype=bool)
    attn = ad.softmax(logits, axis=-1, blocked=blocked)
    mixed = _from_heads(ad.matmul(attn, v_heads))
    return _affine(mixed, params, f"enc{layer}.out"), attn.data


def encoder_layer(q, k_heads, v_heads, dta: DtaParameters, layer: int,
                  mask_diagonal: bool, train: bool, rng):
    """One block: attention, residual + norm, feed-forward, residual + norm."""
    params = dta.params
    h, attn = masked_attention(q, k_heads, v_heads, dta, layer, mask_diagonal)
    x = ad.layer_norm(q + h, params[f"enc{layer}.ln1.g"], params[f"enc{layer}.ln1.b"], LN_EPS)
    inner = ad.elu(_affine(x, params, f"enc{layer}.ffn.f1"))
    if train and rng is not None and dta.config.dropout > 0:
        inner = ad.dropout(inner, dta.config.dropout, rng)
    ffn = _affine(inner, params, f"enc{layer}.ffn.f2")
    out = ad.layer_norm(x + ffn, params[f"enc{layer}.ln2.g"], params[f"enc{layer}.ln2.b"], LN_EPS)
    return out, attn


def encode(de, pos_data, dta: DtaParameters, train=False, rng=None,
           mask_diagonal=None, capture_attention=False) -> EncoderOutput:
    """Run the full encoder.

    `de` is (B, n, bands), (n, bands), or a Tensor; `mask_diagonal` defaults
    to the train flag (the mask is shut off at test time).  Dropout fires
    only when training with an rng.  Output q_final is (B, n, d_model).
    """
    if mask_diagonal is None:
        mask_diagonal = train
    cfg = dta.config
    x = de if isinstance(de, Tensor) else Tensor(np.asarray(de, dtype=dta.dtype))
    if x.ndim == 2:
        x = ad.reshape(x, (1, *x.shape))
    if x.ndim != 3 or x.shape[1] != cfg.n_channels or x.shape[2] != cfg.n_bands:
        raise ModelError(
            f"features must be (B, {cfg.n_channels}, {cfg.n_bands}), got {x.shape}")

    p_emb = embed_positions(pos_data, dta)
    s_emb = embed_source(x, dta)
    q, kv = init_inputs(p_emb, dta.params["pos_table"], s_emb)
    k_heads = _to_heads(_dense(kv, dta.params["kv.k.w"]), cfg.n_heads)
    v_heads = _to_heads(_affine(kv, dta.params, "kv.v"), cfg.n_heads)

    attn_maps = [] if capture_attention else None
    kv_layers = [] if capture_attention else None
    for layer in range(cfg.n_layers):
        q, attn = encoder_layer(q, k_heads, v_heads, dta, layer,
                                mask_diagonal, train, rng)
        if capture_attention:
            attn_maps.append(attn)
            kv_layers.append((k_heads.data, v_heads.data))
    return EncoderOutput(q_final=q, attention=attn_maps, kv_per_layer=kv_layers)


def _flatten(q_final):
    *lead, n, d = q_final.shape
    return ad.reshape(q_final, (*lead, n * d))


def _bn_train(x, gamma, beta, state, key):
    mu = ad.tmean(x, axis=0)
    xc = x - mu
    var = ad.tmean(xc * xc, axis=0)
    y = xc * ad.power(var + BN_EPS, -0.5) * gamma + beta
    state[f"{key}.mean"] = ((1 - BN_MOMENTUM) * state[f"{key}.mean"]
                            + BN_MOMENTUM * mu.data)
    state[f"{key}.var"] = ((1 - BN_MOMENTUM) * state[f"{key}.var"]
                           + BN_MOMENTUM * var.data)
    return y


def _bn_eval(x, gamma, beta, state, key):
    inv = 1.0 / np.sqrt(state[f"{key}.var"] + BN_EPS)
    return (x - Tensor(state[f"{key}.mean"])) * Tensor(inv) * gamma + beta


def project(q_final, dta: DtaParameters, train=False, rng=None,
            update_stats=None) -> Tensor:
    """Projection head: flatten, then three affine stages with batch norm,
    ELU and dropout between them; output is the contrastive embedding."""
    params = dta.params
    update = train if update_stats is None else update_stats
    state = dta.bn_state if update else dict(dta.bn_state)
    x = _flatten(q_final)
    x = _dense(x, params["proj.fc1.w"])
    bn = _bn_train if train else _bn_eval
    x = bn(x, params["proj.bn1.g"], params["proj.bn1.b"], state, "proj.bn1")
    x = ad.elu(x)
    if train and rng is not None and dta.config.dropout > 0:
        x = ad.dropout(x, dta.config.dropout, rng)
    x = _dense(x, params["proj.fc2.w"])
    x = bn(x, params["proj.bn2.g"], params["proj.bn2.b"], state, "proj.bn2")
    x = ad.elu(x)
    if train and rng is not None and dta.config.dropout > 0:
        x = ad.dropout(x, dta.config.dropout, rng)
    return _affine(x, params, "proj.fc3")


def classify(q_final, dta: DtaParameters) -> Tensor:
    """Classifier head: flatten, two ELU hidden layers, linear logits."""
    params = dta.params
    x = _flatten(q_final)
    x = ad.elu(_affine(x, params, "clf.fc1"))
    x = ad.elu(_affine(x, params, "clf.fc2"))
    return _affine(x, params, "clf.fc3")
