"""Context-adaptive modulation: encode demos, build a prototype bank, route
per-token context, and gate an attention output.

Pipeline over ``N`` demonstrations and a ``T``-token backbone segment:

1. ``encode_demo``   — segment-masked cross-attention reads each demo's
   tokens into ``K + 2`` slots: an input summary ``c_in`` (user tokens only),
   an output summary ``c_out`` (assistant tokens only), and ``K`` unmasked
   context probes ``C``.
2. ``modulate``      — compresses the slots into one latent token::

       g     = Mean(RMSNorm(C))
       phi   = LN([c_in; c_out; c_out - c_in; c_in * c_out])
       u,v,a = H_coef(phi)                      (two affine layers, GELU)
       z     = g + eta * sum_k a_k (U_k*u_k) <V_k*v_k, g>

3. ``interact``      — one pre-norm self-attention block (residual, no
   positional encoding) mixes the ``N`` latent tokens into ``z_hat``.
4. ``assemble_bank`` — per-slot-kind affine calibration then row-wise l2
   normalization, demo-major / slot-kind-minor; ``route`` scores backbone
   tokens against the bank at a learned temperature
   ``tau = tau_min + (tau_max - tau_min) * sigmoid(MLP(mean(z_hat)))`` and
   softmax-mixes bank rows into per-token context ``C_t``.
5. ``gate``          — ``m = sigmoid(W2 GELU(W1 [LayerNorm(h); C_t] + b1) + b2)``
   multiplies the attention output ``Y`` elementwise.  ``W2`` is zero at
   initialization and ``b2`` starts at a positive constant, so a fresh module
   is a near-identity: ``Y' = sigmoid(b2) * Y`` regardless of demos.

Everything is float64 numpy.  ``capm_backward`` computes exact reverse-mode
gradients for every parameter and for the inputs ``h``, ``y``, and the demo
tokens; ``gradient_check`` verifies them against central finite differences.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields
from typing import Any, Sequence

import numpy as np
from scipy.special import erf, expit

from .errors import NumericGuardError, ValidationError
from .records import read_vector_block, write_vector_block

SEGMENT_LABELS = ("user", "assistant")

_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_LN_EPS = 1e-6

# slot kinds index the calibration table rows
_KIND_Z, _KIND_C_IN, _KIND_C_OUT, _KIND_CONTEXT = 0, 1, 2, 3
SLOT_KINDS = ("z", "c_in", "c_out", "context")

STAGE_ORDER = ("hidden", "attention_out", "context", "output")


@dataclass(frozen=True)
class CapmHyper:
    """Shape and schedule constants; ``d_b`` is backbone width, ``d_p`` probe width."""

    d_b: int
    d_p: int
    K: int
    r: int
    eta: float = 0.1
    tau_min: float = 0.05
    tau_max: float = 2.0
    b2_init: float = 4.0
    heads: int = 2

    def __post_init__(self) -> None:
        for name in ("d_b", "d_p", "K", "r", "heads"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ValidationError(f"{name}: must be a positive integer, got {v!r}")
        if self.d_p % self.heads != 0:
            raise ValidationError(f"heads ({self.heads}) must divide d_p ({self.d_p})")
        for name in ("eta", "tau_min", "tau_max", "b2_init"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or not math.isfinite(v):
                raise ValidationError(f"{name}: must be a finite number, got {v!r}")
        if not 0 < self.tau_min < self.tau_max:
            raise ValidationError(
                f"need 0 < tau_min < tau_max, got {self.tau_min!r}, {self.tau_max!r}"
            )

    @property
    def coef_width(self) -> int:
        return 2 * self.r * self.d_p + self.r


# parameter tensors, in serialization order
PARAM_FIELDS = (
    "w_in",
    "queries",
    "enc_wq",
    "enc_wk",
    "enc_wv",
    "enc_wo",
    "rms_gain",
    "phi_ln_gain",
    "phi_ln_bias",
    "hcoef_w1",
    "hcoef_b1",
    "hcoef_w2",
    "hcoef_b2",
    "u_base",
    "v_base",
    "int_ln_gain",
    "int_ln_bias",
    "int_wq",
    "int_wk",
    "int_wv",
    "int_wo",
    "cal_scale",
    "cal_shift",
    "psi",
    "tau_w1",
    "tau_b1",
    "tau_w2",
    "tau_b2",
    "gate_ln_gain",
    "gate_ln_bias",
    "gate_w1",
    "gate_b1",
    "gate_w2",
    "gate_b2",
)


@dataclass(eq=False)
class CapmParams:
    w_in: np.ndarray
    queries: np.ndarray
    enc_wq: np.ndarray
    enc_wk: np.ndarray
    enc_wv: np.ndarray
    enc_wo: np.ndarray
    rms_gain: np.ndarray
    phi_ln_gain: np.ndarray
    phi_ln_bias: np.ndarray
    hcoef_w1: np.ndarray
    hcoef_b1: np.ndarray
    hcoef_w2: np.ndarray
    hcoef_b2: np.ndarray
    u_base: np.ndarray
    v_base: np.ndarray
    int_ln_gain: np.ndarray
    int_ln_bias: np.ndarray
    int_wq: np.ndarray
    int_wk: np.ndarray
    int_wv: np.ndarray
    int_wo: np.ndarray
    cal_scale: np.ndarray
    cal_shift: np.ndarray
    psi: np.ndarray
    tau_w1: np.ndarray
    tau_b1: np.ndarray
    tau_w2: np.ndarray
    tau_b2: np.ndarray
    gate_ln_gain: np.ndarray
    gate_ln_bias: np.ndarray
    gate_w1: np.ndarray
    gate_b1: np.ndarray
    gate_w2: np.ndarray
    gate_b2: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_FIELDS}

    def copy(self) -> "CapmParams":
        return CapmParams(**{k: v.copy() for k, v in self.as_dict().items()})


def expected_shapes(hyper: CapmHyper) -> dict[str, tuple[int, ...]]:
    d_b, d_p, k, r = hyper.d_b, hyper.d_p, hyper.K, hyper.r
    return {
        "w_in": (d_b, d_p),
        "queries": (k + 2, d_p),
        "enc_wq": (d_p, d_p),
        "enc_wk": (d_p, d_p),
        "enc_wv": (d_p, d_p),
        "enc_wo": (d_p, d_p),
        "rms_gain": (d_p,),
        "phi_ln_gain": (4 * d_p,),
        "phi_ln_bias": (4 * d_p,),
        "hcoef_w1": (4 * d_p, 2 * d_p),
        "hcoef_b1": (2 * d_p,),
        "hcoef_w2": (2 * d_p, hyper.coef_width),
        "hcoef_b2": (hyper.coef_width,),
        "u_base": (r, d_p),
        "v_base": (r, d_p),
        "int_ln_gain": (d_p,),
        "int_ln_bias": (d_p,),
        "int_wq": (d_p, d_p),
        "int_wk": (d_p, d_p),
        "int_wv": (d_p, d_p),
        "int_wo": (d_p, d_p),
        "cal_scale": (4, d_p),
        "cal_shift": (4, d_p),
        "psi": (d_b, d_p),
        "tau_w1": (d_p, d_p),
        "tau_b1": (d_p,),
        "tau_w2": (d_p, 1),
        "tau_b2": (1,),
        "gate_ln_gain": (d_b,),
        "gate_ln_bias": (d_b,),
        "gate_w1": (d_b + d_p, d_p),
        "gate_b1": (d_p,),
        "gate_w2": (d_p, d_b),
        "gate_b2": (d_b,),
    }


def validate_params(params: CapmParams, hyper: CapmHyper) -> None:
    for name, shape in expected_shapes(hyper).items():
        arr = getattr(params, name)
        if arr.shape != shape:
            raise ValidationError(f"param {name}: expected shape {shape}, got {arr.shape}")


def init_params(hyper: CapmHyper, rng: np.random.Generator) -> CapmParams:
    """Fresh parameters: small random weights, identity norms and calibration,
    ``gate_w2 = 0`` and ``gate_b2 = b2_init`` so the gate starts near-open."""
    shapes = expected_shapes(hyper)
    arrays: dict[str, np.ndarray] = {}
    for name, shape in shapes.items():
        if name.endswith("_gain") or name == "cal_scale":
            arrays[name] = np.ones(shape)
        elif name.endswith("_bias") or name.endswith("_b1") or name in ("hcoef_b2", "tau_b2", "cal_shift"):
            arrays[name] = np.zeros(shape)
        elif name == "gate_w2":
            arrays[name] = np.zeros(shape)
        elif name == "gate_b2":
            arrays[name] = np.full(shape, hyper.b2_init)
        else:
            arrays[name] = 0.05 * rng.standard_normal(shape)
    return CapmParams(**arrays)


def random_params(hyper: CapmHyper, rng: np.random.Generator) -> CapmParams:
    """Trained-like parameters: everything perturbed, nothing at its init value.

    The gate bias is drawn near zero rather than near ``b2_init`` so the gate
    sits in its responsive range; a saturated sigmoid attenuates every
    upstream gradient by ~50x, which starves finite-difference comparisons of
    precision without exercising anything new.
    """
    shapes = expected_shapes(hyper)
    arrays: dict[str, np.ndarray] = {}
    for name, shape in shapes.items():
        if name.endswith("_gain") or name == "cal_scale":
            arrays[name] = 1.0 + 0.2 * rng.standard_normal(shape)
        else:
            arrays[name] = 0.3 * rng.standard_normal(shape)
    return CapmParams(**arrays)


@dataclass(eq=False)
class DemoSlots:
    """Encoded demo: input/output summaries plus K context probe rows."""

    c_in: np.ndarray  # (d_p,)
    c_out: np.ndarray  # (d_p,)
    context: np.ndarray  # (K, d_p)


@dataclass(eq=False)
class RouteResult:
    context: np.ndarray  # (T, d_p)
    tau: float
    weights: np.ndarray  # (T, S), rows sum to 1


@dataclass(eq=False)
class CapmTrace:
    """Forward intermediates: public state per stage plus backward caches."""

    h: np.ndarray
    y: np.ndarray
    slots: tuple[DemoSlots, ...]
    z: np.ndarray  # (N, d_p)
    z_hat: np.ndarray  # (N, d_p)
    bank: np.ndarray  # (S, d_p)
    tau: float | None
    weights: np.ndarray  # (T, S)
    context: np.ndarray  # (T, d_p)
    m: np.ndarray  # (T, d_b)
    y_prime: np.ndarray  # (T, d_b)
    caches: dict[str, Any]

    def stage_states(self) -> dict[str, np.ndarray]:
        return {
            "hidden": self.h,
            "attention_out": self.y,
            "context": self.context,
            "output": self.y_prime,
        }


@dataclass(eq=False)
class CapmGrads:
    """Gradients for every parameter tensor plus the inputs."""

    params: dict[str, np.ndarray]
    d_h: np.ndarray
    d_y: np.ndarray
    d_tokens: list[np.ndarray]

    def __getattr__(self, name: str) -> Any:
        try:
            return self.__dict__["params"][name]
        except KeyError:
            raise AttributeError(name) from None


# ---------------------------------------------------------------------------
# primitive layers (forward, cache) / (grad_out, cache) -> grads


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x * _SQRT1_2))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x * _SQRT1_2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def _softmax_last(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_backward(dout: np.ndarray, p: np.ndarray) -> np.ndarray:
    return p * (dout - np.sum(dout * p, axis=-1, keepdims=True))


def _ln_forward(x, gain, bias, eps=_LN_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv, gain)


def _ln_backward(dout, cache):
    xhat, inv, gain = cache
    d = xhat.shape[-1]
    dgain = (dout * xhat).reshape(-1, d).sum(axis=0)
    dbias = dout.reshape(-1, d).sum(axis=0)
    dxhat = dout * gain
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


def _rms_forward(x, gain, eps=_LN_EPS):
    ms = (x * x).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    xhat = x * inv
    return xhat * gain, (x, xhat, inv, gain)


def _rms_backward(dout, cache):
    x, xhat, inv, gain = cache
    d = x.shape[-1]
    dgain = (dout * xhat).reshape(-1, d).sum(axis=0)
    dxhat = dout * gain
    s = (dxhat * x).sum(axis=-1, keepdims=True)
    dx = dxhat * inv - x * s * inv**3 / d
    return dx, dgain


def _l2rows_forward(x):
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / norms, (x, norms)


def _l2rows_backward(dout, cache):
    x, norms = cache
    dot = (dout * x).sum(axis=-1, keepdims=True)
    return dout / norms - x * dot / norms**3


def _mha_forward(q_rows, kv_rows, wq, wk, wv, wo, heads, mask=None):
    """Multi-head scaled dot-product attention.  ``mask[i, j]`` true means
    query row ``i`` may attend key ``j``; masked scores become -inf, so the
    masked positions get exactly zero weight."""
    m, d = q_rows.shape
    l = kv_rows.shape[0]
    dh = d // heads
    scale = 1.0 / math.sqrt(dh)
    q = q_rows @ wq
    k = kv_rows @ wk
    v = kv_rows @ wv
    qh = q.reshape(m, heads, dh).transpose(1, 0, 2)
    kh = k.reshape(l, heads, dh).transpose(1, 0, 2)
    vh = v.reshape(l, heads, dh).transpose(1, 0, 2)
    scores = np.einsum("hmd,hld->hml", qh, kh) * scale
    if mask is not None:
        scores = np.where(mask[None, :, :], scores, -np.inf)
    p = _softmax_last(scores)
    oh = np.einsum("hml,hld->hmd", p, vh)
    concat = oh.transpose(1, 0, 2).reshape(m, d)
    out = concat @ wo
    cache = (q_rows, kv_rows, wq, wk, wv, wo, qh, kh, vh, p, concat, scale, heads)
    return out, cache


def _mha_backward(dout, cache):
    q_rows, kv_rows, wq, wk, wv, wo, qh, kh, vh, p, concat, scale, heads = cache
    m, d = concat.shape
    l = kv_rows.shape[0]
    dh = d // heads
    dwo = concat.T @ dout
    dconcat = dout @ wo.T
    doh = dconcat.reshape(m, heads, dh).transpose(1, 0, 2)
    dp = np.einsum("hmd,hld->hml", doh, vh)
    dvh = np.einsum("hml,hmd->hld", p, doh)
    ds = _softmax_backward(dp, p)
    dqh = np.einsum("hml,hld->hmd", ds, kh) * scale
    dkh = np.einsum("hml,hmd->hld", ds, qh) * scale
    dq = dqh.transpose(1, 0, 2).reshape(m, d)
    dk = dkh.transpose(1, 0, 2).reshape(l, d)
    dv = dvh.transpose(1, 0, 2).reshape(l, d)
    dq_rows = dq @ wq.T
    dkv_rows = dk @ wk.T + dv @ wv.T
    dwq = q_rows.T @ dq
    dwk = kv_rows.T @ dk
    dwv = kv_rows.T @ dv
    return dq_rows, dkv_rows, dwq, dwk, dwv, dwo


# ---------------------------------------------------------------------------
# stage forwards/backwards


def _check_demo(tokens, segments, hyper: CapmHyper) -> tuple[np.ndarray, np.ndarray]:
    tok = np.asarray(tokens, dtype=np.float64)
    if tok.ndim != 2 or tok.shape[1] != hyper.d_b:
        raise ValidationError(f"demo tokens: expected (L, {hyper.d_b}) array, got {tok.shape}")
    if tok.shape[0] != len(segments):
        raise ValidationError(
            f"demo segments: {len(segments)} labels for {tok.shape[0]} tokens"
        )
    for i, s in enumerate(segments):
        if s not in SEGMENT_LABELS:
            raise ValidationError(f"segments[{i}]: {s!r} is not one of {SEGMENT_LABELS}")
    is_user = np.array([s == "user" for s in segments], dtype=bool)
    if not is_user.any() or is_user.all():
        raise ValidationError("demo segments: a segment with zero tokens")
    return tok, is_user


def _encode_forward(tokens, segments, params: CapmParams, hyper: CapmHyper):
    tok, is_user = _check_demo(tokens, segments, hyper)
    xp = tok @ params.w_in
    mask = np.ones((hyper.K + 2, tok.shape[0]), dtype=bool)
    mask[0] = is_user  # c_in reads the user segment only
    mask[1] = ~is_user  # c_out reads the assistant segment only
    y, mha_cache = _mha_forward(
        params.queries, xp, params.enc_wq, params.enc_wk, params.enc_wv, params.enc_wo,
        hyper.heads, mask,
    )
    slots = DemoSlots(c_in=y[0], c_out=y[1], context=y[2:])
    return slots, (tok, mha_cache)


def _encode_backward(d_slots, cache, params: CapmParams, grads: dict[str, np.ndarray]):
    dc_in, dc_out, dcontext = d_slots
    tok, mha_cache = cache
    dy = np.vstack([dc_in[None, :], dc_out[None, :], dcontext])
    dq_rows, dxp, dwq, dwk, dwv, dwo = _mha_backward(dy, mha_cache)
    grads["queries"] += dq_rows
    grads["enc_wq"] += dwq
    grads["enc_wk"] += dwk
    grads["enc_wv"] += dwv
    grads["enc_wo"] += dwo
    grads["w_in"] += tok.T @ dxp
    return dxp @ params.w_in.T  # d tokens


def _modulate_forward(slots: DemoSlots, params: CapmParams, hyper: CapmHyper):
    cn, rms_cache = _rms_forward(slots.context, params.rms_gain)
    g = cn.mean(axis=0)
    delta = slots.c_out - slots.c_in
    pi = slots.c_in * slots.c_out
    cat = np.concatenate([slots.c_in, slots.c_out, delta, pi])
    phi, ln_cache = _ln_forward(cat, params.phi_ln_gain, params.phi_ln_bias)
    pre1 = phi @ params.hcoef_w1 + params.hcoef_b1
    hid = _gelu(pre1)
    out = hid @ params.hcoef_w2 + params.hcoef_b2
    rdp = hyper.r * hyper.d_p
    u = out[:rdp].reshape(hyper.r, hyper.d_p)
    v = out[rdp : 2 * rdp].reshape(hyper.r, hyper.d_p)
    alpha = out[2 * rdp :]
    a = params.u_base * u
    b = params.v_base * v
    s = b @ g
    z = g + hyper.eta * (alpha * s) @ a
    cache = (slots, rms_cache, ln_cache, phi, pre1, hid, u, v, alpha, a, b, s, g)
    return z, cache


def _modulate_backward(dz, cache, params: CapmParams, grads, hyper: CapmHyper):
    slots, rms_cache, ln_cache, phi, pre1, hid, u, v, alpha, a, b, s, g = cache
    eta = hyper.eta
    dg = dz.copy()
    da = eta * (alpha * s)[:, None] * dz[None, :]
    d_as = eta * (a @ dz)  # (r,), gradient of (alpha_k * s_k)
    dalpha = d_as * s
    ds = d_as * alpha
    db = ds[:, None] * g[None, :]
    dg += ds @ b
    grads["u_base"] += da * u
    du = da * params.u_base
    grads["v_base"] += db * v
    dv = db * params.v_base
    dout = np.concatenate([du.ravel(), dv.ravel(), dalpha])
    grads["hcoef_w2"] += np.outer(hid, dout)
    grads["hcoef_b2"] += dout
    dhid = dout @ params.hcoef_w2.T
    dpre1 = dhid * _gelu_grad(pre1)
    grads["hcoef_w1"] += np.outer(phi, dpre1)
    grads["hcoef_b1"] += dpre1
    dphi = dpre1 @ params.hcoef_w1.T
    dcat, dgain, dbias = _ln_backward(dphi, ln_cache)
    grads["phi_ln_gain"] += dgain
    grads["phi_ln_bias"] += dbias
    d1, d2, d3, d4 = np.split(dcat, 4)
    dc_in = d1 - d3 + d4 * slots.c_out
    dc_out = d2 + d3 + d4 * slots.c_in
    k = slots.context.shape[0]
    dcn = np.tile(dg / k, (k, 1))
    dcontext, drms_gain = _rms_backward(dcn, rms_cache)
    grads["rms_gain"] += drms_gain
    return dc_in, dc_out, dcontext


def _interact_forward(z_rows, params: CapmParams, hyper: CapmHyper):
    ln, ln_cache = _ln_forward(z_rows, params.int_ln_gain, params.int_ln_bias)
    attn, mha_cache = _mha_forward(
        ln, ln, params.int_wq, params.int_wk, params.int_wv, params.int_wo, hyper.heads
    )
    return z_rows + attn, (ln_cache, mha_cache)


def _interact_backward(dzhat, cache, params: CapmParams, grads):
    ln_cache, mha_cache = cache
    dq_rows, dkv_rows, dwq, dwk, dwv, dwo = _mha_backward(dzhat, mha_cache)
    grads["int_wq"] += dwq
    grads["int_wk"] += dwk
    grads["int_wv"] += dwv
    grads["int_wo"] += dwo
    dln = dq_rows + dkv_rows
    dz, dgain, dbias = _ln_backward(dln, ln_cache)
    grads["int_ln_gain"] += dgain
    grads["int_ln_bias"] += dbias
    return dzhat + dz


def _bank_forward(z_hat, slots_list, params: CapmParams, hyper: CapmHyper):
    rows = []
    kinds = []
    for i, slots in enumerate(slots_list):
        rows.append(z_hat[i])
        kinds.append(_KIND_Z)
        rows.append(slots.c_in)
        kinds.append(_KIND_C_IN)
        rows.append(slots.c_out)
        kinds.append(_KIND_C_OUT)
        for kk in range(hyper.K):
            rows.append(slots.context[kk])
            kinds.append(_KIND_CONTEXT)
    raw = np.vstack(rows)
    kind_idx = np.asarray(kinds, dtype=np.intp)
    cal = raw * params.cal_scale[kind_idx] + params.cal_shift[kind_idx]
    norms = np.linalg.norm(cal, axis=1)
    if np.any(norms == 0.0):
        raise NumericGuardError("assemble_bank: zero-norm row after calibration")
    bank = cal / norms[:, None]
    return bank, (raw, kind_idx, cal, norms)


def _bank_backward(dbank, cache, params: CapmParams, grads, hyper: CapmHyper, n_demos: int):
    raw, kind_idx, cal, norms = cache
    dot = (dbank * cal).sum(axis=1, keepdims=True)
    dcal = dbank / norms[:, None] - cal * dot / norms[:, None] ** 3
    for kind in range(4):
        sel = kind_idx == kind
        if sel.any():
            grads["cal_scale"][kind] += (dcal[sel] * raw[sel]).sum(axis=0)
            grads["cal_shift"][kind] += dcal[sel].sum(axis=0)
    draw = dcal * params.cal_scale[kind_idx]
    stride = hyper.K + 3
    d_zhat = np.zeros((n_demos, hyper.d_p))
    slot_grads = []
    for i in range(n_demos):
        base = i * stride
        d_zhat[i] = draw[base]
        slot_grads.append(
            (draw[base + 1], draw[base + 2], draw[base + 3 : base + 3 + hyper.K].copy())
        )
    return d_zhat, slot_grads


def _route_forward(h, bank, z_hat, params: CapmParams, hyper: CapmHyper):
    z_pool = z_hat.mean(axis=0)
    pre_t1 = z_pool @ params.tau_w1 + params.tau_b1
    t1 = _gelu(pre_t1)
    tval = (t1 @ params.tau_w2 + params.tau_b2).item()
    sig = float(expit(tval))
    tau = hyper.tau_min + (hyper.tau_max - hyper.tau_min) * sig
    q = h @ params.psi
    if np.any(np.linalg.norm(q, axis=1) == 0.0):
        raise NumericGuardError("route: zero-norm query projection")
    qhat, l2_cache = _l2rows_forward(q)
    scores = qhat @ bank.T / tau
    weights = _softmax_last(scores)
    context = weights @ bank
    cache = (h, bank, z_hat.shape[0], z_pool, pre_t1, t1, sig, tau, l2_cache, qhat, scores, weights)
    return RouteResult(context=context, tau=tau, weights=weights), cache


def _route_backward(dcontext, cache, params: CapmParams, grads, hyper: CapmHyper):
    h, bank, n_demos, z_pool, pre_t1, t1, sig, tau, l2_cache, qhat, scores, weights = cache
    dweights = dcontext @ bank.T
    dbank = weights.T @ dcontext
    dscores = _softmax_backward(dweights, weights)
    dqhat = dscores @ bank / tau
    dbank += dscores.T @ qhat / tau
    dtau = -float((dscores * scores).sum()) / tau
    dq = _l2rows_backward(dqhat, l2_cache)
    grads["psi"] += h.T @ dq
    dh = dq @ params.psi.T
    # temperature chain: tau = tau_min + (tau_max - tau_min) * sigmoid(tval)
    dtval = dtau * (hyper.tau_max - hyper.tau_min) * sig * (1.0 - sig)
    grads["tau_b2"] += np.array([dtval])
    grads["tau_w2"] += t1[:, None] * dtval
    dt1 = params.tau_w2[:, 0] * dtval
    dpre_t1 = dt1 * _gelu_grad(pre_t1)
    grads["tau_w1"] += np.outer(z_pool, dpre_t1)
    grads["tau_b1"] += dpre_t1
    dz_pool = dpre_t1 @ params.tau_w1.T
    d_zhat = np.tile(dz_pool / n_demos, (n_demos, 1))
    return dh, dbank, d_zhat


def _gate_forward(h, context, y, params: CapmParams):
    lnh, ln_cache = _ln_forward(h, params.gate_ln_gain, params.gate_ln_bias)
    xg = np.concatenate([lnh, context], axis=1)
    pre1 = xg @ params.gate_w1 + params.gate_b1
    hid = _gelu(pre1)
    pre2 = hid @ params.gate_w2 + params.gate_b2
    m = expit(pre2)
    y_prime = y * m
    return y_prime, m, (ln_cache, xg, pre1, hid, m, y, h.shape[1])


def _gate_backward(dyp, cache, params: CapmParams, grads):
    ln_cache, xg, pre1, hid, m, y, d_b = cache
    dy = dyp * m
    dm = dyp * y
    dpre2 = dm * m * (1.0 - m)
    grads["gate_w2"] += hid.T @ dpre2
    grads["gate_b2"] += dpre2.sum(axis=0)
    dhid = dpre2 @ params.gate_w2.T
    dpre1 = dhid * _gelu_grad(pre1)
    grads["gate_w1"] += xg.T @ dpre1
    grads["gate_b1"] += dpre1.sum(axis=0)
    dxg = dpre1 @ params.gate_w1.T
    dlnh = dxg[:, :d_b]
    dcontext = dxg[:, d_b:]
    dh, dgain, dbias = _ln_backward(dlnh, ln_cache)
    grads["gate_ln_gain"] += dgain
    grads["gate_ln_bias"] += dbias
    return dh, dcontext, dy


# ---------------------------------------------------------------------------
# public stage operations


def encode_demo(tokens, segments, params: CapmParams, hyper: CapmHyper) -> DemoSlots:
    """Read one demo into slots via segment-masked cross-attention."""
    slots, _ = _encode_forward(tokens, segments, params, hyper)
    return slots


def modulate(slots: DemoSlots, params: CapmParams, hyper: CapmHyper) -> np.ndarray:
    """Compress slots into the demo's latent token ``z``."""
    z, _ = _modulate_forward(slots, params, hyper)
    return z


def interact(z_rows: np.ndarray, params: CapmParams, hyper: CapmHyper) -> np.ndarray:
    """Mix latent tokens with one pre-norm residual self-attention block.

    Order-equivariant: there is no positional encoding, so permuting the rows
    permutes the output the same way.
    """
    z = np.asarray(z_rows, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 1 or z.shape[1] != hyper.d_p:
        raise ValidationError(f"interact: expected (N >= 1, {hyper.d_p}) array, got {z.shape}")
    z_hat, _ = _interact_forward(z, params, hyper)
    return z_hat


def assemble_bank(
    z_hat: np.ndarray, slots_list: Sequence[DemoSlots], params: CapmParams, hyper: CapmHyper
) -> np.ndarray:
    """Calibrate and l2-normalize all slot rows, demo-major / slot-kind-minor.

    Row layout per demo ``i``: ``z_hat[i]``, ``c_in``, ``c_out``, then the
    ``K`` context rows — ``N * (K + 3)`` rows in total.
    """
    z = np.asarray(z_hat, dtype=np.float64)
    if len(slots_list) != z.shape[0]:
        raise ValidationError(
            f"assemble_bank: {z.shape[0]} latent rows for {len(slots_list)} demos"
        )
    if z.shape[0] == 0:
        return np.zeros((0, hyper.d_p))
    bank, _ = _bank_forward(z, slots_list, params, hyper)
    return bank


def route(
    h: np.ndarray, bank: np.ndarray, z_hat: np.ndarray, params: CapmParams, hyper: CapmHyper
) -> RouteResult:
    """Per-token soft lookup into the bank at a learned temperature."""
    hv = np.asarray(h, dtype=np.float64)
    if hv.ndim != 2 or hv.shape[1] != hyper.d_b:
        raise ValidationError(f"route: expected (T, {hyper.d_b}) hidden states, got {hv.shape}")
    result, _ = _route_forward(hv, bank, np.asarray(z_hat, dtype=np.float64), params, hyper)
    return result


def gate(
    h: np.ndarray, context: np.ndarray, y: np.ndarray, params: CapmParams
) -> tuple[np.ndarray, np.ndarray]:
    """Modulate the attention output ``y``; returns ``(y_prime, m)``."""
    y_prime, m, _ = _gate_forward(
        np.asarray(h, dtype=np.float64),
        np.asarray(context, dtype=np.float64),
        np.asarray(y, dtype=np.float64),
        params,
    )
    return y_prime, m


# ---------------------------------------------------------------------------
# composed forward / backward


def capm_forward(
    demos: Sequence[tuple[Any, Sequence[str]]],
    h: np.ndarray,
    y: np.ndarray,
    params: CapmParams,
    hyper: CapmHyper,
) -> tuple[np.ndarray, CapmTrace]:
    """Run the full pipeline; returns ``(y_prime, trace)``.

    ``demos`` is a sequence of ``(tokens, segments)`` pairs.  With zero demos
    the bank is empty and every context row is the zero vector, so the output
    reduces to the gate acting on ``[LayerNorm(h); 0]``.
    """
    hv = np.asarray(h, dtype=np.float64)
    yv = np.asarray(y, dtype=np.float64)
    if hv.ndim != 2 or hv.shape[1] != hyper.d_b:
        raise ValidationError(f"capm_forward: expected (T, {hyper.d_b}) hidden states, got {hv.shape}")
    if yv.shape != hv.shape:
        raise ValidationError(
            f"capm_forward: h and y must share shape, got {hv.shape} vs {yv.shape}"
        )
    t_len = hv.shape[0]
    n = len(demos)

    slots_list: list[DemoSlots] = []
    enc_caches = []
    for tokens, segments in demos:
        slots, cache = _encode_forward(tokens, segments, params, hyper)
        slots_list.append(slots)
        enc_caches.append(cache)

    if n > 0:
        mod_caches = []
        z_rows = np.empty((n, hyper.d_p))
        for i, slots in enumerate(slots_list):
            z, cache = _modulate_forward(slots, params, hyper)
            z_rows[i] = z
            mod_caches.append(cache)
        z_hat, int_cache = _interact_forward(z_rows, params, hyper)
        bank, bank_cache = _bank_forward(z_hat, slots_list, params, hyper)
        route_result, route_cache = _route_forward(hv, bank, z_hat, params, hyper)
        context = route_result.context
        tau: float | None = route_result.tau
        weights = route_result.weights
    else:
        mod_caches = []
        int_cache = bank_cache = route_cache = None
        z_rows = np.zeros((0, hyper.d_p))
        z_hat = np.zeros((0, hyper.d_p))
        bank = np.zeros((0, hyper.d_p))
        context = np.zeros((t_len, hyper.d_p))
        tau = None
        weights = np.zeros((t_len, 0))

    y_prime, m, gate_cache = _gate_forward(hv, context, yv, params)
    trace = CapmTrace(
        h=hv,
        y=yv,
        slots=tuple(slots_list),
        z=z_rows,
        z_hat=z_hat,
        bank=bank,
        tau=tau,
        weights=weights,
        context=context,
        m=m,
        y_prime=y_prime,
        caches={
            "enc": enc_caches,
            "mod": mod_caches,
            "int": int_cache,
            "bank": bank_cache,
            "route": route_cache,
            "gate": gate_cache,
            "n": n,
        },
    )
    return y_prime, trace


def capm_backward(
    trace: CapmTrace, grad_y_prime: np.ndarray, params: CapmParams, hyper: CapmHyper
) -> CapmGrads:
    """Exact reverse-mode gradients of the composed forward.

    ``params`` must be the object the trace was produced with.  Returns
    gradients for every parameter tensor plus ``d_h``, ``d_y`` and one
    ``d_tokens`` array per demo.
    """
    g = np.asarray(grad_y_prime, dtype=np.float64)
    if g.shape != trace.y_prime.shape:
        raise ValidationError(
            f"capm_backward: grad shape {g.shape} does not match output {trace.y_prime.shape}"
        )
    grads = {name: np.zeros_like(arr) for name, arr in params.as_dict().items()}
    caches = trace.caches
    n = caches["n"]

    dh, dcontext, dy = _gate_backward(g, caches["gate"], params, grads)
    d_tokens: list[np.ndarray] = []
    if n > 0:
        dh2, dbank, d_zhat = _route_backward(dcontext, caches["route"], params, grads, hyper)
        dh += dh2
        d_zhat2, slot_grads = _bank_backward(dbank, caches["bank"], params, grads, hyper, n)
        d_zhat += d_zhat2
        dz = _interact_backward(d_zhat, caches["int"], params, grads)
        for i in range(n):
            dc_in, dc_out, dcontext_rows = _modulate_backward(
                dz[i], caches["mod"][i], params, grads, hyper
            )
            b_in, b_out, b_ctx = slot_grads[i]
            d_tokens.append(
                _encode_backward(
                    (dc_in + b_in, dc_out + b_out, dcontext_rows + b_ctx),
                    caches["enc"][i],
                    params,
                    grads,
                )
            )
    return CapmGrads(params=grads, d_h=dh, d_y=dy, d_tokens=d_tokens)


# ---------------------------------------------------------------------------
# diagnostics


@dataclass(frozen=True)
class StageStats:
    """Mean row norm at a stage plus the k-shot vs 0-shot row distance."""

    mean_norm: float
    representation_shift: float


def forward_diagnostics(trace_zero: CapmTrace, trace_k: CapmTrace) -> dict[str, StageStats]:
    """Per-stage statistics comparing a k-shot trace against its 0-shot twin.

    Stages: ``hidden`` (the incoming hidden states, whose mean row norm is
    the hidden-state norm), ``attention_out`` (the raw attention output),
    ``context`` (routed context rows), and ``output`` (the gated contribution
    handed back to the residual stream, whose mean row norm is the residual
    contribution norm).  ``mean_norm`` is taken from the k-shot trace;
    ``representation_shift`` is the mean row-wise Euclidean distance between
    the two traces at the same stage.  Both traces must come from the same
    inputs, differing only in demo count.
    """
    states_zero = trace_zero.stage_states()
    states_k = trace_k.stage_states()
    out: dict[str, StageStats] = {}
    for stage in STAGE_ORDER:
        a = states_k[stage]
        b = states_zero[stage]
        if a.shape != b.shape:
            raise ValidationError(
                f"forward_diagnostics: stage {stage!r} shape mismatch {a.shape} vs {b.shape}"
            )
        mean_norm = float(np.linalg.norm(a, axis=1).mean())
        shift = float(np.linalg.norm(a - b, axis=1).mean())
        out[stage] = StageStats(mean_norm=mean_norm, representation_shift=shift)
    return out


# ---------------------------------------------------------------------------
# serialization (manifest line + one container block per tensor)


def save_params(params: CapmParams, hyper: CapmHyper, path: str) -> None:
    """Write hyperparameters and every tensor to ``path``.

    Layout: one JSON manifest line, then one binary vector block per tensor
    in ``PARAM_FIELDS`` order; the block's record id is ``"<name> <shape>"``
    and the payload is the row-major float32 flattening (so a round trip is
    exact only to float32 resolution).
    """
    manifest = {
        "format": "capm-params",
        "version": 1,
        "hyper": {f.name: getattr(hyper, f.name) for f in fields(CapmHyper)},
    }
    with open(path, "wb") as fh:
        fh.write((json.dumps(manifest, sort_keys=True) + "\n").encode("utf-8"))
        for name in PARAM_FIELDS:
            arr = np.asarray(getattr(params, name), dtype=np.float64)
            shape = "x".join(str(s) for s in arr.shape)
            write_vector_block(fh, [(f"{name} {shape}", arr.ravel().tolist())], dim=arr.size)


def load_params(path: str) -> tuple[CapmParams, CapmHyper]:
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            manifest = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise ValidationError(f"{path}: bad parameter manifest line") from None
        if not isinstance(manifest, dict) or manifest.get("format") != "capm-params":
            raise ValidationError(f"{path}: not a parameter file")
        if manifest.get("version") != 1:
            raise ValidationError(f"{path}: unsupported version {manifest.get('version')!r}")
        try:
            hyper = CapmHyper(**manifest["hyper"])
        except (TypeError, KeyError):
            raise ValidationError(f"{path}: bad hyperparameter manifest") from None
        arrays: dict[str, np.ndarray] = {}
        for name in PARAM_FIELDS:
            _, entries = read_vector_block(fh)
            if len(entries) != 1:
                raise ValidationError(f"{path}: tensor block for {name} must hold one record")
            rid, values = entries[0]
            head, _, shape_s = rid.partition(" ")
            if head != name:
                raise ValidationError(f"{path}: expected tensor {name!r}, found {head!r}")
            shape = tuple(int(x) for x in shape_s.split("x")) if shape_s else ()
            arr = np.asarray(values, dtype=np.float64)
            if arr.size != int(np.prod(shape, dtype=np.int64)):
                raise ValidationError(f"{path}: tensor {name!r} size does not match its shape")
            arrays[name] = arr.reshape(shape)
        if fh.read(1):
            raise ValidationError(f"{path}: trailing bytes after final tensor")
    params = CapmParams(**arrays)
    validate_params(params, hyper)
    return params, hyper


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_err: float
    per_tensor: dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def gradient_check(
    params: CapmParams,
    hyper: CapmHyper,
    demos: Sequence[tuple[Any, Sequence[str]]],
    h: np.ndarray,
    y: np.ndarray,
    grad_out: np.ndarray | None = None,
    step: float = 1e-5,
    tolerance: float = 1e-4,
) -> GradCheckReport:
    """Compare ``capm_backward`` against central finite differences.

    The scalar objective is ``sum(grad_out * y_prime)``; every parameter
    tensor plus ``h``, ``y``, and each demo's tokens is perturbed
    coordinate-wise with the central two-point stencil.  Per tensor the
    normwise relative error ``||a - n|| / max(||a||, ||n||)`` is reported;
    per-coordinate ratios are meaningless where the true gradient sits below
    the ~1e-10 noise floor of the difference quotient itself.
    """
    hv = np.asarray(h, dtype=np.float64)
    yv = np.asarray(y, dtype=np.float64)
    if grad_out is None:
        grad_out = np.ones_like(yv)
    g = np.asarray(grad_out, dtype=np.float64)

    demo_list = [(np.asarray(t, dtype=np.float64), list(s)) for t, s in demos]
    y_prime, trace = capm_forward(demo_list, hv, yv, params, hyper)
    analytic = capm_backward(trace, g, params, hyper)

    work = {name: arr.copy() for name, arr in params.as_dict().items()}
    h_work = hv.copy()
    y_work = yv.copy()
    tok_work = [t.copy() for t, _ in demo_list]

    def objective() -> float:
        p = CapmParams(**work)
        ds = [(tok_work[i], demo_list[i][1]) for i in range(len(demo_list))]
        out, _ = capm_forward(ds, h_work, y_work, p, hyper)
        return float((g * out).sum())

    def numeric_grad(arr: np.ndarray) -> np.ndarray:
        num = np.zeros_like(arr)
        flat = arr.ravel()
        nflat = num.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = objective()
            flat[i] = orig - step
            f_minus = objective()
            flat[i] = orig
            nflat[i] = (f_plus - f_minus) / (2.0 * step)
        return num

    def rel_err(a: np.ndarray, n: np.ndarray) -> float:
        if a.size == 0:
            return 0.0
        denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(n)), 1e-12)
        return float(np.linalg.norm(a - n)) / denom

    per_tensor: dict[str, float] = {}
    for name in PARAM_FIELDS:
        per_tensor[name] = rel_err(analytic.params[name], numeric_grad(work[name]))
    per_tensor["h"] = rel_err(analytic.d_h, numeric_grad(h_work))
    per_tensor["y"] = rel_err(analytic.d_y, numeric_grad(y_work))
    for i in range(len(demo_list)):
        per_tensor[f"tokens[{i}]"] = rel_err(analytic.d_tokens[i], numeric_grad(tok_work[i]))

    max_rel_err = max(per_tensor.values())
    return GradCheckReport(max_rel_err=max_rel_err, per_tensor=per_tensor, tolerance=tolerance)
