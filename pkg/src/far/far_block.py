"""Multi-head bidirectional LSTM attention substitute.

Block structure: LN -> input projection (D->D) -> split into N head
subspaces of width D_h -> per-head BiLSTM -> concat (T x 2D) -> output
projection (2D->D) -> residual add. Gate stacking order is (input,
forget, cell, output) throughout, so row j of gate g lives at index
g*hidden + j in the stacked weight matrices.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor, ShapeError

GATE_ORDER = ("i", "f", "g", "o")
DIRECTIONS = ("fwd", "rev")


@dataclass
class LstmDirParams:
    """One scan direction: gate-stacked weights over ``hidden`` units."""
    w_ih: Tensor  # (4*hidden, input_size)
    w_hh: Tensor  # (4*hidden, hidden)
    b_ih: Tensor  # (4*hidden,)
    b_hh: Tensor  # (4*hidden,)

    @property
    def hidden(self):
        return self.w_hh.shape[1]

    @property
    def input_size(self):
        return self.w_ih.shape[1]

    def named(self, prefix):
        return {f"{prefix}.{k}": getattr(self, k)
                for k in ("w_ih", "w_hh", "b_ih", "b_hh")}


def init_lstm_dir(rng, input_size, hidden, precision="f32"):
    """Uniform +-1/sqrt(hidden) weights, forget-gate bias +1."""
    bound = 1.0 / np.sqrt(hidden)
    dt = T.DTYPES[precision]

    def u(shape):
        return Tensor(rng.uniform(-bound, bound, size=shape).astype(dt),
                      requires_grad=True)

    b_ih = np.zeros(4 * hidden, dtype=dt)
    b_ih[hidden:2 * hidden] = 1.0  # forget gate
    return LstmDirParams(
        w_ih=u((4 * hidden, input_size)),
        w_hh=u((4 * hidden, hidden)),
        b_ih=Tensor(b_ih, requires_grad=True),
        b_hh=Tensor(np.zeros(4 * hidden, dtype=dt), requires_grad=True),
    )


@dataclass
class FarBlockParams:
    """Per-layer substitute parameters."""
    ln_g: Tensor
    ln_b: Tensor
    in_w: Tensor   # (D, D)
    in_b: Tensor
    heads: list    # N entries of {"fwd": LstmDirParams, "rev": LstmDirParams}
    out_w: Tensor  # (sum of head output widths, D)
    out_b: Tensor

    def named(self, prefix):
        out = {f"{prefix}.ln_g": self.ln_g, f"{prefix}.ln_b": self.ln_b,
               f"{prefix}.in_w": self.in_w, f"{prefix}.in_b": self.in_b,
               f"{prefix}.out_w": self.out_w, f"{prefix}.out_b": self.out_b}
        for n, head in enumerate(self.heads):
            for d in DIRECTIONS:
                out.update(head[d].named(f"{prefix}.{n}.{d}"))
        return out


def init_far_block(cfg, rng, ln_init=None):
    d, n, dh, p = cfg.dim, cfg.heads, cfg.head_dim, cfg.precision
    if d != n * dh:
        raise ShapeError(f"dim {d} must equal heads*head_dim {n}*{dh}")
    ln_g = Tensor(np.ones(d, T.DTYPES[p]) if ln_init is None
                  else ln_init[0].data.copy(), requires_grad=True)
    ln_b = Tensor(np.zeros(d, T.DTYPES[p]) if ln_init is None
                  else ln_init[1].data.copy(), requires_grad=True)
    return FarBlockParams(
        ln_g=ln_g, ln_b=ln_b,
        in_w=T.trunc_normal(rng, (d, d), dtype=p),
        in_b=T.zeros(d, p, True),
        heads=[{dd: init_lstm_dir(rng, dh, dh, p) for dd in DIRECTIONS}
               for _ in range(n)],
        out_w=T.trunc_normal(rng, (2 * d, d), dtype=p),
        out_b=T.zeros(d, p, True),
    )


def lstm_step(x_t, h, c, p: LstmDirParams, w_ih_t=None, w_hh_t=None, keep=None):
    """One LSTM cell update. Transposed weights may be passed to avoid
    re-transposing inside a scan; ``keep`` is a 0/1 retention vector."""
    if w_ih_t is None:
        w_ih_t = T.transpose(p.w_ih)
    if w_hh_t is None:
        w_hh_t = T.transpose(p.w_hh)
    gates = T.matmul(x_t, w_ih_t) + T.matmul(h, w_hh_t) + p.b_ih + p.b_hh
    gi, gf, gg, go = T.split(gates, 4, axis=-1)
    i, f, o = T.sigmoid(gi), T.sigmoid(gf), T.sigmoid(go)
    g = T.tanh(gg)
    c_new = f * c + i * g
    h_new = o * T.tanh(c_new)
    if keep is not None:
        c_new = c_new * keep
        h_new = h_new * keep
    return h_new, c_new


def _scan(seq_steps, p, keep):
    """Run an LSTM over a list of (B, input) tensors; returns hidden list."""
    w_ih_t = T.transpose(p.w_ih)
    w_hh_t = T.transpose(p.w_hh)
    b = seq_steps[0].shape[0] if seq_steps[0].ndim > 1 else None
    hid = p.hidden
    shape = (b, hid) if b is not None else (hid,)
    dtype = "f64" if p.w_ih.data.dtype == np.float64 else "f32"
    h = T.zeros(shape, dtype)
    c = T.zeros(shape, dtype)
    outs = []
    for x_t in seq_steps:
        h, c = lstm_step(x_t, h, c, p, w_ih_t, w_hh_t, keep)
        outs.append(h)
    return outs


def bilstm_head(x, head, masks=None, directions=DIRECTIONS):
    """(B,T,D_h) or (T,D_h) -> concat of forward and reverse scans.

    The reverse half is re-aligned to original token positions. Output
    width is fwd_hidden + rev_hidden (equal to 2*D_h when unpruned).
    """
    batched = x.ndim == 3
    t = x.shape[1] if batched else x.shape[0]
    axis = 1 if batched else 0
    steps = [x[:, j, :] if batched else x[j, :] for j in range(t)]

    halves = []
    for d in DIRECTIONS:
        p = head[d]
        keep = None
        if masks is not None and masks.get(d) is not None:
            keep = Tensor(masks[d].astype(p.w_ih.data.dtype))
        if d not in directions:
            shape = ((x.shape[0], t, p.hidden) if batched else (t, p.hidden))
            halves.append(T.zeros(shape, "f64" if p.w_ih.data.dtype == np.float64 else "f32"))
            continue
        seq = steps if d == "fwd" else steps[::-1]
        outs = _scan(seq, p, keep)
        if d == "rev":
            outs = outs[::-1]
        outs = [T.reshape(o, (o.shape[0], 1, p.hidden) if batched
                          else (1, p.hidden)) for o in outs]
        halves.append(T.concat(outs, axis=axis))
    return T.concat(halves, axis=-1)


def far_block_forward(x, p: FarBlockParams, masks=None, directions=DIRECTIONS):
    """y = x + out_proj(concat_heads(BiLSTM_n(split_n(in_proj(LN(x))))))."""
    n = len(p.heads)
    dh = p.heads[0]["fwd"].input_size
    h = T.layer_norm(x, p.ln_g, p.ln_b)
    u = T.matmul(h, p.in_w) + p.in_b
    subs = T.split(u, n, axis=-1)
    outs = [bilstm_head(subs[i], p.heads[i],
                        masks=None if masks is None else masks.get(i),
                        directions=directions)
            for i in range(n)]
    cat = T.concat(outs, axis=-1)
    if cat.shape[-1] != p.out_w.shape[0]:
        raise ShapeError(
            f"head outputs ({cat.shape[-1]}) do not match out_proj rows "
            f"({p.out_w.shape[0]}); mask/parameter mismatch")
    return x + (T.matmul(cat, p.out_w) + p.out_b)


class FarModel:
    """Teacher with every attention sublayer replaced by a FAR block.

    MLP sublayers, embeddings, final norm and head are shared with the
    teacher (same Tensor objects); the FAR blocks own fresh parameters.
    """

    def __init__(self, teacher, cfg=None, seed=0):
        self.teacher = teacher
        self.cfg = cfg or teacher.cfg
        if self.cfg.dim % self.cfg.heads != 0:
            raise ShapeError(
                f"dim {self.cfg.dim} not divisible by heads {self.cfg.heads}")
        rng = np.random.default_rng(seed + 1)
        self.blocks = [
            init_far_block(self.cfg, rng,
                           ln_init=(layer.ln1_g, layer.ln1_b))
            for layer in teacher.layers
        ]
        # masks[layer][head][direction] -> bool keep vector, or None
        self.masks = None
        self.forward_count = 0

    def named_parameters(self):
        out = {}
        shared = self.teacher.named_parameters()
        for name, tnsr in shared.items():
            if ".qkv_" in name or ".proj_" in name or ".ln1_" in name:
                continue  # replaced by the FAR blocks
            out[name] = tnsr
        for i, blk in enumerate(self.blocks):
            out.update(blk.named(f"far.{i}"))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def far_parameters(self):
        out = {}
        for i, blk in enumerate(self.blocks):
            out.update(blk.named(f"far.{i}"))
        return out

    def layer_masks(self, i):
        if self.masks is None:
            return None
        return self.masks[i]

    def forward(self, image, directions=DIRECTIONS):
        """Returns (logits, block_outputs)."""
        self.forward_count += 1
        x = self.teacher.patch_embed(image)
        blocks = []
        for i, layer in enumerate(self.teacher.layers):
            y = far_block_forward(x, self.blocks[i],
                                  masks=self.layer_masks(i),
                                  directions=directions)
            x = self.teacher.mlp_block(y, layer)
            blocks.append(x)
        logits = self.teacher.classify(x)
        return logits, blocks


def replace_attention(teacher, cfg=None, seed=0):
    """Substitute every attention sublayer at once; everything else shared."""
    return FarModel(teacher, cfg=cfg, seed=seed)


def far_block_param_count(d, n, dh):
    """Closed-form parameter count of one unpruned FAR block (incl. LN)."""
    return (d * d + d) + n * 2 * (8 * dh * dh + 8 * dh) + (2 * d * d + d) + 2 * d
