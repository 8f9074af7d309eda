"""Miniature decoder-only transformer with a hand-written backward pass.

The model exposes exactly the tensors the distillation losses consume:

* ``embeddings`` -- token-embedding lookup of the input ids, before the
  positional embeddings are added (lexical content only);
* ``hidden``     -- output of the last block after the final layernorm;
* ``logits``     -- ``hidden @ w_out``.

``backward`` accepts upstream gradients at all three of those tensors at
once, because the sequence-alignment loss injects gradients at the
embedding and hidden levels while the token losses inject at the logits.
Everything is float64 and deterministic; there is no autodiff tape, just
the chain rule written out per block.

All parameters are kept as 2-D grids (biases and layernorm scales as
1 x d rows) so checkpoints serialize uniformly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import NumericError, UsageError
from .numerics import GRID_MAGIC, Rng, ensure_finite
from .tokenizers import EOS, TokenSeq

CHECKPOINT_MAGIC = b"WDCK\x01"
_NEG_INF = -1e30
_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


@dataclass(frozen=True)
class LmConfig:
    vocab_size: int
    width: int
    layers: int
    heads: int
    context: int
    seed: int

    def __post_init__(self):
        if min(self.vocab_size, self.width, self.layers, self.heads, self.context) < 1:
            raise UsageError("all model dimensions must be >= 1")
        if self.width % self.heads != 0:
            raise UsageError(f"width {self.width} not divisible by heads {self.heads}")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "width": self.width,
            "layers": self.layers,
            "heads": self.heads,
            "context": self.context,
            "seed": self.seed,
        }


@dataclass
class ForwardTrace:
    """Everything one forward pass produced, plus caches for backward."""

    ids: tuple[int, ...]
    embeddings: np.ndarray  # (n, d) pre-positional lookup
    hidden: np.ndarray      # (n, d) after final layernorm
    logits: np.ndarray      # (n, vocab)
    caches: dict = field(repr=False, default_factory=dict)

    def __len__(self) -> int:
        return len(self.ids)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def _ln_forward(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float = 1e-5):
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return xhat * g + b, (xhat, inv)


def _ln_backward(dy: np.ndarray, cache, g: np.ndarray):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=0, keepdims=True)
    db = dy.sum(axis=0, keepdims=True)
    dxhat = dy * g
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = (dxhat - m1 - xhat * m2) * inv
    return dx, dg, db


def _softmax_last(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class TinyLm:
    """Pre-norm causal decoder, sized by :class:`LmConfig`.

    ``forward_calls`` counts forward invocations; the training modes that
    must never touch the teacher are asserted against it.
    """

    def __init__(self, cfg: LmConfig, params: dict[str, np.ndarray] | None = None):
        self.cfg = cfg
        self.forward_calls = 0
        self.params = params if params is not None else self._init_params()

    def _init_params(self) -> dict[str, np.ndarray]:
        cfg = self.cfg
        rng = Rng(cfg.seed)
        d, v = cfg.width, cfg.vocab_size
        p: dict[str, np.ndarray] = {
            "wte": rng.normal(v, d, 0.1),
            "wpe": rng.normal(cfg.context, d, 0.1),
        }
        for l in range(cfg.layers):
            pre = f"block{l}."
            for name in ("wq", "wk", "wv", "wo"):
                p[pre + name] = rng.normal(d, d, 1.0 / np.sqrt(d))
            for name in ("bq", "bk", "bv", "bo"):
                p[pre + name] = np.zeros((1, d))
            p[pre + "ln1_g"] = np.ones((1, d))
            p[pre + "ln1_b"] = np.zeros((1, d))
            p[pre + "ln2_g"] = np.ones((1, d))
            p[pre + "ln2_b"] = np.zeros((1, d))
            p[pre + "w1"] = rng.normal(d, 4 * d, 1.0 / np.sqrt(d))
            p[pre + "b1"] = np.zeros((1, 4 * d))
            p[pre + "w2"] = rng.normal(4 * d, d, 1.0 / np.sqrt(4 * d))
            p[pre + "b2"] = np.zeros((1, d))
        p["lnf_g"] = np.ones((1, d))
        p["lnf_b"] = np.zeros((1, d))
        p["w_out"] = rng.normal(d, v, 1.0 / np.sqrt(d))
        return p

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def embed_rows(self, ids) -> np.ndarray:
        """Plain embedding lookup for an arbitrary id sequence."""
        return self.params["wte"][np.asarray(ids, dtype=np.intp)]

    def accumulate_embed_grad(self, ids, upstream: np.ndarray, grads: dict) -> None:
        """Route a gradient at an embedding lookup back into the table."""
        np.add.at(grads["wte"], np.asarray(ids, dtype=np.intp), upstream)

    def head_forward(self, h: np.ndarray) -> np.ndarray:
        return h @ self.params["w_out"]

    def head_backward(self, h: np.ndarray, d_logits: np.ndarray, grads: dict | None):
        """Returns d(h); accumulates into grads['w_out'] unless grads is None (frozen)."""
        if grads is not None:
            grads["w_out"] += h.T @ d_logits
        return d_logits @ self.params["w_out"].T

    def forward(self, tokens) -> ForwardTrace:
        ids = tuple(tokens.ids) if isinstance(tokens, TokenSeq) else tuple(int(t) for t in tokens)
        n = len(ids)
        if n == 0:
            raise UsageError("cannot run forward on an empty sequence")
        if n > self.cfg.context:
            raise UsageError(f"sequence length {n} exceeds context {self.cfg.context}")
        self.forward_calls += 1
        p = self.params
        d, nh = self.cfg.width, self.cfg.heads
        hd = d // nh
        idx = np.asarray(ids, dtype=np.intp)

        E = p["wte"][idx]
        x = E + p["wpe"][:n]
        mask = np.where(np.arange(n)[:, None] < np.arange(n)[None, :], _NEG_INF, 0.0)

        caches: dict = {"layers": []}
        for l in range(self.cfg.layers):
            pre = f"block{l}."
            a_in, ln1_cache = _ln_forward(x, p[pre + "ln1_g"], p[pre + "ln1_b"])
            q = a_in @ p[pre + "wq"] + p[pre + "bq"]
            k = a_in @ p[pre + "wk"] + p[pre + "bk"]
            v = a_in @ p[pre + "wv"] + p[pre + "bv"]
            q3 = q.reshape(n, nh, hd).transpose(1, 0, 2)
            k3 = k.reshape(n, nh, hd).transpose(1, 0, 2)
            v3 = v.reshape(n, nh, hd).transpose(1, 0, 2)
            scores = q3 @ k3.transpose(0, 2, 1) / np.sqrt(hd) + mask
            att = _softmax_last(scores)
            o3 = att @ v3
            o = o3.transpose(1, 0, 2).reshape(n, d)
            attn_out = o @ p[pre + "wo"] + p[pre + "bo"]
            x_mid = x + attn_out

            m_in, ln2_cache = _ln_forward(x_mid, p[pre + "ln2_g"], p[pre + "ln2_b"])
            u = m_in @ p[pre + "w1"] + p[pre + "b1"]
            act = gelu(u)
            m_out = act @ p[pre + "w2"] + p[pre + "b2"]
            x_next = x_mid + m_out

            caches["layers"].append(
                dict(a_in=a_in, ln1=ln1_cache, q3=q3, k3=k3, v3=v3, att=att, o=o,
                     m_in=m_in, ln2=ln2_cache, u=u, act=act)
            )
            x = x_next

        H, lnf_cache = _ln_forward(x, p["lnf_g"], p["lnf_b"])
        logits = H @ p["w_out"]
        caches["lnf"] = lnf_cache
        ensure_finite(logits, "logits")
        return ForwardTrace(ids=ids, embeddings=E, hidden=H, logits=logits, caches=caches)

    def backward(
        self,
        trace: ForwardTrace,
        d_logits: np.ndarray | None = None,
        d_hidden: np.ndarray | None = None,
        d_embed: np.ndarray | None = None,
        grads: dict[str, np.ndarray] | None = None,
    ) -> tuple[dict[str, np.ndarray], np.ndarray]:
        """Accumulate gradients from up to three injection points.

        Any combination of ``d_logits`` (n x vocab), ``d_hidden`` (n x d)
        and ``d_embed`` (n x d) may be supplied; missing ones count as
        zero.  Returns ``(grads, d_embedding_rows)`` where the second
        element is the total gradient at the embedding-lookup output.
        """
        p = self.params
        n = len(trace.ids)
        d, nh = self.cfg.width, self.cfg.heads
        hd = d // nh
        if grads is None:
            grads = self.zero_grads()

        def check(name, arr, cols):
            if arr is None:
                return np.zeros((n, cols))
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != (n, cols):
                raise UsageError(f"{name}: expected shape {(n, cols)}, got {arr.shape}")
            return arr

        dlog = check("d_logits", d_logits, self.cfg.vocab_size)
        dhid = check("d_hidden", d_hidden, d)
        demb = check("d_embed", d_embed, d)

        grads["w_out"] += trace.hidden.T @ dlog
        dH = dlog @ p["w_out"].T + dhid
        dx, dg, db = _ln_backward(dH, trace.caches["lnf"], p["lnf_g"])
        grads["lnf_g"] += dg
        grads["lnf_b"] += db

        for l in reversed(range(self.cfg.layers)):
            pre = f"block{l}."
            c = trace.caches["layers"][l]

            # MLP branch
            dm_out = dx
            grads[pre + "w2"] += c["act"].T @ dm_out
            grads[pre + "b2"] += dm_out.sum(axis=0, keepdims=True)
            dact = dm_out @ p[pre + "w2"].T
            du = dact * gelu_grad(c["u"])
            grads[pre + "w1"] += c["m_in"].T @ du
            grads[pre + "b1"] += du.sum(axis=0, keepdims=True)
            dm_in = du @ p[pre + "w1"].T
            dx_mid_branch, dg, db = _ln_backward(dm_in, c["ln2"], p[pre + "ln2_g"])
            grads[pre + "ln2_g"] += dg
            grads[pre + "ln2_b"] += db
            dx = dx + dx_mid_branch

            # attention branch
            dattn_out = dx
            grads[pre + "wo"] += c["o"].T @ dattn_out
            grads[pre + "bo"] += dattn_out.sum(axis=0, keepdims=True)
            do = dattn_out @ p[pre + "wo"].T
            do3 = do.reshape(n, nh, hd).transpose(1, 0, 2)
            datt = do3 @ c["v3"].transpose(0, 2, 1)
            dv3 = c["att"].transpose(0, 2, 1) @ do3
            att = c["att"]
            dscores = att * (datt - (datt * att).sum(axis=-1, keepdims=True))
            dq3 = dscores @ c["k3"] / np.sqrt(hd)
            dk3 = dscores.transpose(0, 2, 1) @ c["q3"] / np.sqrt(hd)
            dq = dq3.transpose(1, 0, 2).reshape(n, d)
            dk = dk3.transpose(1, 0, 2).reshape(n, d)
            dv = dv3.transpose(1, 0, 2).reshape(n, d)
            a_in = c["a_in"]
            grads[pre + "wq"] += a_in.T @ dq
            grads[pre + "bq"] += dq.sum(axis=0, keepdims=True)
            grads[pre + "wk"] += a_in.T @ dk
            grads[pre + "bk"] += dk.sum(axis=0, keepdims=True)
            grads[pre + "wv"] += a_in.T @ dv
            grads[pre + "bv"] += dv.sum(axis=0, keepdims=True)
            da_in = dq @ p[pre + "wq"].T + dk @ p[pre + "wk"].T + dv @ p[pre + "wv"].T
            dx_branch, dg, db = _ln_backward(da_in, c["ln1"], p[pre + "ln1_g"])
            grads[pre + "ln1_g"] += dg
            grads[pre + "ln1_b"] += db
            dx = dx + dx_branch

        grads["wpe"][:n] += dx
        d_embed_rows = dx + demb
        self.accumulate_embed_grad(trace.ids, d_embed_rows, grads)
        return grads, d_embed_rows

    def generate(
        self,
        prompt,
        max_new: int,
        rng: Rng,
        temperature: float = 1.0,
        top_p: float = 1.0,
    ) -> tuple[int, ...]:
        """Ancestral sampling with nucleus filtering; stops at eos."""
        ids = list(prompt.ids) if isinstance(prompt, TokenSeq) else [int(t) for t in prompt]
        if len(ids) + 1 > self.cfg.context:
            raise UsageError("prompt leaves no room for a new token")
        if temperature <= 0:
            raise UsageError("temperature must be positive")
        for _ in range(max_new):
            trace = self.forward(ids)
            z = trace.logits[-1] / temperature
            z = z - z.max()
            probs = np.exp(z)
            probs /= probs.sum()
            order = np.argsort(-probs, kind="stable")
            csum = np.cumsum(probs[order])
            keep = int(np.searchsorted(csum, top_p) + 1)
            kept = order[:keep]
            kp = probs[kept] / probs[kept].sum()
            r = rng.uniform()
            nxt = int(kept[min(np.searchsorted(np.cumsum(kp), r), keep - 1)])
            ids.append(nxt)
            if nxt == EOS or len(ids) >= self.cfg.context:
                break
        return tuple(ids)


def save_checkpoint(path, cfg: LmConfig, params: dict[str, np.ndarray],
                    extra: dict[str, np.ndarray] | None = None) -> None:
    """Config header + one grid record per tensor, with a name/offset manifest.

    ``extra`` tensors (e.g. projector parameters bundled with a student)
    are stored under the reserved ``proj/`` namespace untouched; callers
    pass them already namespaced.
    """
    tensors = dict(params)
    if extra:
        overlap = set(tensors) & set(extra)
        if overlap:
            raise UsageError(f"extra tensors collide with params: {sorted(overlap)}")
        tensors.update(extra)
    names = sorted(tensors)
    blocks = []
    offset = 0
    manifest = []
    for name in names:
        g = np.ascontiguousarray(tensors[name], dtype="<f8")
        if g.ndim != 2:
            raise UsageError(f"tensor {name} is not 2-D")
        blob = GRID_MAGIC + struct.pack("<QQ", g.shape[0], g.shape[1]) + g.tobytes()
        manifest.append({"name": name, "offset": offset})
        blocks.append(blob)
        offset += len(blob)
    header = json.dumps(
        {"config": cfg.to_dict(), "tensors": manifest}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blocks:
            fh.write(blob)


def load_checkpoint(path) -> tuple[LmConfig, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise UsageError(f"{path}: not a checkpoint (bad magic)")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        base = fh.tell()
        tensors = {}
        for entry in header["tensors"]:
            fh.seek(base + entry["offset"])
            if fh.read(len(GRID_MAGIC)) != GRID_MAGIC:
                raise NumericError(f"{path}: corrupt tensor block {entry['name']}")
            rows, cols = struct.unpack("<QQ", fh.read(16))
            data = np.frombuffer(fh.read(rows * cols * 8), dtype="<f8")
            tensors[entry["name"]] = data.reshape(rows, cols).astype(np.float64)
    cfg = LmConfig(**header["config"])
    return cfg, tensors


def split_checkpoint_tensors(tensors: dict[str, np.ndarray]):
    """Separate model parameters from the reserved projector namespace."""
    params = {k: v for k, v in tensors.items() if not k.startswith("proj/")}
    extra = {k: v for k, v in tensors.items() if k.startswith("proj/")}
    return params, extra
