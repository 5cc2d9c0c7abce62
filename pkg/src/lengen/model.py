"""Toy encoder-only transformer in numpy with hand-written backward passes.

Pre-LN blocks, multi-head attention with pairwise positional vectors added to
the keys, GELU feed-forward, per-position classification over the vocabulary.
Shapes: B batch, T sequence, D model dim, H heads, dh = D / H.
"""

from __future__ import annotations

import io
import json
import logging
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import posenc
from .datagen import VOCAB, Sample, Vocab
from .posenc import PEScheme

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    layers: int = 2
    heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    vocab_size: int = len(VOCAB)
    max_len: int = 64
    pe: PEScheme = field(default_factory=PEScheme)
    dropout: float = 0.0
    init_std: float = 0.02
    pe_init_std: float = 0.02

    def __post_init__(self):
        if isinstance(self.pe, dict):
            self.pe = PEScheme(**self.pe)
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pe"] = self.pe.to_dict()
        return d


PRESETS = {
    "toy": dict(layers=2, heads=4, d_model=64, d_ff=256),
    "paper_add": dict(layers=6, heads=8, d_model=768, d_ff=3072, dropout=0.1),
    "paper_mul3": dict(layers=9, heads=8, d_model=768, d_ff=3072, dropout=0.1),
}


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    D, F, V = cfg.d_model, cfg.d_ff, cfg.vocab_size

    def normal(*shape, std=cfg.init_std):
        return rng.normal(0.0, std, size=shape)

    p = {"emb": normal(V, D, std=1.0)}
    if cfg.pe.variant == "ape":
        p["ape"] = normal(cfg.max_len, D, std=1.0)
    if cfg.pe.pairwise:
        n_tables = cfg.layers if cfg.pe.per_layer else 1
        for t in range(n_tables):
            p[_pe_name(cfg, t)] = normal(cfg.pe.n_slots, cfg.d_head, std=cfg.pe_init_std)
    for l in range(cfg.layers):
        pre = f"l{l}."
        p[pre + "ln1.g"] = np.ones(D)
        p[pre + "ln1.b"] = np.zeros(D)
        for name in ("q", "k", "v", "o"):
            p[pre + "w" + name] = normal(D, D, std=1.0 / np.sqrt(D))
            p[pre + "b" + name] = np.zeros(D)
        p[pre + "ln2.g"] = np.ones(D)
        p[pre + "ln2.b"] = np.zeros(D)
        p[pre + "w1"] = normal(D, F, std=1.0 / np.sqrt(D))
        p[pre + "b1"] = np.zeros(F)
        p[pre + "w2"] = normal(F, D, std=1.0 / np.sqrt(F))
        p[pre + "b2"] = np.zeros(D)
    p["lnf.g"] = np.ones(D)
    p["lnf.b"] = np.zeros(D)
    p["head.w"] = normal(D, V, std=1.0 / np.sqrt(D))
    p["head.b"] = np.zeros(V)
    return p


def _pe_name(cfg: ModelConfig, layer: int) -> str:
    return f"pe.{layer}" if cfg.pe.per_layer else "pe"


def ape_vector(params: dict, i: int) -> np.ndarray:
    table = params["ape"]
    if not 0 <= i < len(table):
        raise IndexError(f"position {i} outside APE table of size {len(table)}")
    return table[i]


# ---------------------------------------------------------------- primitives


def layer_norm(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return xhat * g + b, (xhat, inv, g)


def layer_norm_backward(dy, cache):
    xhat, inv, g = cache
    axes = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(axes)
    db = dy.sum(axes)
    gh = dy * g
    dx = inv * (gh - gh.mean(-1, keepdims=True) - xhat * (gh * xhat).mean(-1, keepdims=True))
    return dx, dg, db


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x):
    u = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_backward(dy, cache):
    x, t = cache
    du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _dropout(x, rate, rng):
    if rate <= 0.0 or rng is None:
        return x, None
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep, keep


# ---------------------------------------------------------------- batches


@dataclass
class Batch:
    ids: np.ndarray  # (B, T)
    targets: np.ndarray  # (B, T)
    mask: np.ndarray  # (B, T) supervised positions
    slots: np.ndarray | None = None  # (T, T) or (B, T, T)
    key_mask: np.ndarray | None = None  # (B, T) False for padding keys
    metas: list = field(default_factory=list)
    _onehot: np.ndarray | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.ids)

    def onehot(self, n_slots: int) -> np.ndarray:
        if self._onehot is None or self._onehot.shape[-1] != n_slots:
            self._onehot = slot_onehot(self.slots, n_slots)
        return self._onehot


def make_batch(samples: Sequence[Sample], scheme: PEScheme, vocab: Vocab = VOCAB) -> Batch:
    T = max(len(s) for s in samples)
    B = len(samples)
    ids = np.full((B, T), vocab.PAD, dtype=np.int64)
    tgt = np.full((B, T), vocab.IGNORE, dtype=np.int64)
    mask = np.zeros((B, T), dtype=bool)
    key_mask = np.zeros((B, T), dtype=bool)
    for r, s in enumerate(samples):
        n = len(s)
        ids[r, :n] = s.input_ids
        tgt[r, :n] = s.target_ids
        mask[r, :n] = s.mask
        key_mask[r, :n] = True
    metas = [s.meta for s in samples]
    slots = posenc.batch_slots(scheme, T, metas) if scheme.pairwise else None
    return Batch(ids, tgt, mask, slots, None if key_mask.all() else key_mask, metas)


# ---------------------------------------------------------------- forward / backward


def _split(x, H):
    B, T, D = x.shape
    return x.reshape(B, T, H, D // H).transpose(0, 2, 1, 3)


def _merge(x):
    B, H, T, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, H * dh)


def slot_onehot(slots: np.ndarray, n_slots: int) -> np.ndarray:
    """(..., T, T, S) selector with a single 1 per valid (i, j); rows of -1 stay zero."""
    out = np.zeros(slots.shape + (n_slots,))
    valid = slots >= 0
    idx = np.nonzero(valid)
    out[idx + (slots[valid],)] = 1.0
    return out


def _pos_term(qt, O):
    # qt: (B, H, T, S) scores against every slot vector; O picks slot(i, j)
    B, H, T, S = qt.shape
    if O.ndim == 3:
        r = qt.transpose(2, 0, 1, 3).reshape(T, B * H, S) @ O.transpose(0, 2, 1)
        return r.reshape(T, B, H, T).transpose(1, 2, 0, 3)
    return (qt.transpose(0, 2, 1, 3) @ O.transpose(0, 1, 3, 2)).transpose(0, 2, 1, 3)


def _pos_term_backward(ds, O):
    B, H, T, _ = ds.shape
    if O.ndim == 3:
        r = ds.transpose(2, 0, 1, 3).reshape(T, B * H, T) @ O
        return r.reshape(T, B, H, -1).transpose(1, 2, 0, 3)
    return (ds.transpose(0, 2, 1, 3) @ O).transpose(0, 2, 1, 3)


def forward(params, cfg: ModelConfig, batch: Batch, train: bool = False, rng=None):
    """Per-position logits (B, T, V) and the cache needed by :func:`backward`."""
    ids = batch.ids
    B, T = ids.shape
    if T > cfg.max_len:
        raise ValueError(f"sequence length {T} exceeds max_len {cfg.max_len}")
    H, dh = cfg.heads, cfg.d_head
    scale = 1.0 / np.sqrt(dh)
    drop_rng = rng if (train and cfg.dropout > 0) else None

    x = params["emb"][ids]
    if cfg.pe.variant == "ape":
        x = x + params["ape"][:T]
    cache = {"layers": [], "attn": []}
    bias = None
    if batch.key_mask is not None:
        bias = np.where(batch.key_mask, 0.0, -1e30)[:, None, None, :]

    for l in range(cfg.layers):
        pre = f"l{l}."
        c = {}
        h, c["ln1"] = layer_norm(x, params[pre + "ln1.g"], params[pre + "ln1.b"])
        q = _split(h @ params[pre + "wq"] + params[pre + "bq"], H)
        k = _split(h @ params[pre + "wk"] + params[pre + "bk"], H)
        v = _split(h @ params[pre + "wv"] + params[pre + "bv"], H)
        s = q @ k.transpose(0, 1, 3, 2)
        if cfg.pe.pairwise:
            s = s + _pos_term(q @ params[_pe_name(cfg, l)].T, batch.onehot(cfg.pe.n_slots))
        s = s * scale
        if bias is not None:
            s = s + bias
        A = softmax(s)
        o = _merge(A @ v)
        att = o @ params[pre + "wo"] + params[pre + "bo"]
        att, c["drop1"] = _dropout(att, cfg.dropout, drop_rng)
        x = x + att
        h2, c["ln2"] = layer_norm(x, params[pre + "ln2.g"], params[pre + "ln2.b"])
        u = h2 @ params[pre + "w1"] + params[pre + "b1"]
        g, c["gelu"] = gelu(u)
        f = g @ params[pre + "w2"] + params[pre + "b2"]
        f, c["drop2"] = _dropout(f, cfg.dropout, drop_rng)
        x = x + f
        c.update(h=h, q=q, k=k, v=v, scores=s, A=A, o=o, h2=h2, g=g)
        cache["layers"].append(c)
        cache["attn"].append(A)

    hf, cache["lnf"] = layer_norm(x, params["lnf.g"], params["lnf.b"])
    logits = hf @ params["head.w"] + params["head.b"]
    cache["hf"] = hf
    return logits, cache


def loss_masked_ce(logits: np.ndarray, target: np.ndarray, mask: np.ndarray):
    """Mean cross-entropy over supervised positions; returns (loss, dlogits)."""
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("empty supervision mask")
    z = logits - logits.max(-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(-1, keepdims=True))
    tgt = np.where(mask, target, 0)
    picked = np.take_along_axis(logp, tgt[..., None], -1)[..., 0]
    loss = -(picked * mask).sum() / n
    d = np.exp(logp)
    np.put_along_axis(d, tgt[..., None], np.take_along_axis(d, tgt[..., None], -1) - 1.0, -1)
    d *= mask[..., None] / n
    return float(loss), d


def _wgrad(x, dy):
    return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])


def backward(params, cfg: ModelConfig, batch: Batch, cache, dlogits) -> dict[str, np.ndarray]:
    H = cfg.heads
    scale = 1.0 / np.sqrt(cfg.d_head)
    grads = {k: np.zeros_like(v) for k, v in params.items()}

    grads["head.w"] = _wgrad(cache["hf"], dlogits)
    grads["head.b"] = dlogits.sum((0, 1))
    dx, grads["lnf.g"], grads["lnf.b"] = layer_norm_backward(dlogits @ params["head.w"].T, cache["lnf"])

    for l in reversed(range(cfg.layers)):
        pre = f"l{l}."
        c = cache["layers"][l]
        # feed-forward
        df = dx if c["drop2"] is None else dx * c["drop2"]
        grads[pre + "w2"] = _wgrad(c["g"], df)
        grads[pre + "b2"] = df.sum((0, 1))
        du = gelu_backward(df @ params[pre + "w2"].T, c["gelu"])
        grads[pre + "w1"] = _wgrad(c["h2"], du)
        grads[pre + "b1"] = du.sum((0, 1))
        dh2, grads[pre + "ln2.g"], grads[pre + "ln2.b"] = layer_norm_backward(du @ params[pre + "w1"].T, c["ln2"])
        dx = dx + dh2
        # attention
        datt = dx if c["drop1"] is None else dx * c["drop1"]
        grads[pre + "wo"] = _wgrad(c["o"], datt)
        grads[pre + "bo"] = datt.sum((0, 1))
        do = _split(datt @ params[pre + "wo"].T, H)
        A, q, k, v = c["A"], c["q"], c["k"], c["v"]
        dA = do @ v.transpose(0, 1, 3, 2)
        dv = A.transpose(0, 1, 3, 2) @ do
        ds = A * (dA - (dA * A).sum(-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        if cfg.pe.pairwise:
            name = _pe_name(cfg, l)
            dqt = _pos_term_backward(ds, batch.onehot(cfg.pe.n_slots))
            dq = dq + dqt @ params[name]
            grads[name] += _wgrad(dqt, q)
        h = c["h"]
        dh = np.zeros_like(h)
        for name, dz in (("q", dq), ("k", dk), ("v", dv)):
            dz = _merge(dz)
            grads[pre + "w" + name] = _wgrad(h, dz)
            grads[pre + "b" + name] = dz.sum((0, 1))
            dh += dz @ params[pre + "w" + name].T
        dh1, grads[pre + "ln1.g"], grads[pre + "ln1.b"] = layer_norm_backward(dh, c["ln1"])
        dx = dx + dh1

    T = batch.ids.shape[1]
    if cfg.pe.variant == "ape":
        grads["ape"][:T] = dx.sum(0)
    np.add.at(grads["emb"], batch.ids.ravel(), dx.reshape(-1, dx.shape[-1]))
    return grads


def loss_and_grad(params, cfg: ModelConfig, batch: Batch, rng=None, train: bool = False):
    logits, cache = forward(params, cfg, batch, train=train, rng=rng)
    loss, dlogits = loss_masked_ce(logits, batch.targets, batch.mask)
    grads = backward(params, cfg, batch, cache, dlogits)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name}")
    return loss, grads


def grad(params, cfg: ModelConfig, batch: Batch) -> dict[str, np.ndarray]:
    return loss_and_grad(params, cfg, batch)[1]


# ---------------------------------------------------------------- optimiser


@dataclass
class AdamW:
    """Adam with decoupled weight decay applied after the adaptive step."""

    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.step_count += 1
        t = self.step_count
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1**t)
            vhat = v / (1 - b2**t)
            p -= lr * mhat / (np.sqrt(vhat) + self.eps)
            if self.weight_decay:
                p -= lr * self.weight_decay * p

    def state_dict(self) -> dict:
        return {"lr": self.lr, "betas": list(self.betas), "eps": self.eps,
                "weight_decay": self.weight_decay, "step_count": self.step_count}


def train_step(params, opt: AdamW, cfg: ModelConfig, batch: Batch, rng=None, lr: float | None = None) -> dict:
    loss, grads = loss_and_grad(params, cfg, batch, rng=rng, train=True)
    gnorm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    opt.step(params, grads, lr=lr)
    return {"loss": loss, "grad_norm": gnorm}


# ---------------------------------------------------------------- evaluation


def predict(params, cfg: ModelConfig, batch: Batch) -> np.ndarray:
    logits, _ = forward(params, cfg, batch)
    return logits.argmax(-1)


def predict_samples(params, cfg: ModelConfig, samples: Sequence[Sample], batch_size: int = 256) -> list[np.ndarray]:
    out = []
    for k in range(0, len(samples), batch_size):
        chunk = samples[k : k + batch_size]
        pred = predict(params, cfg, make_batch(chunk, cfg.pe))
        out.extend(pred[r, : len(s)] for r, s in enumerate(chunk))
    return out


def score_predictions(samples: Sequence[Sample], preds: Sequence[np.ndarray], mode: str = "exact") -> dict:
    """Exact-match, per-digit or complexity-bucketed accuracy of given predictions.

    Exact match requires every supervised position (PAD included) to be right.
    Per-digit accuracy is indexed by significance: key 1 is the last position.
    """
    if mode == "exact":
        hits = [bool(np.all(p[s.mask] == s.target_ids[s.mask])) for s, p in zip(samples, preds)]
        return {"exact_match": float(np.mean(hits)) if hits else float("nan"), "count": len(hits)}
    if mode == "per_digit":
        correct: dict[int, list[bool]] = {}
        for s, p in zip(samples, preds):
            pos = np.flatnonzero(s.mask)
            for rank, idx in enumerate(pos[::-1], start=1):
                correct.setdefault(rank, []).append(bool(p[idx] == s.target_ids[idx]))
        return {"per_digit": {r: float(np.mean(v)) for r, v in sorted(correct.items())},
                "count": len(samples)}
    if mode == "by_complexity":
        buckets: dict[int, list[bool]] = {}
        for s, p in zip(samples, preds):
            ok = bool(np.all(p[s.mask] == s.target_ids[s.mask]))
            buckets.setdefault(int(s.meta.get("complexity", -1)), []).append(ok)
        return {"by_complexity": {c: (float(np.mean(v)), len(v)) for c, v in sorted(buckets.items())},
                "count": len(samples)}
    raise ValueError(f"unknown evaluation mode {mode!r}")


def evaluate(params, cfg: ModelConfig, samples: Sequence[Sample], mode: str = "exact", vocab: Vocab = VOCAB) -> dict:
    if cfg.vocab_size != len(vocab):
        raise ValueError("model vocabulary size does not match dataset vocabulary")
    return score_predictions(samples, predict_samples(params, cfg, samples), mode)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, cfg: ModelConfig, params: dict, opt: AdamW | None = None, extra: dict | None = None) -> Path:
    """Single ``.npz`` holding config/optimiser JSON plus every tensor."""
    path = Path(path)
    header = {"version": CHECKPOINT_VERSION, "config": cfg.to_dict(),
              "optim": opt.state_dict() if opt else None, "extra": extra or {}}
    arrays = {"__header__": np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)}
    for k, v in params.items():
        arrays["p/" + k] = v
    if opt is not None:
        for k in opt.m:
            arrays["m/" + k] = opt.m[k]
            arrays["v/" + k] = opt.v[k]
    # fixed entry timestamps keep equal checkpoints byte-identical
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for k, v in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(v), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(k + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())
    return path


def load_checkpoint(path):
    with np.load(path) as z:
        header = json.loads(bytes(z["__header__"]).decode())
        if header["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header['version']}")
        cfg = ModelConfig(**header["config"])
        params = {k[2:]: z[k].copy() for k in z.files if k.startswith("p/")}
        opt = None
        if header["optim"] is not None:
            o = header["optim"]
            opt = AdamW(lr=o["lr"], betas=tuple(o["betas"]), eps=o["eps"],
                        weight_decay=o["weight_decay"], step_count=o["step_count"])
            opt.m = {k[2:]: z[k].copy() for k in z.files if k.startswith("m/")}
            opt.v = {k[2:]: z[k].copy() for k in z.files if k.startswith("v/")}
    return cfg, params, opt, header.get("extra", {})
