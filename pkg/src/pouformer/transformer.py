"""Forward evaluation of the encoder-only Transformer class.

The network maps one input vector ``x`` to a scalar:

    Z0 = (W_E x + b_E) e_1^T + PE                     (D x P)
    per block: multi-head attention, then a point-wise ReLU FFN
    output = readout . vec(Z_L)   (column-major)

Attention scores are ``Z^T K^T Q Z`` with a softmax over each column (keys
along rows).  There is no 1/sqrt(d_k) scaling, no residual path and no
normalisation layer.  Everything is evaluated in batches of inputs with shape
``(n, D, P)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .numeric_core import NumericError, check_finite, stable_softmax


@dataclass(eq=False)
class Head:
    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray


@dataclass(eq=False)
class Block:
    heads: list[Head]
    W_O: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @property
    def n_heads(self) -> int:
        return len(self.heads)

    @property
    def d_k(self) -> int:
        return self.heads[0].Q.shape[0]

    @property
    def d_v(self) -> int:
        return self.heads[0].V.shape[0]

    @property
    def d_ff(self) -> int:
        return self.W1.shape[0]


@dataclass(eq=False)
class TransformerParams:
    W_E: np.ndarray
    b_E: np.ndarray
    PE: np.ndarray
    blocks: list[Block]
    readout: np.ndarray

    def __post_init__(self):
        self.validate()

    @property
    def d(self) -> int:
        return self.W_E.shape[1]

    @property
    def D(self) -> int:
        return self.W_E.shape[0]

    @property
    def P(self) -> int:
        return self.PE.shape[1]

    @property
    def L(self) -> int:
        return len(self.blocks)

    def validate(self) -> None:
        D, P = self.W_E.shape[0], self.PE.shape[1]

        def need(arr, shape, name):
            if np.shape(arr) != shape:
                raise NumericError(f"{name} has shape {np.shape(arr)}, expected {shape}")

        need(self.b_E, (D,), "b_E")
        need(self.PE, (D, P), "PE")
        need(self.readout, (D * P,), "readout")
        for i, blk in enumerate(self.blocks):
            if not blk.heads:
                raise NumericError(f"block {i} has no heads")
            dk, dv = blk.d_k, blk.d_v
            for h, hd in enumerate(blk.heads):
                need(hd.Q, (dk, D), f"block {i} head {h} Q")
                need(hd.K, (dk, D), f"block {i} head {h} K")
                need(hd.V, (dv, D), f"block {i} head {h} V")
            need(blk.W_O, (D, blk.n_heads * dv), f"block {i} W_O")
            f = blk.d_ff
            need(blk.W1, (f, D), f"block {i} W1")
            need(blk.b1, (f,), f"block {i} b1")
            need(blk.W2, (D, f), f"block {i} W2")
            need(blk.b2, (D,), f"block {i} b2")
        for name, arr in self.named_tensors():
            check_finite(np.asarray(arr), name)

    def named_tensors(self):
        yield "W_E", self.W_E
        yield "b_E", self.b_E
        yield "PE", self.PE
        for i, blk in enumerate(self.blocks):
            for h, hd in enumerate(blk.heads):
                yield f"blocks.{i}.heads.{h}.Q", hd.Q
                yield f"blocks.{i}.heads.{h}.K", hd.K
                yield f"blocks.{i}.heads.{h}.V", hd.V
            yield f"blocks.{i}.W_O", blk.W_O
            yield f"blocks.{i}.W1", blk.W1
            yield f"blocks.{i}.b1", blk.b1
            yield f"blocks.{i}.W2", blk.W2
            yield f"blocks.{i}.b2", blk.b2
        yield "readout", self.readout

    def map_tensors(self, fn) -> "TransformerParams":
        """New params with ``fn(name, array)`` applied to every tensor."""
        blocks = []
        for i, blk in enumerate(self.blocks):
            heads = [Head(fn(f"blocks.{i}.heads.{h}.Q", hd.Q), fn(f"blocks.{i}.heads.{h}.K", hd.K),
                          fn(f"blocks.{i}.heads.{h}.V", hd.V)) for h, hd in enumerate(blk.heads)]
            blocks.append(Block(heads, fn(f"blocks.{i}.W_O", blk.W_O),
                                fn(f"blocks.{i}.W1", blk.W1), fn(f"blocks.{i}.b1", blk.b1),
                                fn(f"blocks.{i}.W2", blk.W2), fn(f"blocks.{i}.b2", blk.b2)))
        return TransformerParams(fn("W_E", self.W_E), fn("b_E", self.b_E), fn("PE", self.PE),
                                 blocks, fn("readout", self.readout))

    # -- serialisation -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "dims": {"d": self.d, "D": self.D, "P": self.P, "L": self.L},
            "embedding": {"W_E": self.W_E.tolist(), "b_E": self.b_E.tolist()},
            "positional": self.PE.tolist(),
            "blocks": [{
                "n_heads": b.n_heads, "d_k": b.d_k, "d_v": b.d_v, "d_ff": b.d_ff,
                "heads": [{"Q": h.Q.tolist(), "K": h.K.tolist(), "V": h.V.tolist()}
                          for h in b.heads],
                "W_O": b.W_O.tolist(),
                "ffn": {"W1": b.W1.tolist(), "b1": b.b1.tolist(),
                        "W2": b.W2.tolist(), "b2": b.b2.tolist()},
            } for b in self.blocks],
            "readout": self.readout.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TransformerParams":
        def arr(v, ndim):
            a = np.asarray(v, dtype=np.float64)
            if a.ndim != ndim:
                # Empty matrices serialise as [] and lose their inner dimension.
                a = a.reshape((0,) * ndim) if a.size == 0 else a
            return a

        try:
            blocks = []
            for b in d["blocks"]:
                heads = [Head(arr(h["Q"], 2), arr(h["K"], 2), arr(h["V"], 2)) for h in b["heads"]]
                if len(heads) != b.get("n_heads", len(heads)):
                    raise NumericError("n_heads does not match the stored heads")
                f = b["ffn"]
                blocks.append(Block(heads, arr(b["W_O"], 2), arr(f["W1"], 2), arr(f["b1"], 1),
                                    arr(f["W2"], 2), arr(f["b2"], 1)))
            params = cls(arr(d["embedding"]["W_E"], 2), arr(d["embedding"]["b_E"], 1),
                         arr(d["positional"], 2), blocks, arr(d["readout"], 1))
        except KeyError as exc:
            raise NumericError(f"params file is missing field {exc}") from None
        dims = d.get("dims", {})
        for key, val in (("d", params.d), ("D", params.D), ("P", params.P), ("L", params.L)):
            if key in dims and int(dims[key]) != val:
                raise NumericError(f"declared {key}={dims[key]} but tensors give {val}")
        return params

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> "TransformerParams":
        return cls.from_dict(json.loads(s))


@dataclass
class BlockTrace:
    mha_out: np.ndarray
    ffn_out: np.ndarray
    attention: list[np.ndarray] | None = None


@dataclass
class ActivationTrace:
    Z0: np.ndarray
    blocks: list[BlockTrace] = field(default_factory=list)
    output: float = float("nan")


# --------------------------------------------------------------------------
# Stages (all batched over a leading axis)
# --------------------------------------------------------------------------


def _as_batch(Z: np.ndarray) -> tuple[np.ndarray, bool]:
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim == 2:
        return Z[None], True
    if Z.ndim != 3:
        raise NumericError(f"expected a (D, P) or (n, D, P) array, got shape {Z.shape}")
    return Z, False


def preprocess(params: TransformerParams, x) -> np.ndarray:
    """``Z0 = (W_E x + b_E) e_1^T + PE`` for one input or a batch ``(n, d)``."""
    xs = np.asarray(x, dtype=np.float64)
    single = xs.ndim == 1
    xs = np.atleast_2d(xs)
    if xs.shape[1] != params.d:
        raise NumericError(f"input has dimension {xs.shape[1]}, network expects {params.d}")
    Z = np.broadcast_to(params.PE, (len(xs),) + params.PE.shape).copy()
    Z[:, :, 0] += xs @ params.W_E.T + params.b_E
    return Z[0] if single else Z


def attention_matrices(block: Block, Z) -> list[np.ndarray]:
    """Per-head ``A = softmax_col(Z^T K^T Q Z)``; each is ``(n, P, P)``."""
    Zb, single = _as_batch(Z)
    out = []
    for hd in block.heads:
        KZ = np.einsum("ad,ndp->nap", hd.K, Zb)
        QZ = np.einsum("ad,ndp->nap", hd.Q, Zb)
        # Scores laid out (query j, key k) so the softmax runs over the last axis.
        scores_t = np.matmul(QZ.transpose(0, 2, 1), KZ)
        A = stable_softmax(scores_t, axis=-1).transpose(0, 2, 1)
        out.append(A[0] if single else A)
    return out


def mha_forward(block: Block, Z, return_attention: bool = False):
    Zb, single = _as_batch(Z)
    if Zb.shape[1] != block.W_O.shape[0]:
        raise NumericError("embedding dimension does not match the attention block")
    As = attention_matrices(block, Zb)
    heads = [np.matmul(np.einsum("vd,ndk->nvk", hd.V, Zb), A) for hd, A in zip(block.heads, As)]
    stacked = np.concatenate(heads, axis=1)
    out = np.einsum("dc,ncj->ndj", block.W_O, stacked)
    if single:
        out = out[0]
        As = [A[0] for A in As]
    return (out, As) if return_attention else out


def ffn_forward(block: Block, Z) -> np.ndarray:
    """Column-wise ``W2 relu(W1 z + b1) + b2``."""
    Zb, single = _as_batch(Z)
    if Zb.shape[1] != block.W1.shape[1]:
        raise NumericError("embedding dimension does not match the FFN")
    hidden = np.einsum("fd,ndp->nfp", block.W1, Zb) + block.b1[None, :, None]
    np.maximum(hidden, 0.0, out=hidden)
    out = np.einsum("df,nfp->ndp", block.W2, hidden) + block.b2[None, :, None]
    return out[0] if single else out


def readout(params: TransformerParams, Z) -> np.ndarray:
    Zb, single = _as_batch(Z)
    # Column-major vec: entry (row i, column j) sits at index j * D + i.
    flat = np.transpose(Zb, (0, 2, 1)).reshape(len(Zb), -1)
    out = flat @ params.readout
    return out[0] if single else out


def forward(params: TransformerParams, x, trace_attention: bool = False):
    """Scalar output for one input and the full activation trace."""
    xs = np.asarray(x, dtype=np.float64)
    if xs.ndim != 1:
        raise NumericError("forward takes a single input vector; use forward_batch")
    Z = preprocess(params, xs)
    trace = ActivationTrace(Z0=Z.copy())
    for blk in params.blocks:
        Zh, As = mha_forward(blk, Z, return_attention=True)
        Z = ffn_forward(blk, Zh)
        trace.blocks.append(BlockTrace(Zh, Z, As if trace_attention else None))
    trace.output = float(readout(params, Z))
    return trace.output, trace


def forward_batch(params: TransformerParams, X, chunk: int | None = None) -> np.ndarray:
    """Outputs for every row of ``X``, processed in memory-bounded chunks."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if chunk is None:
        per_point = sum(b.n_heads for b in params.blocks) * params.P**2 + 1
        chunk = max(1, int(4e6 // per_point))
    out = np.empty(len(X))
    for s in range(0, len(X), chunk):
        Z = preprocess(params, X[s:s + chunk])
        for blk in params.blocks:
            Z = ffn_forward(blk, mha_forward(blk, Z))
        out[s:s + chunk] = readout(params, Z)
    return out


def count_params(params: TransformerParams) -> int:
    return int(sum(np.size(a) for _, a in params.named_tensors()))


def max_magnitude(params: TransformerParams) -> float:
    return float(max((np.max(np.abs(a)) for _, a in params.named_tensors() if np.size(a)),
                     default=0.0))
