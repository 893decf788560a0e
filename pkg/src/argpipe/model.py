"""Sparse feature vectors and the support-vector decision function.

All three classifiers (claim, evidence, link) share one model type: a
linear kernel evaluated against every stored support vector,

    f(x) = sum_i alphaY_i * <sv_i, x> + bias

Support vectors are kept explicitly rather than folded into one weight
vector, so scoring cost grows with the number of support vectors.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from . import _kernels
from .errors import ModelFormatError, ScoringError

if TYPE_CHECKING:
    from .textproc import StemDictionary

_IDX = np.int64
_VAL = np.float64


def _frozen(a):
    a.setflags(write=False)
    return a


class FeatureVector:
    """Sparse vector with strictly increasing indices and no stored zeros."""

    __slots__ = ("indices", "values", "dim_hint")

    def __init__(self, indices=(), values=(), dim_hint=0):
        idx = np.asarray(indices, dtype=_IDX).reshape(-1)
        val = np.asarray(values, dtype=_VAL).reshape(-1)
        if idx.shape != val.shape:
            raise ValueError("indices and values differ in length")
        if idx.size:
            if idx[0] < 0:
                raise ValueError("negative feature index")
            if np.any(np.diff(idx) <= 0):
                raise ValueError("feature indices must be strictly increasing")
            if not np.all(np.isfinite(val)):
                raise ValueError("feature values must be finite")
            nz = val != 0.0
            if not nz.all():
                idx, val = idx[nz], val[nz]
        if dim_hint < 0:
            raise ValueError("dim_hint must be non-negative")
        object.__setattr__(self, "indices", _frozen(idx.copy()))
        object.__setattr__(self, "values", _frozen(val.copy()))
        object.__setattr__(self, "dim_hint", int(dim_hint))

    def __setattr__(self, name, value):
        raise AttributeError("FeatureVector is immutable")

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[int, float]], dim_hint: int = 0) -> "FeatureVector":
        pairs = list(pairs)
        if not pairs:
            return cls((), (), dim_hint)
        idx, val = zip(*pairs)
        return cls(idx, val, dim_hint)

    @classmethod
    def from_dict(cls, d: dict, dim_hint: int = 0) -> "FeatureVector":
        return cls.from_pairs(sorted(d.items()), dim_hint)

    @property
    def entries(self) -> list[tuple[int, float]]:
        return list(zip(self.indices.tolist(), self.values.tolist()))

    @property
    def nnz(self) -> int:
        return int(self.indices.shape[0])

    def to_dense(self, dim: int) -> np.ndarray:
        out = np.zeros(dim, dtype=_VAL)
        out[self.indices] = self.values
        return out

    def shifted(self, offset: int) -> "FeatureVector":
        return FeatureVector(self.indices + offset, self.values, self.dim_hint + offset if self.dim_hint else 0)

    def __len__(self):
        return self.nnz

    def __eq__(self, other):
        if not isinstance(other, FeatureVector):
            return NotImplemented
        return (np.array_equal(self.indices, other.indices)
                and np.array_equal(self.values, other.values))

    def __hash__(self):
        return hash((self.indices.tobytes(), self.values.tobytes()))

    def __repr__(self):
        body = ", ".join(f"({i},{v:g})" for i, v in self.entries[:8])
        if self.nnz > 8:
            body += f", ... {self.nnz} entries"
        return f"FeatureVector({{{body}}})"

    def __reduce__(self):
        return (FeatureVector, (self.indices, self.values, self.dim_hint))


def dot(a: FeatureVector, b: FeatureVector) -> float:
    """Sparse dot product over shared indices."""
    if not a.nnz or not b.nnz:
        return 0.0
    common, ia, ib = np.intersect1d(a.indices, b.indices, assume_unique=True, return_indices=True)
    if not common.size:
        return 0.0
    return float(np.dot(a.values[ia], b.values[ib]))


def concat(claim: FeatureVector, evidence: FeatureVector, shift: int) -> FeatureVector:
    """Pair encoding: evidence indices move up by ``shift`` (the vocabulary size)."""
    if claim.nnz and claim.indices[-1] >= shift:
        raise ValueError(f"claim index {int(claim.indices[-1])} does not fit below shift {shift}")
    return FeatureVector(np.concatenate((claim.indices, evidence.indices + shift)),
                         np.concatenate((claim.values, evidence.values)),
                         2 * shift)


def pack_rows(vectors: Sequence[FeatureVector]):
    """Stack vectors into CSR arrays ``(ptr, idx, val)``."""
    n = len(vectors)
    ptr = np.zeros(n + 1, dtype=_IDX)
    if n:
        np.cumsum([v.nnz for v in vectors], out=ptr[1:])
        idx = np.concatenate([v.indices for v in vectors]) if ptr[-1] else np.zeros(0, _IDX)
        val = np.concatenate([v.values for v in vectors]) if ptr[-1] else np.zeros(0, _VAL)
    else:
        idx, val = np.zeros(0, _IDX), np.zeros(0, _VAL)
    return ptr, idx, val


@dataclass(frozen=True, eq=False)
class SvmModel:
    """Support vectors in CSR form plus a bias.

    ``dim_hint`` is the input dimensionality the model expects (0 when
    unknown). For a link model it is twice the vocabulary size.
    """

    name: str
    bias: float
    alpha_y: np.ndarray
    sv_ptr: np.ndarray
    sv_idx: np.ndarray
    sv_val: np.ndarray
    dim_hint: int = 0
    _checked: bool = field(default=False, repr=False)

    def __post_init__(self):
        if not self._checked:
            raise TypeError("build SvmModel with SvmModel.build()")

    @classmethod
    def build(cls, name: str, support_vectors: Sequence[tuple[float, FeatureVector]], bias: float,
              dim_hint: int = 0) -> "SvmModel":
        if not name or any(c.isspace() for c in name):
            raise ValueError(f"model name must be a non-empty token, got {name!r}")
        alpha = np.array([a for a, _ in support_vectors], dtype=_VAL)
        if not math.isfinite(bias) or not np.all(np.isfinite(alpha)):
            raise ValueError(f"model {name!r}: alphaY and bias must be finite")
        ptr, idx, val = pack_rows([v for _, v in support_vectors])
        return cls(name, float(bias), _frozen(alpha), _frozen(ptr), _frozen(idx), _frozen(val),
                   int(dim_hint), _checked=True)

    @property
    def num_support_vectors(self) -> int:
        return int(self.alpha_y.shape[0])

    @property
    def usable(self) -> bool:
        return self.num_support_vectors > 0

    @property
    def total_nnz(self) -> int:
        return int(self.sv_idx.shape[0])

    @property
    def max_index(self) -> int:
        return int(self.sv_idx.max()) if self.sv_idx.size else -1

    @property
    def support_vectors(self) -> list[tuple[float, FeatureVector]]:
        out = []
        for i in range(self.num_support_vectors):
            s, e = self.sv_ptr[i], self.sv_ptr[i + 1]
            out.append((float(self.alpha_y[i]), FeatureVector(self.sv_idx[s:e], self.sv_val[s:e])))
        return out

    def with_support_vectors(self, support_vectors, bias=None) -> "SvmModel":
        return SvmModel.build(self.name, support_vectors, self.bias if bias is None else bias, self.dim_hint)

    def __eq__(self, other):
        if not isinstance(other, SvmModel):
            return NotImplemented
        return (self.name == other.name and self.bias == other.bias and self.dim_hint == other.dim_hint
                and all(np.array_equal(getattr(self, f), getattr(other, f))
                        for f in ("alpha_y", "sv_ptr", "sv_idx", "sv_val")))

    __hash__ = None

    def __repr__(self):
        return f"SvmModel({self.name!r}, sv={self.num_support_vectors}, bias={self.bias:g})"


def _require_usable(model):
    if not model.usable:
        raise ScoringError(model.name, "unusable model (no support vectors)")


def _check_finite(model, scores):
    if not np.all(np.isfinite(scores)):
        raise ScoringError(model.name)
    return scores


def score_many(model: SvmModel, vectors: Sequence[FeatureVector]) -> np.ndarray:
    """Decision values for a batch of inputs in one kernel call."""
    _require_usable(model)
    ptr, idx, val = pack_rows(vectors)
    out = np.empty(len(vectors), dtype=_VAL)
    _kernels.score_rows(model.sv_ptr, model.sv_idx, model.sv_val, model.alpha_y, model.bias,
                        ptr, idx, val, out)
    return _check_finite(model, out)


def score(model: SvmModel, x: FeatureVector) -> float:
    return float(score_many(model, [x])[0])


def link_shift(model: SvmModel, vocab_size: int | None = None) -> int:
    if vocab_size is not None:
        return int(vocab_size)
    if model.dim_hint <= 0 or model.dim_hint % 2:
        raise ValueError(f"model {model.name!r} has no even dim_hint; pass vocab_size")
    return model.dim_hint // 2


def score_pairs_many(model: SvmModel, claims: Sequence[FeatureVector], evidence: Sequence[FeatureVector],
                     claim_ix, evid_ix, vocab_size: int | None = None) -> np.ndarray:
    """Link scores for ``(claims[claim_ix[k]], evidence[evid_ix[k]])`` pairs."""
    _require_usable(model)
    shift = link_shift(model, vocab_size)
    c_ptr, c_idx, c_val = pack_rows(claims)
    e_ptr, e_idx, e_val = pack_rows(evidence)
    if c_idx.size and c_idx.max() >= shift:
        raise ValueError(f"claim feature index {int(c_idx.max())} does not fit below shift {shift}")
    ci = np.asarray(claim_ix, dtype=_IDX)
    ei = np.asarray(evid_ix, dtype=_IDX)
    out = np.empty(ci.shape[0], dtype=_VAL)
    _kernels.score_pairs(model.sv_ptr, model.sv_idx, model.sv_val, model.alpha_y, model.bias,
                         c_ptr, c_idx, c_val, e_ptr, e_idx, e_val, ci, ei, shift, out)
    return _check_finite(model, out)


def score_pair(model: SvmModel, claim_fv: FeatureVector, evid_fv: FeatureVector,
               vocab_size: int | None = None) -> float:
    return float(score_pairs_many(model, [claim_fv], [evid_fv], [0], [0], vocab_size)[0])


# --------------------------------------------------------------------------
# text format


def _fmt(x: float) -> str:
    return repr(float(x))


def save_model(model: SvmModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_model(model))


def format_model(model: SvmModel) -> str:
    head = f"svm {model.name} {model.num_support_vectors} {_fmt(model.bias)}"
    if model.dim_hint:
        head += f" {model.dim_hint}"
    lines = [head]
    for i in range(model.num_support_vectors):
        s, e = model.sv_ptr[i], model.sv_ptr[i + 1]
        parts = [_fmt(model.alpha_y[i])]
        parts += [f"{int(j)}:{_fmt(v)}" for j, v in zip(model.sv_idx[s:e], model.sv_val[s:e])]
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


def _finite(tok, lineno, path):
    try:
        x = float(tok)
    except ValueError:
        raise ModelFormatError(f"not a number: {tok!r}", lineno, path) from None
    if not math.isfinite(x):
        raise ModelFormatError(f"non-finite number: {tok!r}", lineno, path)
    return x


def parse_model(text: str, path=None) -> SvmModel:
    header = None
    svs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        toks = line.split()
        if header is None:
            if toks[0] != "svm" or len(toks) not in (4, 5):
                raise ModelFormatError("expected header 'svm <name> <count> <bias> [dim]'", lineno, path)
            try:
                count = int(toks[2])
                dim = int(toks[4]) if len(toks) == 5 else 0
            except ValueError:
                raise ModelFormatError("bad integer in header", lineno, path) from None
            if count < 0 or dim < 0:
                raise ModelFormatError("negative count in header", lineno, path)
            header = (toks[1], count, _finite(toks[3], lineno, path), dim, lineno)
            continue
        alpha = _finite(toks[0], lineno, path)
        idx, val = [], []
        for tok in toks[1:]:
            i, sep, v = tok.partition(":")
            if not sep:
                raise ModelFormatError(f"expected idx:val, got {tok!r}", lineno, path)
            try:
                ii = int(i)
            except ValueError:
                raise ModelFormatError(f"bad feature index {i!r}", lineno, path) from None
            if ii < 0 or (idx and ii <= idx[-1]):
                raise ModelFormatError("feature indices must be non-negative and strictly increasing",
                                       lineno, path)
            idx.append(ii)
            val.append(_finite(v, lineno, path))
        svs.append((alpha, FeatureVector(idx, val)))
    if header is None:
        raise ModelFormatError("missing header", None, path)
    name, count, bias, dim, hline = header
    if not svs:
        raise ModelFormatError("unusable model: no support vectors", hline, path)
    if len(svs) != count:
        raise ModelFormatError(f"header declares {count} support vectors, found {len(svs)}", hline, path)
    return SvmModel.build(name, svs, bias, dim)


def load_model(path) -> SvmModel:
    with open(path, encoding="utf-8") as fh:
        return parse_model(fh.read(), os.fspath(path))


@dataclass(frozen=True)
class ModelBundle:
    claim: SvmModel
    evidence: SvmModel
    link: SvmModel
    dictionary: StemDictionary

    def __post_init__(self):
        for m in (self.claim, self.evidence, self.link):
            if not m.usable:
                raise ValueError(f"model {m.name!r} has no support vectors")
        if self.link.dim_hint < 2 * self.dictionary.size:
            raise ValueError(f"link model dim_hint {self.link.dim_hint} < 2 x vocabulary {self.dictionary.size}")

    @property
    def vocab_size(self) -> int:
        return self.dictionary.size
