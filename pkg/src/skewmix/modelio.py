"""Plain-text model files.

A file holds one mixture or one partitioned model (full, non-bone and bone
mixtures plus the partition spec). Layout::

    skewmix-model
    format_version 1
    kind partitioned
    train_nonbone -1024.0 200.0 open open
    train_bone 100.0 3071.0 open closed
    predict_threshold 100.0
    begin mixture full
    variant skew
    K 2
    d 5
    info seed int 7
    weight 0 0.4
    location 0 ...
    dispersion 0
    ... d rows ...
    skewness 0 ...
    end mixture

Floats are written with ``repr`` so a save/load roundtrip is exact.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .dataio import HUInterval
from .errors import ModelFileError
from .mixture import MixtureModel
from .predictor import PartitionedModel, PartitionSpec
from .skewnormal import SkewNormalParams

__all__ = ["FORMAT_VERSION", "MAGIC", "dumps", "loads", "save_model", "load_model"]

MAGIC = "skewmix-model"
FORMAT_VERSION = 1
_PARTS = ("full", "nonbone", "bone")


def _f(x):
    return repr(float(x))


def _vec(v):
    return " ".join(_f(x) for x in np.asarray(v).ravel())


def _info_line(key, value):
    if any(c.isspace() for c in str(key)):
        raise ModelFileError(f"info key {key!r} contains whitespace")
    if isinstance(value, (bool, np.bool_)):
        return f"info {key} bool {'true' if value else 'false'}"
    if isinstance(value, (int, np.integer)):
        return f"info {key} int {int(value)}"
    if isinstance(value, (float, np.floating)):
        return f"info {key} float {_f(value)}"
    text = str(value)
    if "\n" in text:
        raise ModelFileError(f"info value for {key!r} spans lines")
    return f"info {key} str {text}"


def _mixture_lines(name, model):
    out = [f"begin mixture {name}", f"variant {model.variant}", f"K {model.K}", f"d {model.d}"]
    out += [_info_line(k, model.fit_info[k]) for k in sorted(model.fit_info)]
    for k, (w, c) in enumerate(zip(model.weights, model.components)):
        out.append(f"weight {k} {_f(w)}")
        out.append(f"location {k} {_vec(c.location)}")
        out.append(f"dispersion {k}")
        out += [_vec(row) for row in c.dispersion]
        out.append(f"skewness {k} {_vec(c.skewness)}")
    out.append("end mixture")
    return out


def _interval_line(key, iv):
    return (
        f"{key} {_f(iv.lo)} {_f(iv.hi)} "
        f"{'closed' if iv.lo_closed else 'open'} {'closed' if iv.hi_closed else 'open'}"
    )


def dumps(model):
    """Serialize a MixtureModel or PartitionedModel to text."""
    lines = [MAGIC, f"format_version {FORMAT_VERSION}"]
    if isinstance(model, MixtureModel):
        lines.append("kind mixture")
        lines += _mixture_lines("model", model)
    elif isinstance(model, PartitionedModel):
        spec = model.spec
        lines.append("kind partitioned")
        lines.append(_interval_line("train_nonbone", spec.train_nonbone))
        lines.append(_interval_line("train_bone", spec.train_bone))
        lines.append(f"predict_threshold {_f(spec.predict_threshold)}")
        for name in _PARTS:
            lines += _mixture_lines(name, getattr(model, name))
    else:
        raise ModelFileError(f"cannot serialize {type(model).__name__}")
    return "\n".join(lines) + "\n"


class _Reader:
    def __init__(self, text):
        self.lines = text.splitlines()
        self.pos = 0

    def error(self, msg):
        return ModelFileError(f"line {self.pos}: {msg}")

    def next(self):
        while self.pos < len(self.lines):
            self.pos += 1
            line = self.lines[self.pos - 1].strip()
            if line and not line.startswith("#"):
                return line.split()
        raise self.error("unexpected end of file")

    def expect(self, key, nargs=None):
        tok = self.next()
        if tok[0] != key or (nargs is not None and len(tok) - 1 != nargs):
            want = key if nargs is None else f"{key} with {nargs} value(s)"
            raise self.error(f"expected {want}, got {' '.join(tok)!r}")
        return tok[1:]

    def floats(self, toks, n=None):
        if n is not None and len(toks) != n:
            raise self.error(f"expected {n} numbers, got {len(toks)}")
        try:
            vals = np.array([float(t) for t in toks])
        except ValueError:
            raise self.error(f"bad number in {' '.join(toks)!r}") from None
        if not np.all(np.isfinite(vals)):
            raise self.error("non-finite parameter")
        return vals

    def integer(self, tok):
        try:
            return int(tok)
        except ValueError:
            raise self.error(f"expected an integer, got {tok!r}") from None


def _parse_info(r, toks):
    if len(toks) < 2:
        raise r.error("malformed info line")
    key, typ, rest = toks[0], toks[1], toks[2:]
    if typ == "str":
        return key, " ".join(rest)
    if len(rest) != 1:
        raise r.error("malformed info line")
    if typ == "int":
        return key, r.integer(rest[0])
    if typ == "float":
        try:
            return key, float(rest[0])
        except ValueError:
            raise r.error(f"bad float {rest[0]!r}") from None
    if typ == "bool" and rest[0] in ("true", "false"):
        return key, rest[0] == "true"
    raise r.error(f"unknown info type {typ!r}")


def _read_mixture(r, name):
    got = r.expect("begin", 2)
    if got != ["mixture", name]:
        raise r.error(f"expected 'begin mixture {name}'")
    (variant,) = r.expect("variant", 1)
    K = r.integer(r.expect("K", 1)[0])
    d = r.integer(r.expect("d", 1)[0])
    if K < 1 or d < 1:
        raise r.error("K and d must be positive")
    info = {}
    tok = r.next()
    while tok[0] == "info":
        key, value = _parse_info(r, tok[1:])
        info[key] = value
        tok = r.next()
    weights, comps = [], []
    for k in range(K):
        if tok[:2] != ["weight", str(k)]:
            raise r.error(f"expected 'weight {k}'")
        weights.append(r.floats(tok[2:], 1)[0])
        loc = r.floats(r.expect("location")[1:], d)
        r.expect("dispersion", 1)
        disp = np.array([r.floats(r.next(), d) for _ in range(d)])
        skew = r.floats(r.expect("skewness")[1:], d)
        comps.append(SkewNormalParams(loc, disp, skew))
        tok = r.next() if k < K - 1 else None
    if r.expect("end", 1) != ["mixture"]:
        raise r.error("expected 'end mixture'")
    return MixtureModel(variant, np.array(weights), tuple(comps), info)


def _read_interval(r, key):
    toks = r.expect(key, 4)
    lo, hi = r.floats(toks[:2])
    if toks[2] not in ("open", "closed") or toks[3] not in ("open", "closed"):
        raise r.error("interval ends must be 'open' or 'closed'")
    return HUInterval(lo, hi, toks[2] == "closed", toks[3] == "closed")


def loads(text):
    """Parse a model file; refuses files written by a newer format version."""
    r = _Reader(text)
    if r.next() != [MAGIC]:
        raise r.error("not a skewmix model file")
    version = r.integer(r.expect("format_version", 1)[0])
    if version > FORMAT_VERSION:
        raise r.error(
            f"format version {version} is newer than supported version {FORMAT_VERSION}"
        )
    if version < 1:
        raise r.error(f"invalid format version {version}")
    (kind,) = r.expect("kind", 1)
    try:
        if kind == "mixture":
            return _read_mixture(r, "model")
        if kind == "partitioned":
            spec = PartitionSpec(
                _read_interval(r, "train_nonbone"),
                _read_interval(r, "train_bone"),
                r.floats(r.expect("predict_threshold", 1), 1)[0],
            )
            parts = [_read_mixture(r, name) for name in _PARTS]
            return PartitionedModel(*parts, spec)
    except ModelFileError:
        raise
    except (ValueError, ArithmeticError) as err:
        raise r.error(f"invalid model parameters: {err}") from None
    raise r.error(f"unknown model kind {kind!r}")


def save_model(path, model):
    """Write ``model`` atomically; identical models give identical bytes."""
    path = Path(path)
    text = dumps(model)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)
    return path


def load_model(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ModelFileError(f"model file not found: {path}") from None
    except OSError as err:
        raise ModelFileError(f"cannot read model file {path}: {err}") from None
    return loads(text)
