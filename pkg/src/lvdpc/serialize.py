"""Line-oriented text format for circuits, plus atomic file writes.

::

    PC v1 <num_vars> <num_roots>
    <domain size>                       # one line per variable
    <id> I <var> <p0> <p1> ...          # input unit
    <id> P <child ids...>               # product unit
    <id> S <child id>:<weight> ...      # sum unit
    ROOTS <ids...>

Units appear children-first. Reals are written with 17 significant digits,
which round-trips IEEE doubles exactly.
"""
from __future__ import annotations

import os
import tempfile

import numpy as np

from .circuit import NORMALIZATION_TOL, Circuit, CircuitBuilder
from .errors import CircuitError, ParseError

MAGIC = "PC"
VERSION = "v1"


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def serialize(circuit: Circuit) -> bytes:
    lines = [f"{MAGIC} {VERSION} {circuit.num_vars} {circuit.num_heads}"]
    lines.extend(str(d) for d in circuit.domains)
    for u in range(circuit.num_units):
        k = circuit.kinds[u]
        if k == 0:
            probs = " ".join(_fmt(p) for p in circuit.probs(u))
            lines.append(f"{u} I {circuit.var(u)} {probs}")
        elif k == 2:
            lines.append(f"{u} P " + " ".join(str(c) for c in circuit.children(u)))
        else:
            edges = " ".join(f"{c}:{_fmt(w)}" for c, w in zip(circuit.children(u), circuit.weights(u)))
            lines.append(f"{u} S {edges}")
    lines.append("ROOTS " + " ".join(str(r) for r in circuit.roots))
    return ("\n".join(lines) + "\n").encode("ascii")


def _lines(data: bytes):
    offset = 0
    for lineno, raw in enumerate(data.splitlines(keepends=True), start=1):
        text = raw.decode("ascii", errors="replace").strip()
        start = offset
        offset += len(raw)
        if text:
            yield lineno, start, text


def deserialize(data: bytes | str) -> Circuit:
    if isinstance(data, str):
        data = data.encode("ascii")
    it = _lines(data)

    def fail(msg, lineno=None, offset=None):
        raise ParseError(msg, offset=offset if offset is not None else len(data), line=lineno)

    try:
        lineno, off, header = next(it)
    except StopIteration:
        fail("empty circuit stream", 0, 0)
    parts = header.split()
    if len(parts) != 4 or parts[0] != MAGIC or parts[1] != VERSION:
        fail(f"bad header {header!r}", lineno, off)
    try:
        num_vars, num_roots = int(parts[2]), int(parts[3])
    except ValueError:
        fail(f"bad header {header!r}", lineno, off)
    if num_vars < 0 or num_roots < 1:
        fail("circuit must declare at least one root", lineno, off)

    domains = []
    for _ in range(num_vars):
        try:
            lineno, off, text = next(it)
            d = int(text)
        except StopIteration:
            fail("truncated domain section")
        except ValueError:
            fail(f"bad domain size {text!r}", lineno, off)
        if d < 1:
            fail(f"domain size must be positive, got {d}", lineno, off)
        domains.append(d)

    b = CircuitBuilder(domains)
    id_map: dict[int, int] = {}
    roots = None
    for lineno, off, text in it:
        if roots is not None:
            fail("content after ROOTS footer", lineno, off)
        parts = text.split()
        if parts[0] == "ROOTS":
            try:
                roots = [id_map[int(t)] for t in parts[1:]]
            except (KeyError, ValueError):
                fail("ROOTS names an undefined unit", lineno, off)
            if not roots:
                fail("circuit has no roots", lineno, off)
            if len(roots) != num_roots:
                fail(f"header declares {num_roots} roots, footer lists {len(roots)}", lineno, off)
            continue
        if len(parts) < 3:
            fail(f"truncated unit line {text!r}", lineno, off)
        try:
            uid = int(parts[0])
        except ValueError:
            fail(f"bad unit id {parts[0]!r}", lineno, off)
        if uid in id_map:
            fail(f"duplicate unit id {uid}", lineno, off)
        kind = parts[1]
        try:
            if kind == "I":
                var = int(parts[2])
                if not 0 <= var < num_vars:
                    fail(f"input unit {uid} refers to undeclared variable {var}", lineno, off)
                probs = np.array([float(t) for t in parts[3:]])
                if len(probs) != domains[var]:
                    fail(f"input unit {uid} has {len(probs)} entries for a domain of {domains[var]}", lineno, off)
                _check_distribution("input unit", uid, probs, lineno, off)
                id_map[uid] = b.input(var, probs)
            elif kind == "P":
                id_map[uid] = b.product(id_map[int(t)] for t in parts[2:])
            elif kind == "S":
                pairs = [t.split(":") for t in parts[2:]]
                if any(len(p) != 2 for p in pairs):
                    fail(f"sum unit {uid} has a malformed edge", lineno, off)
                children = [id_map[int(c)] for c, _ in pairs]
                weights = np.array([float(w) for _, w in pairs])
                _check_distribution("sum unit", uid, weights, lineno, off)
                id_map[uid] = b.sum(children, weights)
            else:
                fail(f"unknown unit kind {kind!r}", lineno, off)
        except KeyError as exc:
            fail(f"unit {uid} refers to undefined unit {exc.args[0]}", lineno, off)
        except ValueError as exc:
            fail(f"unit {uid}: {exc}", lineno, off)
    if roots is None:
        fail("missing ROOTS footer", data.count(b"\n") + 1)
    try:
        return b.build(roots)
    except CircuitError as exc:
        fail(str(exc))


def _check_distribution(kind, uid, values, lineno, off):
    if not np.all(np.isfinite(values)) or np.any(values < 0):
        raise ParseError(f"{kind} {uid} has a negative or non-finite parameter", offset=off, line=lineno)
    total = float(values.sum())
    if abs(total - 1.0) > NORMALIZATION_TOL:
        raise ParseError(f"{kind} {uid} parameters sum to {total!r}, not 1", offset=off, line=lineno)


def atomic_write(path, data: bytes | str) -> None:
    """Write ``data`` to ``path`` via a temp file in the same directory and a rename."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_circuit(circuit: Circuit, path) -> None:
    atomic_write(path, serialize(circuit))


def load_circuit(path) -> Circuit:
    with open(path, "rb") as fh:
        return deserialize(fh.read())
