"""Export to the CPLEX-style LP text format, and a reader for the same subset.

Coefficients are written with 17 significant digits, which is enough for a
lossless round trip of IEEE doubles.
"""

from __future__ import annotations

import re
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .model import EQ, GE, LE, LPModel

_SENSE_TEXT = {LE: "<=", EQ: "=", GE: ">="}
TERMS_PER_LINE = 6


def _num(v: float) -> str:
    return format(float(v), ".17g")


def _terms(cols, vals, names) -> list:
    out = []
    for j, v in zip(cols, vals):
        if v == 1.0:
            t = f"+ {names[j]}"
        elif v == -1.0:
            t = f"- {names[j]}"
        elif v < 0:
            t = f"- {_num(-v)} {names[j]}"
        else:
            t = f"+ {_num(v)} {names[j]}"
        out.append(t)
    if out and out[0].startswith("+ "):
        out[0] = out[0][2:]
    return out


def _wrap(head: str, terms: list, tail: str = "") -> list:
    lines = []
    for s in range(0, max(len(terms), 1), TERMS_PER_LINE):
        chunk = " ".join(terms[s : s + TERMS_PER_LINE])
        lines.append((head if s == 0 else "   ") + chunk)
    if not terms:
        lines = [head + "0"]
    lines[-1] += tail
    return lines


def export_lp_text(model: LPModel, comment: Optional[str] = None) -> str:
    names = model.var_names
    rnames = model.row_names
    lines = []
    if comment:
        lines += [f"\\ {c}" for c in comment.splitlines()]
    lines.append("Maximize")
    nz = np.flatnonzero(model.objective)
    lines += _wrap(" obj: ", _terms(nz, model.objective[nz], names))
    lines.append("Subject To")
    A = sp.csr_matrix(model.A)
    for r in range(model.num_rows):
        lo, hi = A.indptr[r], A.indptr[r + 1]
        terms = _terms(A.indices[lo:hi], A.data[lo:hi], names)
        tail = f" {_SENSE_TEXT[str(model.senses[r])]} {_num(model.rhs[r])}"
        lines += _wrap(f" {rnames[r]}: ", terms, tail)
    lines.append("Bounds")
    for nm in names:
        lines.append(f" {nm} >= 0")
    lines.append("End")
    return "\n".join(lines) + "\n"


_TERM = re.compile(r"([+-])?\s*((?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)?\s*([A-Za-z_][\w.]*)")


def _parse_expr(text: str) -> dict:
    out = {}
    text = text.strip()
    if text == "0":
        return out
    pos = 0
    while pos < len(text):
        m = _TERM.match(text, pos)
        if not m:
            raise ValueError(f"cannot parse LP expression near {text[pos:pos + 30]!r}")
        sign = -1.0 if m.group(1) == "-" else 1.0
        coef = float(m.group(2)) if m.group(2) else 1.0
        out[m.group(3)] = out.get(m.group(3), 0.0) + sign * coef
        pos = m.end()
        while pos < len(text) and text[pos] == " ":
            pos += 1
    return out


def parse_lp_text(text: str) -> dict:
    """Read back what ``export_lp_text`` writes.

    Returns a dict with ``objective`` ({name: coef}), ``rows`` (list of
    ``(name, {var: coef}, sense, rhs)``) and ``sense`` ("max").
    """
    section = None
    statements = {"obj": [], "rows": []}
    buf = []

    def flush():
        if buf:
            statements["rows" if section == "st" else "obj"].append(" ".join(buf))
            buf.clear()

    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("\\"):
            continue
        low = line.lower()
        if low in ("maximize", "subject to", "bounds", "end"):
            flush()
            section = {"maximize": "obj", "subject to": "st", "bounds": "bounds", "end": None}[low]
            continue
        if section == "bounds" or section is None:
            continue
        if re.match(r"^[A-Za-z_][\w.]*:", line) and buf:
            flush()
        buf.append(line)
    flush()

    obj = {}
    for s in statements["obj"]:
        _, expr = s.split(":", 1)
        obj.update(_parse_expr(expr))
    rows = []
    for s in statements["rows"]:
        name, body = s.split(":", 1)
        m = re.search(r"(<=|>=|=)\s*(\S+)\s*$", body)
        sense = {"<=": LE, ">=": GE, "=": EQ}[m.group(1)]
        rows.append((name.strip(), _parse_expr(body[: m.start()]), sense, float(m.group(2))))
    return {"sense": "max", "objective": obj, "rows": rows}
