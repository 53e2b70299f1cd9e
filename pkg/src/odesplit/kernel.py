"""Compilation of RhsSystem expression trees to flat register programs.

A Kernel holds straight-line register programs with four entry points:
the right-hand side f(y, t, m), the diagonal Jacobian {df_i/dy_i}, the full
dense Jacobian df/dy and the parameter Jacobian df/dm.  Programs run over
vector registers (one lane per point), so a single dispatch step processes
a whole chunk of points; scratch registers are caller-provided, one scratch
per thread.

Instruction operands index an environment table that exposes state rows,
constants, parameters and the time symbol directly, so leaves cost nothing
at run time; only genuine arithmetic writes to scratch registers, and
registers are recycled by last-use liveness.  The f entry point is compiled
from the expression trees exactly as written and reproduces the tree
interpreter bitwise.  Jacobian entry points are compiled from
``simplify(differentiate(...))`` trees; the same trees are the
interpreter-oracle reference for them.  Common subexpressions are shared
within one entry point only, never across entry points.
"""

from __future__ import annotations

import numpy as np

from .expr import (
    Abs,
    Add,
    Compare,
    Const,
    Cos,
    Div,
    Exp,
    Log,
    Mul,
    Neg,
    Param,
    Piecewise,
    Pow,
    RhsSystem,
    Sin,
    State,
    Time,
    differentiate,
    simplify,
)

__all__ = ["Kernel", "Scratch", "compile_kernel", "jacobian_exprs"]

# opcodes
_NEG = 0
_ADD = 1
_MUL = 2
_DIV = 3
_POW = 4
_EXP = 5
_LOG = 6
_SIN = 7
_COS = 8
_ABS = 9
_LT = 10
_LE = 11
_GT = 12
_GE = 13
_WHERE = 14

_CMP_CODE = {"<": _LT, "<=": _LE, ">": _GT, ">=": _GE}


def jacobian_exprs(system: RhsSystem):
    """Canonical derivative trees: (diag, full, param) entry-point sources.

    full[i][j] = d f_i / d y_j, param[i][k] = d f_i / d m_k, both after
    simplification; diag is the full diagonal.
    """
    full = [
        [simplify(differentiate(fi, State(j))) for j in range(system.m)]
        for fi in system.exprs
    ]
    diag = [full[i][i] for i in range(system.m)]
    param = [
        [simplify(differentiate(fi, Param(k))) for k in range(system.p)]
        for fi in system.exprs
    ]
    return diag, full, param


class _Program:
    __slots__ = ("instrs", "out_slots", "n_f", "n_b", "consts")

    def __init__(self, instrs, out_slots, n_f, n_b, consts):
        self.instrs = tuple(instrs)
        self.out_slots = tuple(out_slots)
        self.n_f = n_f
        self.n_b = n_b
        self.consts = list(consts)


class _ProgramBuilder:
    """Emits one entry point: value-numbered instructions over environment
    operands with scratch-register recycling by last use."""

    def __init__(self, m, p):
        self.const_pool = []
        self.pool_index = {}
        self.m = m
        self.p = p
        self.instrs = []
        self.slot = {}       # node -> symbolic operand
        self.is_bool = {}
        self.last_use = {}
        self.free_f = []
        self.free_b = []
        self.n_f = 0
        self.n_b = 0

    def _const_slot(self, value):
        key = np.float64(value).tobytes()
        slot = self.pool_index.get(key)
        if slot is None:
            slot = len(self.const_pool)
            self.const_pool.append(float(value))
            self.pool_index[key] = slot
        return "c", slot

    def _leaf_slot(self, node):
        if isinstance(node, Const):
            return self._const_slot(node.value)
        if isinstance(node, State):
            return "y", node.index
        if isinstance(node, Param):
            return "p", node.index
        if isinstance(node, Time):
            return ("t", 0)
        return None

    def _schedule(self, node, order, seen):
        if node in seen or self._leaf_slot(node) is not None:
            if node not in seen and self._leaf_slot(node) is not None:
                self.slot[node] = self._leaf_slot(node)
                self.is_bool[node] = False
                seen.add(node)
            return
        for child in node.children():
            self._schedule(child, order, seen)
        seen.add(node)
        order.append(node)

    def build(self, outputs):
        order, seen = [], set()
        for e in outputs:
            self._schedule(e, order, seen)
        n = len(order)
        for i, node in enumerate(order):
            for child in node.children():
                self.last_use[child] = i
        for j, e in enumerate(outputs):
            self.last_use[e] = n + j  # alive until its output copy
        for i, node in enumerate(order):
            self._emit(node, i)
        out_slots = [self.slot[e] for e in outputs]
        return out_slots

    def _alloc(self, is_bool):
        pool = self.free_b if is_bool else self.free_f
        if pool:
            return pool.pop()
        if is_bool:
            self.n_b += 1
            return ("b", self.n_b - 1)
        self.n_f += 1
        return ("r", self.n_f - 1)

    def _release(self, node, pos):
        if self.last_use.get(node, -1) == pos:
            s = self.slot[node]
            if s[0] == "r":
                self.free_f.append(s)
            elif s[0] == "b":
                self.free_b.append(s)

    def _emit(self, node, pos):
        s = self.slot
        emit = self.instrs.append
        is_bool = isinstance(node, Compare)
        if isinstance(node, Piecewise):
            acc = s[node.default]
            owned = acc[0] == "_never_"
            for cond, value in reversed(node.branches):
                dst = self._alloc(False)
                emit((_WHERE, dst, s[cond], s[value], acc))
                if owned:
                    self.free_f.append(acc)
                acc = dst
                owned = True
            self.slot[node] = acc
            self.is_bool[node] = False
            for child in set(node.children()):
                self._release(child, pos)
            return
        dst = self._alloc(is_bool)
        if isinstance(node, Neg):
            emit((_NEG, dst, s[node.a], None, None))
        elif isinstance(node, Add):
            emit((_ADD, dst, s[node.a], s[node.b], None))
        elif isinstance(node, Mul):
            emit((_MUL, dst, s[node.a], s[node.b], None))
        elif isinstance(node, Div):
            emit((_DIV, dst, s[node.a], s[node.b], None))
        elif isinstance(node, Pow):
            emit((_POW, dst, s[node.base], self._const_slot(node.exponent), None))
        elif isinstance(node, Exp):
            emit((_EXP, dst, s[node.a], None, None))
        elif isinstance(node, Log):
            emit((_LOG, dst, s[node.a], None, None))
        elif isinstance(node, Sin):
            emit((_SIN, dst, s[node.a], None, None))
        elif isinstance(node, Cos):
            emit((_COS, dst, s[node.a], None, None))
        elif isinstance(node, Abs):
            emit((_ABS, dst, s[node.a], None, None))
        elif isinstance(node, Compare):
            emit((_CMP_CODE[node.op], dst, s[node.a], s[node.b], None))
        else:
            raise TypeError(f"cannot compile node {type(node).__name__}")
        self.slot[node] = dst
        self.is_bool[node] = is_bool
        for child in set(node.children()):
            self._release(child, pos)


def _finalize(builder, out_slots):
    """Resolve symbolic operands: scratch registers keep their own index;
    environment operands are encoded as negative ints into the per-call env
    list [y rows..., consts..., params..., t]."""
    m, p = builder.m, builder.p

    def code(slot):
        if slot is None:
            return 0
        kind, idx = slot
        if kind == "r" or kind == "b":
            return idx
        if kind == "y":
            return -(idx + 1)
        if kind == "c":
            return -(m + idx + 1)
        if kind == "p":
            return -(m + len(builder.const_pool) + idx + 1)
        return -(m + len(builder.const_pool) + p + 1)  # t

    instrs = []
    for op, dst, a, b, c in builder.instrs:
        instrs.append((op, code(dst), code(a), code(b), code(c)))
    outs = [(slot[0] in ("r", "b"), code(slot)) for slot in out_slots]
    return instrs, outs


class Scratch:
    """Per-thread register buffers for one Kernel, reusable across chunk
    widths up to ``width``."""

    def __init__(self, n_f, n_b, width):
        self.width = width
        self._f = np.empty((max(n_f, 1), width))
        self._b = np.empty((max(n_b, 1), width), dtype=bool)
        self._views = {}

    def views(self, n):
        if n > self.width:
            raise ValueError(f"chunk of {n} exceeds scratch width {self.width}")
        hit = self._views.get(n)
        if hit is None:
            hit = (list(self._f[:, :n]), list(self._b[:, :n]))
            self._views[n] = hit
        return hit


def _run(instrs, F, B, ext):
    """Execute one program.  Operand >= 0: scratch register; < 0: the
    external environment (state rows, constants, parameters, time)."""
    for op, dst, a, b, c in instrs:
        va = F[a] if a >= 0 else ext[-a - 1]
        if op == _MUL:
            np.multiply(va, F[b] if b >= 0 else ext[-b - 1], out=F[dst])
        elif op == _ADD:
            np.add(va, F[b] if b >= 0 else ext[-b - 1], out=F[dst])
        elif op == _NEG:
            np.negative(va, out=F[dst])
        elif op == _DIV:
            np.divide(va, F[b] if b >= 0 else ext[-b - 1], out=F[dst])
        elif op == _WHERE:
            vb = F[b] if b >= 0 else ext[-b - 1]
            vc = F[c] if c >= 0 else ext[-c - 1]
            F[dst][...] = np.where(B[a] if a >= 0 else ext[-a - 1], vb, vc)
        elif op == _POW:
            np.power(va, F[b] if b >= 0 else ext[-b - 1], out=F[dst])
        elif op == _EXP:
            np.exp(va, out=F[dst])
        elif op == _LOG:
            np.log(va, out=F[dst])
        elif op == _SIN:
            np.sin(va, out=F[dst])
        elif op == _COS:
            np.cos(va, out=F[dst])
        elif op == _ABS:
            np.abs(va, out=F[dst])
        elif op == _LT:
            np.less(va, F[b] if b >= 0 else ext[-b - 1], out=B[dst])
        elif op == _LE:
            np.less_equal(va, F[b] if b >= 0 else ext[-b - 1], out=B[dst])
        elif op == _GT:
            np.greater(va, F[b] if b >= 0 else ext[-b - 1], out=B[dst])
        elif op == _GE:
            np.greater_equal(va, F[b] if b >= 0 else ext[-b - 1], out=B[dst])
        else:
            raise RuntimeError(f"bad opcode {op}")


class Kernel:
    """Compiled evaluation kernel for one RhsSystem.

    Immutable after construction and safe to share across threads;
    concurrent evaluation needs one :class:`Scratch` per thread.
    """

    def __init__(self, system: RhsSystem):
        self.system = system
        self.m = system.m
        self.p = system.p
        self.const_pool = []
        diag, full, param = jacobian_exprs(system)
        sources = {
            "f": list(system.exprs),
            "diag": diag,
            "full": [e for row in full for e in row],
            "param": [e for row in param for e in row],
        }
        self._programs = {}
        self._pending = sources  # compiled below; const pool grows first
        for name, exprs in sources.items():
            self._programs[name] = self._build(exprs)
        self._aux = None
        self.n_f_regs = max(pr.n_f for pr in self._programs.values())
        self.n_b_regs = max(pr.n_b for pr in self._programs.values())

    def _build(self, exprs):
        builder = _ProgramBuilder(self.m, self.p)
        out_slots = builder.build(exprs)
        instrs, outs = _finalize(builder, out_slots)
        program = _Program(instrs, outs, builder.n_f, builder.n_b, builder.const_pool)
        for v in builder.const_pool:
            if v not in self.const_pool:
                self.const_pool.append(v)
        return program

    # -- auxiliary entry point for exponential-integrator sensitivities ----

    def _ensure_aux(self):
        """Two extra entry points for exponential-integrator sensitivities:
        the state block stacks f, diag J, full J and d(diag J)/dy; the
        parameter block stacks df/dm and d(diag J)/dm and is only evaluated
        when a parameter derivative is requested."""
        if self._aux is not None:
            return self._aux
        m, p = self.m, self.p
        diag, full, param = jacobian_exprs(self.system)
        ddiag = [
            [simplify(differentiate(diag[i], State(j))) for j in range(m)]
            for i in range(m)
        ]
        dparam = [
            [simplify(differentiate(diag[i], Param(k))) for k in range(p)]
            for i in range(m)
        ]
        prog_y = self._build(
            list(self.system.exprs)
            + diag
            + [e for row in full for e in row]
            + [e for row in ddiag for e in row]
        )
        prog_p = self._build(
            [e for row in param for e in row]
            + [e for row in dparam for e in row]
        )
        self._aux = (prog_y, prog_p)
        self.n_f_regs = max(self.n_f_regs, prog_y.n_f, prog_p.n_f)
        self.n_b_regs = max(self.n_b_regs, prog_y.n_b, prog_p.n_b)
        return self._aux

    # -- evaluation ---------------------------------------------------------

    def make_scratch(self, width, with_aux=False):
        if with_aux:
            self._ensure_aux()
        return Scratch(self.n_f_regs, self.n_b_regs, width)

    @staticmethod
    def _env(program, y, t, params):
        return list(y) + program.consts + list(params) + [t]

    def _program(self, name):
        if name == "aux_y":
            return self._ensure_aux()[0]
        if name == "aux_p":
            return self._ensure_aux()[1]
        return self._programs[name]

    def _eval(self, name, y, t, params, out=None):
        program = self._program(name)
        y = np.asarray(y, dtype=float)
        single = y.ndim == 1
        if single:
            y = y[:, None]
        if y.shape[0] != self.m:
            raise ValueError(f"state dimension {y.shape[0]} != {self.m}")
        params = self.system.default_params() if params is None else np.asarray(params, dtype=float)
        if params.shape != (self.p,):
            raise ValueError(f"parameter vector must have length {self.p}")
        n = y.shape[1]
        n_out = len(program.out_slots)
        if out is None:
            out = np.empty((n_out, n))
        scratch = Scratch(program.n_f, program.n_b, n)
        self._run_into(program, y, t, params, out, scratch)
        return out[:, 0] if single else out

    def _run_into(self, program, y, t, params, out, scratch):
        n = y.shape[1]
        F, B = scratch.views(n)
        ext = self._env(program, y, float(t), params)
        with np.errstate(all="ignore"):
            _run(program.instrs, F, B, ext)
            for i, (is_reg, code) in enumerate(program.out_slots):
                src = F[code] if is_reg else ext[-code - 1]
                np.copyto(out[i], src)
        return out

    def _eval_chunk(self, name, y, t, params, out, scratch):
        """Hot path: y is (m, n) float64, params (p,), out (n_out, n),
        scratch wide enough.  No validation, no allocation."""
        return self._run_into(self._program(name), y, float(t), params, out, scratch)

    def f(self, y, t, params=None, out=None):
        return self._eval("f", y, t, params, out)

    def diag_jac(self, y, t, params=None, out=None):
        return self._eval("diag", y, t, params, out)

    def full_jac(self, y, t, params=None):
        """Dense Jacobian as (m, m) for a single state or (m, m, n)."""
        y = np.asarray(y, dtype=float)
        flat = self._eval("full", y, t, params)
        m = self.m
        if y.ndim == 1:
            return flat.reshape(m, m)
        return flat.reshape(m, m, y.shape[1])

    def param_jac(self, y, t, params=None):
        """Parameter Jacobian as (m, p) or (m, p, n)."""
        y = np.asarray(y, dtype=float)
        flat = self._eval("param", y, t, params)
        m, p = self.m, self.p
        if y.ndim == 1:
            return flat.reshape(m, p)
        return flat.reshape(m, p, y.shape[1])

    def aux_eval(self, y, t, params=None, with_params=True):
        """Evaluate the sensitivity entry points; returns a dict of views.
        The parameter block is skipped unless ``with_params``."""
        self._ensure_aux()
        y = np.asarray(y, dtype=float)
        single = y.ndim == 1
        flat = self._eval("aux_y", y, t, params)
        if single:
            flat = flat[:, None]
        m, p = self.m, self.p
        n = flat.shape[1]
        s0, s1, s2 = m, 2 * m, 2 * m + m * m
        parts = {
            "f": flat[:s0],
            "diag": flat[s0:s1],
            "full": flat[s1:s2].reshape(m, m, n),
            "ddiag_dy": flat[s2:].reshape(m, m, n),
            "df_dp": None,
            "ddiag_dp": None,
        }
        if with_params:
            pf = self._eval("aux_p", y, t, params)
            if single:
                pf = pf[:, None]
            parts["df_dp"] = pf[: m * p].reshape(m, p, n)
            parts["ddiag_dp"] = pf[m * p :].reshape(m, p, n)
        return parts


def compile_kernel(system: RhsSystem) -> Kernel:
    """Compile a validated system to its evaluation kernel."""
    return Kernel(system)
