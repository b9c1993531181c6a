"""Batched evaluation and reverse-mode differentiation of compiled expressions.

A compiled expression is a postfix program of parallel int arrays
(``codes``, ``args``, ``left``, ``right``) plus a float constant table.
``args`` holds the constant index for CONST nodes and the data column for
VAR nodes; ``left``/``right`` index child nodes (-1 when absent).

Two implementations share that layout: numba kernels looping node-major
over records, and a numpy fallback used when ``SYMDISTILL_BACKEND=numpy``.
"""
import math

import numpy as np
from scipy import special

from ._backend import USE_NUMBA

OP_CONST = 0
OP_VAR = 1
OP_ADD = 2
OP_SUB = 3
OP_MUL = 4
OP_DIV = 5
OP_POW = 6
OP_SQUARE = 7
OP_SQRT = 8
OP_EXP = 9
OP_TANH = 10
OP_ASINH = 11
OP_SINH = 12
OP_RELU = 13
OP_ERFC = 14

_TWO_OVER_SQRT_PI = 2.0 / math.sqrt(math.pi)


# --------------------------------------------------------------------------
# numpy reference path
# --------------------------------------------------------------------------

def _np_pow_s(x, y):
    return np.sign(x) * np.abs(x) ** y


def _np_forward(codes, args, left, right, consts, X):
    n = X.shape[0]
    vals = np.empty((codes.shape[0], n))
    with np.errstate(all="ignore"):
        for k in range(codes.shape[0]):
            op = codes[k]
            if op == OP_CONST:
                vals[k] = consts[args[k]]
                continue
            if op == OP_VAR:
                vals[k] = X[:, args[k]]
                continue
            a = vals[left[k]]
            if op == OP_ADD:
                vals[k] = a + vals[right[k]]
            elif op == OP_SUB:
                vals[k] = a - vals[right[k]]
            elif op == OP_MUL:
                vals[k] = a * vals[right[k]]
            elif op == OP_DIV:
                vals[k] = a / vals[right[k]]
            elif op == OP_POW:
                vals[k] = _np_pow_s(a, vals[right[k]])
            elif op == OP_SQUARE:
                vals[k] = a * a
            elif op == OP_SQRT:
                vals[k] = np.sign(a) * np.sqrt(np.abs(a))
            elif op == OP_EXP:
                vals[k] = np.exp(a)
            elif op == OP_TANH:
                vals[k] = np.tanh(a)
            elif op == OP_ASINH:
                vals[k] = np.arcsinh(a)
            elif op == OP_SINH:
                vals[k] = np.sinh(a)
            elif op == OP_RELU:
                vals[k] = np.where(a > 0.0, a, np.where(a <= 0.0, 0.0, a))
            elif op == OP_ERFC:
                vals[k] = special.erfc(a)
            else:
                raise ValueError(f"unknown opcode {op}")
    return vals


def _np_eval(codes, args, left, right, consts, X):
    return _np_forward(codes, args, left, right, consts, X)[-1].copy()


def _np_grad(codes, args, left, right, consts, X, n_cols):
    vals = _np_forward(codes, args, left, right, consts, X)
    n = X.shape[0]
    m = codes.shape[0]
    adj = np.zeros((m, n))
    adj[m - 1] = 1.0
    dconst = np.zeros((n, consts.shape[0]))
    dX = np.zeros((n, n_cols))
    with np.errstate(all="ignore"):
        for k in range(m - 1, -1, -1):
            op = codes[k]
            g = adj[k]
            if op == OP_CONST:
                dconst[:, args[k]] += g
                continue
            if op == OP_VAR:
                dX[:, args[k]] += g
                continue
            a = left[k]
            x = vals[a]
            if op == OP_ADD:
                adj[a] += g
                adj[right[k]] += g
            elif op == OP_SUB:
                adj[a] += g
                adj[right[k]] -= g
            elif op == OP_MUL:
                b = right[k]
                adj[a] += g * vals[b]
                adj[b] += g * x
            elif op == OP_DIV:
                b = right[k]
                adj[a] += g / vals[b]
                adj[b] -= g * vals[k] / vals[b]
            elif op == OP_POW:
                b = right[k]
                nz = x != 0.0
                safe = np.where(nz, x, 1.0)
                adj[a] += np.where(nz, g * vals[b] * vals[k] / safe, 0.0)
                adj[b] += np.where(nz, g * vals[k] * np.log(np.abs(safe)), 0.0)
            elif op == OP_SQUARE:
                adj[a] += g * 2.0 * x
            elif op == OP_SQRT:
                nz = x != 0.0
                adj[a] += np.where(nz, g * 0.5 / np.sqrt(np.abs(np.where(nz, x, 1.0))), 0.0)
            elif op == OP_EXP:
                adj[a] += g * vals[k]
            elif op == OP_TANH:
                adj[a] += g * (1.0 - vals[k] * vals[k])
            elif op == OP_ASINH:
                adj[a] += g / np.sqrt(1.0 + x * x)
            elif op == OP_SINH:
                adj[a] += g * np.cosh(x)
            elif op == OP_RELU:
                adj[a] += np.where(x > 0.0, g, 0.0)
            elif op == OP_ERFC:
                adj[a] -= g * _TWO_OVER_SQRT_PI * np.exp(-x * x)
    return vals[m - 1].copy(), dconst, dX


# --------------------------------------------------------------------------
# numba path
# --------------------------------------------------------------------------

if USE_NUMBA:
    from numba import njit

    _jit = njit(cache=True, nogil=True, error_model="numpy")

    @njit(cache=True, nogil=True, error_model="numpy", inline="always")
    def _nb_pow_s(x, y):
        ax = abs(x)
        if ax == 0.0:
            if y >= 0.0:
                return 0.0
            return math.nan
        p = ax ** y
        if x > 0.0:
            return p
        if x < 0.0:
            return -p
        return math.nan

    @_jit
    def _nb_forward(codes, args, left, right, consts, X):
        n = X.shape[0]
        m = codes.shape[0]
        vals = np.empty((m, n))
        for k in range(m):
            op = codes[k]
            if op == OP_CONST:
                c = consts[args[k]]
                for r in range(n):
                    vals[k, r] = c
            elif op == OP_VAR:
                col = args[k]
                for r in range(n):
                    vals[k, r] = X[r, col]
            else:
                a = left[k]
                b = right[k]
                if op == OP_ADD:
                    for r in range(n):
                        vals[k, r] = vals[a, r] + vals[b, r]
                elif op == OP_SUB:
                    for r in range(n):
                        vals[k, r] = vals[a, r] - vals[b, r]
                elif op == OP_MUL:
                    for r in range(n):
                        vals[k, r] = vals[a, r] * vals[b, r]
                elif op == OP_DIV:
                    for r in range(n):
                        vals[k, r] = vals[a, r] / vals[b, r]
                elif op == OP_POW:
                    for r in range(n):
                        vals[k, r] = _nb_pow_s(vals[a, r], vals[b, r])
                elif op == OP_SQUARE:
                    for r in range(n):
                        vals[k, r] = vals[a, r] * vals[a, r]
                elif op == OP_SQRT:
                    for r in range(n):
                        x = vals[a, r]
                        if x > 0.0:
                            vals[k, r] = math.sqrt(x)
                        elif x < 0.0:
                            vals[k, r] = -math.sqrt(-x)
                        else:
                            vals[k, r] = x * 0.0
                elif op == OP_EXP:
                    for r in range(n):
                        vals[k, r] = math.exp(vals[a, r])
                elif op == OP_TANH:
                    for r in range(n):
                        vals[k, r] = math.tanh(vals[a, r])
                elif op == OP_ASINH:
                    for r in range(n):
                        vals[k, r] = math.asinh(vals[a, r])
                elif op == OP_SINH:
                    for r in range(n):
                        vals[k, r] = math.sinh(vals[a, r])
                elif op == OP_RELU:
                    for r in range(n):
                        x = vals[a, r]
                        vals[k, r] = 0.0 if x <= 0.0 else x
                elif op == OP_ERFC:
                    for r in range(n):
                        vals[k, r] = math.erfc(vals[a, r])
        return vals

    @_jit
    def _nb_eval(codes, args, left, right, consts, X):
        vals = _nb_forward(codes, args, left, right, consts, X)
        return vals[codes.shape[0] - 1].copy()

    @_jit
    def _nb_grad(codes, args, left, right, consts, X, n_cols):
        vals = _nb_forward(codes, args, left, right, consts, X)
        n = X.shape[0]
        m = codes.shape[0]
        adj = np.zeros((m, n))
        for r in range(n):
            adj[m - 1, r] = 1.0
        dconst = np.zeros((n, consts.shape[0]))
        dX = np.zeros((n, n_cols))
        for k in range(m - 1, -1, -1):
            op = codes[k]
            if op == OP_CONST:
                j = args[k]
                for r in range(n):
                    dconst[r, j] += adj[k, r]
                continue
            if op == OP_VAR:
                col = args[k]
                for r in range(n):
                    dX[r, col] += adj[k, r]
                continue
            a = left[k]
            b = right[k]
            for r in range(n):
                g = adj[k, r]
                x = vals[a, r]
                if op == OP_ADD:
                    adj[a, r] += g
                    adj[b, r] += g
                elif op == OP_SUB:
                    adj[a, r] += g
                    adj[b, r] -= g
                elif op == OP_MUL:
                    adj[a, r] += g * vals[b, r]
                    adj[b, r] += g * x
                elif op == OP_DIV:
                    adj[a, r] += g / vals[b, r]
                    adj[b, r] -= g * vals[k, r] / vals[b, r]
                elif op == OP_POW:
                    if x != 0.0:
                        adj[a, r] += g * vals[b, r] * vals[k, r] / x
                        adj[b, r] += g * vals[k, r] * math.log(abs(x))
                elif op == OP_SQUARE:
                    adj[a, r] += g * 2.0 * x
                elif op == OP_SQRT:
                    if x != 0.0:
                        adj[a, r] += g * 0.5 / math.sqrt(abs(x))
                elif op == OP_EXP:
                    adj[a, r] += g * vals[k, r]
                elif op == OP_TANH:
                    v = vals[k, r]
                    adj[a, r] += g * (1.0 - v * v)
                elif op == OP_ASINH:
                    adj[a, r] += g / math.sqrt(1.0 + x * x)
                elif op == OP_SINH:
                    adj[a, r] += g * math.cosh(x)
                elif op == OP_RELU:
                    if x > 0.0:
                        adj[a, r] += g
                elif op == OP_ERFC:
                    adj[a, r] -= g * _TWO_OVER_SQRT_PI * math.exp(-x * x)
        out = vals[m - 1].copy()
        return out, dconst, dX


def eval_program(codes, args, left, right, consts, X):
    """Evaluate a postfix program on every row of ``X``; returns shape (n,)."""
    if USE_NUMBA:
        return _nb_eval(codes, args, left, right, consts, X)
    return _np_eval(codes, args, left, right, consts, X)


def grad_program(codes, args, left, right, consts, X, n_cols):
    """Values plus per-row gradients w.r.t. constants and data columns."""
    if USE_NUMBA:
        return _nb_grad(codes, args, left, right, consts, X, n_cols)
    return _np_grad(codes, args, left, right, consts, X, n_cols)


def numpy_eval_program(codes, args, left, right, consts, X):
    return _np_eval(codes, args, left, right, consts, X)


def numpy_grad_program(codes, args, left, right, consts, X, n_cols):
    return _np_grad(codes, args, left, right, consts, X, n_cols)
