# cython: language_level=3
"""Compiled MLP kernels; same API and parameter layout as ``_kernels_py``.

Matrix products go through BLAS ``dgemm`` (row-major arrays are passed as
their column-major transposes). ``train_epochs`` runs the whole local-training
loop without returning to the interpreter and releases the GIL.
"""
import numpy as np

from libc.math cimport exp, log
from libc.string cimport memcpy, memset
from scipy.linalg.cython_blas cimport dgemm

NAME = "compiled"


cdef inline void _mm(bint ta, bint tb, int M, int N, int K, double alpha,
                     const double* A, int lda, const double* B, int ldb,
                     double beta, double* C, int ldc) noexcept nogil:
    # row-major C[M, N] = alpha * op(A) @ op(B) + beta * C
    cdef char ca = b'T' if ta else b'N'
    cdef char cb = b'T' if tb else b'N'
    dgemm(&cb, &ca, &N, &M, &K, &alpha, <double*>B, &ldb, <double*>A, &lda,
          &beta, C, &ldc)


cdef class _Plan:
    """Layer offsets plus scratch buffers sized for ``nmax`` rows."""
    cdef int L
    cdef int nmax
    cdef int[::1] sizes
    cdef Py_ssize_t[::1] woff
    cdef Py_ssize_t[::1] zoff
    cdef double[::1] Z
    cdef double[::1] A
    cdef double[::1] D1
    cdef double[::1] D2

    def __init__(self, sizes, int nmax, Py_ssize_t n_params):
        cdef int l, maxw = 0
        cdef Py_ssize_t off = 0, zo = 0
        self.L = len(sizes) - 1
        self.nmax = max(nmax, 1)
        self.sizes = np.asarray(sizes, dtype=np.intc)
        self.woff = np.zeros(self.L, dtype=np.intp)
        self.zoff = np.zeros(self.L, dtype=np.intp)
        for l in range(self.L):
            self.woff[l] = off
            off += self.sizes[l] * self.sizes[l + 1] + self.sizes[l + 1]
            self.zoff[l] = zo
            zo += <Py_ssize_t>self.nmax * self.sizes[l + 1]
        for l in range(self.L + 1):
            if self.sizes[l] > maxw:
                maxw = self.sizes[l]
        if off != n_params:
            raise ValueError(f"parameter vector has {n_params} values, layer sizes imply {off}")
        self.Z = np.zeros(zo)
        self.A = np.zeros(zo)
        self.D1 = np.zeros(<Py_ssize_t>self.nmax * maxw)
        self.D2 = np.zeros(<Py_ssize_t>self.nmax * maxw)


cdef void _forward(_Plan p, const double* P, const double* X, int n) noexcept nogil:
    cdef int l, i, fi, fo
    cdef Py_ssize_t k
    cdef const double* h = X
    cdef const double* W
    cdef double* z
    cdef double* a
    for l in range(p.L):
        fi = p.sizes[l]
        fo = p.sizes[l + 1]
        W = P + p.woff[l]
        z = &p.Z[p.zoff[l]]
        for i in range(n):
            memcpy(z + <Py_ssize_t>i * fo, W + <Py_ssize_t>fi * fo, fo * sizeof(double))
        _mm(False, False, n, fo, fi, 1.0, h, fi, W, fo, 1.0, z, fo)
        if l < p.L - 1:
            a = &p.A[p.zoff[l]]
            for k in range(<Py_ssize_t>n * fo):
                a[k] = z[k] if z[k] > 0.0 else 0.0
            h = a


cdef double _loss_backward(_Plan p, const double* P, const double* X,
                           const long long* y, int n, double scale,
                           double* G, double* GX) noexcept nogil:
    """Forward, softmax cross-entropy, backward. Returns the summed loss.

    ``scale`` multiplies dL/dlogits (1/n for the mean loss, 1 for per-example
    input gradients). ``G`` / ``GX`` may be NULL.
    """
    cdef int l, i, j, fi, fo, C
    cdef Py_ssize_t k
    cdef double m, s, total = 0.0
    cdef double* z
    cdef double* row
    cdef double* delta
    cdef double* other
    cdef double* tmp
    cdef double* gb
    cdef const double* W
    cdef const double* hprev

    _forward(p, P, X, n)
    C = p.sizes[p.L]
    z = &p.Z[p.zoff[p.L - 1]]
    delta = &p.D1[0]
    other = &p.D2[0]
    for i in range(n):
        row = z + <Py_ssize_t>i * C
        m = row[0]
        for j in range(1, C):
            if row[j] > m:
                m = row[j]
        s = 0.0
        for j in range(C):
            delta[<Py_ssize_t>i * C + j] = exp(row[j] - m)
            s += delta[<Py_ssize_t>i * C + j]
        total += log(s) + m - row[y[i]]
        for j in range(C):
            delta[<Py_ssize_t>i * C + j] = delta[<Py_ssize_t>i * C + j] / s * scale
        delta[<Py_ssize_t>i * C + y[i]] -= scale

    for l in range(p.L - 1, -1, -1):
        fi = p.sizes[l]
        fo = p.sizes[l + 1]
        W = P + p.woff[l]
        hprev = X if l == 0 else &p.A[p.zoff[l - 1]]
        if G != NULL:
            _mm(True, False, fi, fo, n, 1.0, hprev, fi, delta, fo, 0.0, G + p.woff[l], fo)
            gb = G + p.woff[l] + <Py_ssize_t>fi * fo
            memset(gb, 0, fo * sizeof(double))
            for i in range(n):
                for j in range(fo):
                    gb[j] += delta[<Py_ssize_t>i * fo + j]
        if l > 0:
            _mm(False, True, n, fi, fo, 1.0, delta, fo, W, fo, 0.0, other, fi)
            z = &p.Z[p.zoff[l - 1]]
            for k in range(<Py_ssize_t>n * fi):
                if z[k] <= 0.0:
                    other[k] = 0.0
            tmp = delta
            delta = other
            other = tmp
        elif GX != NULL:
            _mm(False, True, n, fi, fo, 1.0, delta, fo, W, fo, 0.0, GX, fi)
    return total


def forward(params, sizes, X):
    cdef const double[::1] P = np.ascontiguousarray(params, dtype=np.float64)
    cdef const double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef int n = Xv.shape[0]
    cdef _Plan p = _Plan(sizes, n, P.shape[0])
    if n == 0:
        return np.zeros((0, p.sizes[p.L]))
    with nogil:
        _forward(p, &P[0], &Xv[0, 0], n)
    C = p.sizes[p.L]
    return np.asarray(p.Z[p.zoff[p.L - 1]:p.zoff[p.L - 1] + n * C]).reshape(n, C).copy()


def loss_grad(params, sizes, X, y):
    cdef const double[::1] P = np.ascontiguousarray(params, dtype=np.float64)
    cdef const double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef const long long[::1] yv = np.ascontiguousarray(y, dtype=np.int64)
    cdef int n = Xv.shape[0]
    cdef _Plan p = _Plan(sizes, n, P.shape[0])
    cdef double[::1] G = np.empty(P.shape[0])
    cdef double total
    if n == 0:
        raise ValueError("empty batch")
    with nogil:
        total = _loss_backward(p, &P[0], &Xv[0, 0], &yv[0], n, 1.0 / n, &G[0], NULL)
    return total / n, np.asarray(G)


def input_grad(params, sizes, X, y):
    cdef const double[::1] P = np.ascontiguousarray(params, dtype=np.float64)
    cdef const double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef const long long[::1] yv = np.ascontiguousarray(y, dtype=np.int64)
    cdef int n = Xv.shape[0]
    cdef _Plan p = _Plan(sizes, n, P.shape[0])
    cdef double[:, ::1] GX = np.empty((n, Xv.shape[1]))
    if n == 0:
        return np.asarray(GX)
    with nogil:
        _loss_backward(p, &P[0], &Xv[0, 0], &yv[0], n, 1.0, NULL, &GX[0, 0])
    return np.asarray(GX)


def train_epochs(params, sizes, X, y, order, int batch_size, double lr,
                 double momentum, double prox_mu=0.0, anchor=None):
    """Mini-batch SGD with momentum over the epoch permutations in ``order``."""
    cdef double[::1] w = np.array(params, dtype=np.float64, copy=True)
    cdef const double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef const long long[::1] yv = np.ascontiguousarray(y, dtype=np.int64)
    cdef const long long[:, ::1] ov = np.ascontiguousarray(order, dtype=np.int64)
    cdef Py_ssize_t P = w.shape[0]
    cdef int n = Xv.shape[0]
    cdef int d = Xv.shape[1]
    cdef int E = ov.shape[0]
    cdef int bs = min(batch_size, n) if n > 0 else 1
    cdef _Plan p = _Plan(sizes, bs, P)
    cdef double[::1] v = np.zeros(P)
    cdef double[::1] g = np.zeros(P)
    cdef double[::1] losses = np.zeros(E)
    cdef double[:, ::1] Xb = np.zeros((bs, d))
    cdef long long[::1] yb = np.zeros(bs, dtype=np.int64)
    cdef const double[::1] anc
    cdef const double* ap = NULL
    cdef int e, start, b, i
    cdef long long src
    cdef Py_ssize_t k
    cdef double total, loss
    if prox_mu != 0.0:
        anc = np.ascontiguousarray(anchor, dtype=np.float64)
        if anc.shape[0] != P:
            raise ValueError("anchor length does not match parameters")
        ap = &anc[0]
    if n == 0:
        return np.asarray(w), np.asarray(losses)
    with nogil:
        for e in range(E):
            total = 0.0
            start = 0
            while start < n:
                b = bs if start + bs <= n else n - start
                for i in range(b):
                    src = ov[e, start + i]
                    memcpy(&Xb[i, 0], &Xv[src, 0], d * sizeof(double))
                    yb[i] = yv[src]
                loss = _loss_backward(p, &w[0], &Xb[0, 0], &yb[0], b, 1.0 / b, &g[0], NULL)
                total += loss
                if ap != NULL:
                    for k in range(P):
                        g[k] += prox_mu * (w[k] - ap[k])
                for k in range(P):
                    v[k] = momentum * v[k] + g[k]
                    w[k] -= lr * v[k]
                start += b
            losses[e] = total / n
    return np.asarray(w), np.asarray(losses)


def pairwise_sq_dists(U):
    cdef const double[:, ::1] Uv = np.ascontiguousarray(U, dtype=np.float64)
    cdef Py_ssize_t m = Uv.shape[0], d = Uv.shape[1], i, j, k
    cdef double[:, ::1] D = np.zeros((m, m))
    cdef double acc, diff
    with nogil:
        for i in range(m):
            for j in range(i + 1, m):
                acc = 0.0
                for k in range(d):
                    diff = Uv[j, k] - Uv[i, k]
                    acc += diff * diff
                D[i, j] = acc
                D[j, i] = acc
    return np.asarray(D)
