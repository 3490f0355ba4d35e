#pragma once
#include <bit>

#include <cmath>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "kinemask/blas.hpp"
#include "kinemask/common.hpp"
#include "kinemask/tensor.hpp"

namespace kinemask::nn {

inline int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

inline int thread_id() {
#ifdef _OPENMP
    return omp_get_thread_num();
#else
    return 0;
#endif
}

// --- activations ------------------------------------------------------------

/// Branch-free exp approximation (exponent extraction + degree-5 polynomial,
/// ~1e-7 relative error); auto-vectorizes. The double overload stays exact so
/// finite-difference gradient checks run against the same math they verify.
inline float fast_exp(float x) {
    x = x < -87.0f ? -87.0f : (x > 88.0f ? 88.0f : x);
    float t = x * 1.4426950408889634f;  // x / ln 2
    float fi = std::floor(t);
    float f = t - fi;
    // 2^f on [0,1), degree-7 (rel. error ~1e-6)
    float p = 1.0f +
              f * (0.69314718f +
                   f * (0.24022651f +
                        f * (0.05550411f +
                             f * (0.00961813f +
                                  f * (0.00133336f + f * (1.5403530e-4f + f * 1.5252734e-5f))))));
    return std::bit_cast<float>((int32_t(fi) + 127) << 23) * p;
}

template <typename T>
inline T sigmoid(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

template <>
inline float sigmoid<float>(float x) {
    return 1.0f / (1.0f + fast_exp(-x));
}

template <typename T>
inline T silu(T x) {
    return x * sigmoid(x);
}

template <typename T>
inline T silu_grad(T x) {
    T s = sigmoid(x);
    return s * (T(1) + x * (T(1) - s));
}

template <typename T>
void silu_forward(const T* in, T* out, int64_t n) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) out[i] = silu(in[i]);
}

/// din = dout * silu'(pre-activation)
template <typename T>
void silu_backward(const T* pre, const T* dout, T* din, int64_t n) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) din[i] = dout[i] * silu_grad(pre[i]);
}

// --- spatial 3x3 convolution (pad 1) -----------------------------------------

/// im2col for one (C,H,W) slab into col[K=C*9, N=H*W].
template <typename T>
void im2col3x3(const T* in, int c, int h, int w, T* col) {
    const int64_t hw = int64_t(h) * w;
    for (int ch = 0; ch < c; ++ch) {
        const T* src = in + int64_t(ch) * hw;
        for (int ky = -1; ky <= 1; ++ky) {
            for (int kx = -1; kx <= 1; ++kx) {
                T* dst = col + (int64_t(ch) * 9 + (ky + 1) * 3 + (kx + 1)) * hw;
                for (int y = 0; y < h; ++y) {
                    int sy = y + ky;
                    T* drow = dst + int64_t(y) * w;
                    if (sy < 0 || sy >= h) {
                        std::memset(drow, 0, size_t(w) * sizeof(T));
                        continue;
                    }
                    const T* srow = src + int64_t(sy) * w;
                    for (int x = 0; x < w; ++x) {
                        int sx = x + kx;
                        drow[x] = (sx < 0 || sx >= w) ? T(0) : srow[sx];
                    }
                }
            }
        }
    }
}

/// col2im accumulate: the transpose of im2col3x3.
template <typename T>
void col2im3x3(const T* col, int c, int h, int w, T* out) {
    const int64_t hw = int64_t(h) * w;
    for (int ch = 0; ch < c; ++ch) {
        T* dst = out + int64_t(ch) * hw;
        for (int ky = -1; ky <= 1; ++ky) {
            for (int kx = -1; kx <= 1; ++kx) {
                const T* src = col + (int64_t(ch) * 9 + (ky + 1) * 3 + (kx + 1)) * hw;
                for (int y = 0; y < h; ++y) {
                    int sy = y + ky;
                    if (sy < 0 || sy >= h) continue;
                    const T* srow = src + int64_t(y) * w;
                    T* drow = dst + int64_t(sy) * w;
                    for (int x = 0; x < w; ++x) {
                        int sx = x + kx;
                        if (sx >= 0 && sx < w) drow[sx] += srow[x];
                    }
                }
            }
        }
    }
}

template <typename T>
struct Workspace {
    std::vector<std::vector<T>> col;  // one im2col buffer per thread
    std::vector<Tensor<T>> wgrad;     // per-thread weight-grad accumulators
    std::vector<std::vector<T>> scratch;  // numbered large temporaries, grow-only

    std::vector<T>& col_for(int tid, int64_t n) {
        if (int(col.size()) <= tid) col.resize(size_t(max_threads()));
        if (int64_t(col[size_t(tid)].size()) < n) col[size_t(tid)].resize(size_t(n));
        return col[size_t(tid)];
    }

    /// Reusable buffer; contents undefined between uses.
    T* buf(size_t slot, int64_t n) {
        if (scratch.size() <= slot) scratch.resize(slot + 1);
        if (int64_t(scratch[slot].size()) < n) scratch[slot].resize(size_t(n));
        return scratch[slot].data();
    }
};

// scratch slot map (one owner at a time; block slots are freed before the
// next block runs)
enum ScratchSlot : size_t {
    kSlotBlockTmp = 0,   // block fwd activation chain / bwd dz3
    kSlotBlockA2 = 1,
    kSlotBlockDa = 2,
    kSlotBlockDz2 = 3,
    kSlotBlockN1 = 4,
    kSlotBlockA1 = 5,
    kSlotBlockDn1 = 6,
    kSlotHeadHn = 7,
    kSlotHeadHa = 8,
    kSlotHeadDha = 9,
    kSlotHeadDhn = 10,
    kSlotDh = 11,
    kSlotDhPrev = 12,
    kSlotLossEps = 13,
    kSlotLossXt = 14,
    kSlotCtlMaskFeat = 15,
};

/// out[(b,f), cout, hw] = w[cout, cin*9] * im2col(in[(b,f)]) + bias.
/// in: (N, Cin, H, W) where N = batch*frames flattened.
template <typename T>
void conv3x3_forward(const Tensor<T>& wgt, const Tensor<T>& bias, const T* in, T* out, int n,
                     int cin, int cout, int h, int w, Workspace<T>& ws) {
    const int64_t hw = int64_t(h) * w;
    const int k = cin * 9;
#pragma omp parallel for schedule(static)
    for (int i = 0; i < n; ++i) {
        auto& col = ws.col_for(thread_id(), int64_t(k) * hw);
        im2col3x3(in + int64_t(i) * cin * hw, cin, h, w, col.data());
        T* dst = out + int64_t(i) * cout * hw;
        for (int c = 0; c < cout; ++c) {
            T bv = bias[c];
            T* row = dst + int64_t(c) * hw;
            for (int64_t p = 0; p < hw; ++p) row[p] = bv;
        }
        gemm(false, false, cout, int(hw), k, T(1), wgt.ptr(), k, col.data(), int(hw), T(1), dst,
             int(hw));
    }
}

/// Backward: accumulates into dwgt/dbias when non-null, writes din (zeroed
/// first) when non-null.
template <typename T>
void conv3x3_backward(const Tensor<T>& wgt, const T* in, const T* dout, T* din, Tensor<T>* dwgt,
                      Tensor<T>* dbias, int n, int cin, int cout, int h, int w, Workspace<T>& ws) {
    const int64_t hw = int64_t(h) * w;
    const int k = cin * 9;
    const int nt = max_threads();
    if (dwgt) {
        if (int(ws.wgrad.size()) < nt) ws.wgrad.resize(size_t(nt));
        for (auto& g : ws.wgrad) {
            if (g.shape != wgt.shape) g = Tensor<T>(wgt.shape);
            else g.fill(T(0));
        }
    }
    std::vector<Tensor<T>> dbias_t(size_t(nt), Tensor<T>(std::vector<int64_t>{cout}));
#pragma omp parallel for schedule(static)
    for (int i = 0; i < n; ++i) {
        int tid = thread_id();
        auto& col = ws.col_for(tid, int64_t(k) * hw * 2);
        T* colbuf = col.data();
        T* dcolbuf = col.data() + int64_t(k) * hw;
        const T* dslab = dout + int64_t(i) * cout * hw;
        if (dwgt) {
            im2col3x3(in + int64_t(i) * cin * hw, cin, h, w, colbuf);
            gemm(false, true, cout, k, int(hw), T(1), dslab, int(hw), colbuf, int(hw), T(1),
                 ws.wgrad[size_t(tid)].ptr(), k);
            for (int c = 0; c < cout; ++c) {
                T acc = T(0);
                const T* row = dslab + int64_t(c) * hw;
                for (int64_t p = 0; p < hw; ++p) acc += row[p];
                dbias_t[size_t(tid)][c] += acc;
            }
        }
        if (din) {
            gemm(true, false, k, int(hw), cout, T(1), wgt.ptr(), k, dslab, int(hw), T(0), dcolbuf,
                 int(hw));
            T* dslab_in = din + int64_t(i) * cin * hw;
            std::memset(dslab_in, 0, size_t(cin) * size_t(hw) * sizeof(T));
            col2im3x3(dcolbuf, cin, h, w, dslab_in);
        }
    }
    if (dwgt) {
        for (int t = 0; t < nt; ++t) {
            for (int64_t j = 0; j < dwgt->numel(); ++j) (*dwgt)[j] += ws.wgrad[size_t(t)][j];
            for (int64_t j = 0; j < dbias->numel(); ++j) (*dbias)[j] += dbias_t[size_t(t)][j];
        }
    }
}

// --- temporal convolution (kernel 3 over frames, zero padded) -----------------

/// wgt: (3, Cout, Cin); in/out: (B, F, C, H, W).
template <typename T>
void conv_temporal_forward(const Tensor<T>& wgt, const Tensor<T>& bias, const T* in, T* out,
                           int batch, int frames, int cin, int cout, int64_t hw) {
    const int64_t in_f = int64_t(cin) * hw, out_f = int64_t(cout) * hw;
#pragma omp parallel for collapse(2) schedule(static)
    for (int b = 0; b < batch; ++b) {
        for (int f = 0; f < frames; ++f) {
            T* dst = out + (int64_t(b) * frames + f) * out_f;
            for (int c = 0; c < cout; ++c) {
                T bv = bias[c];
                T* row = dst + int64_t(c) * hw;
                for (int64_t p = 0; p < hw; ++p) row[p] = bv;
            }
        }
    }
    for (int k = 0; k < 3; ++k) {
        int off = k - 1;
        const T* wk = wgt.ptr() + int64_t(k) * cout * cin;
#pragma omp parallel for collapse(2) schedule(static)
        for (int b = 0; b < batch; ++b) {
            for (int f = 0; f < frames; ++f) {
                int fs = f + off;
                if (fs < 0 || fs >= frames) continue;
                const T* src = in + (int64_t(b) * frames + fs) * in_f;
                T* dst = out + (int64_t(b) * frames + f) * out_f;
                gemm(false, false, cout, int(hw), cin, T(1), wk, cin, src, int(hw), T(1), dst,
                     int(hw));
            }
        }
    }
}

/// din must be zeroed by the caller (accumulates across the 3 taps).
template <typename T>
void conv_temporal_backward(const Tensor<T>& wgt, const T* in, const T* dout, T* din,
                            Tensor<T>* dwgt, Tensor<T>* dbias, int batch, int frames, int cin,
                            int cout, int64_t hw) {
    const int64_t in_f = int64_t(cin) * hw, out_f = int64_t(cout) * hw;
    if (dbias) {
        for (int b = 0; b < batch; ++b)
            for (int f = 0; f < frames; ++f) {
                const T* dslab = dout + (int64_t(b) * frames + f) * out_f;
                for (int c = 0; c < cout; ++c) {
                    T acc = T(0);
                    const T* row = dslab + int64_t(c) * hw;
                    for (int64_t p = 0; p < hw; ++p) acc += row[p];
                    (*dbias)[c] += acc;
                }
            }
    }
    for (int k = 0; k < 3; ++k) {
        int off = k - 1;
        const T* wk = wgt.ptr() + int64_t(k) * cout * cin;
        if (dwgt) {
            T* dwk = dwgt->ptr() + int64_t(k) * cout * cin;
            for (int b = 0; b < batch; ++b) {
                for (int f = 0; f < frames; ++f) {
                    int fs = f + off;
                    if (fs < 0 || fs >= frames) continue;
                    const T* src = in + (int64_t(b) * frames + fs) * in_f;
                    const T* dslab = dout + (int64_t(b) * frames + f) * out_f;
                    // dW_k += dOut(b,f) * in(b,fs)^T
                    gemm(false, true, cout, cin, int(hw), T(1), dslab, int(hw), src, int(hw), T(1),
                         dwk, cin);
                }
            }
        }
        if (din) {
#pragma omp parallel for collapse(2) schedule(static)
            for (int b = 0; b < batch; ++b) {
                for (int f = 0; f < frames; ++f) {
                    int fs = f + off;
                    if (fs < 0 || fs >= frames) continue;
                    const T* dslab = dout + (int64_t(b) * frames + f) * out_f;
                    T* dst = din + (int64_t(b) * frames + fs) * in_f;
                    // dIn(b,fs) += W_k^T * dOut(b,f); fs is unique per (b,f) for fixed k
                    gemm(true, false, cin, int(hw), cout, T(1), wk, cin, dslab, int(hw), T(1), dst,
                         int(hw));
                }
            }
        }
    }
}

// --- 1x1 convolution (per-position channel mix) --------------------------------

/// in: (N, Cin, HW) slabs; out[(i)] = w[cout,cin] * in[(i)] + b.
template <typename T>
void conv1x1_forward(const Tensor<T>& wgt, const Tensor<T>& bias, const T* in, T* out, int n,
                     int cin, int cout, int64_t hw) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < n; ++i) {
        T* dst = out + int64_t(i) * cout * hw;
        for (int c = 0; c < cout; ++c) {
            T bv = bias[c];
            T* row = dst + int64_t(c) * hw;
            for (int64_t p = 0; p < hw; ++p) row[p] = bv;
        }
        gemm(false, false, cout, int(hw), cin, T(1), wgt.ptr(), cin, in + int64_t(i) * cin * hw,
             int(hw), T(1), dst, int(hw));
    }
}

/// din accumulates (+=) when `accumulate_din`; dwgt/dbias may be null.
template <typename T>
void conv1x1_backward(const Tensor<T>& wgt, const T* in, const T* dout, T* din, Tensor<T>* dwgt,
                      Tensor<T>* dbias, int n, int cin, int cout, int64_t hw,
                      bool accumulate_din = true) {
    for (int i = 0; i < n; ++i) {
        const T* dslab = dout + int64_t(i) * cout * hw;
        if (dwgt)
            gemm(false, true, cout, cin, int(hw), T(1), dslab, int(hw), in + int64_t(i) * cin * hw,
                 int(hw), T(1), dwgt->ptr(), cin);
        if (dbias)
            for (int c = 0; c < cout; ++c) {
                T acc = T(0);
                const T* row = dslab + int64_t(c) * hw;
                for (int64_t p = 0; p < hw; ++p) acc += row[p];
                (*dbias)[c] += acc;
            }
    }
    if (din) {
#pragma omp parallel for schedule(static)
        for (int i = 0; i < n; ++i)
            gemm(true, false, cin, int(hw), cout, T(1), wgt.ptr(), cin,
                 dout + int64_t(i) * cout * hw, int(hw), accumulate_din ? T(1) : T(0),
                 din + int64_t(i) * cin * hw, int(hw));
    }
}

// --- RMS norm over channels ----------------------------------------------------

/// in/out: (N, C, HW) with N = batch*frames; normalizes across C per position.
template <typename T>
void rmsnorm_forward(const Tensor<T>& gain, const T* in, T* out, int n, int c, int64_t hw) {
    const T eps = T(1e-5);
#pragma omp parallel for schedule(static)
    for (int i = 0; i < n; ++i) {
        const T* slab = in + int64_t(i) * c * hw;
        T* dst = out + int64_t(i) * c * hw;
        for (int64_t p = 0; p < hw; ++p) {
            T ss = T(0);
            for (int ch = 0; ch < c; ++ch) {
                T v = slab[int64_t(ch) * hw + p];
                ss += v * v;
            }
            T r = T(1) / std::sqrt(ss / T(c) + eps);
            for (int ch = 0; ch < c; ++ch)
                dst[int64_t(ch) * hw + p] = slab[int64_t(ch) * hw + p] * r * gain[ch];
        }
    }
}

template <typename T>
void rmsnorm_backward(const Tensor<T>& gain, const T* in, const T* dout, T* din, Tensor<T>* dgain,
                      int n, int c, int64_t hw) {
    const T eps = T(1e-5);
    std::vector<T> dg(size_t(c), T(0));
    for (int i = 0; i < n; ++i) {
        const T* slab = in + int64_t(i) * c * hw;
        const T* dslab = dout + int64_t(i) * c * hw;
        T* dst = din + int64_t(i) * c * hw;
        for (int64_t p = 0; p < hw; ++p) {
            T ss = T(0);
            for (int ch = 0; ch < c; ++ch) {
                T v = slab[int64_t(ch) * hw + p];
                ss += v * v;
            }
            T inv = T(1) / std::sqrt(ss / T(c) + eps);
            T dot = T(0);
            for (int ch = 0; ch < c; ++ch) {
                T x = slab[int64_t(ch) * hw + p];
                T dy = dslab[int64_t(ch) * hw + p];
                dg[size_t(ch)] += dy * x * inv;
                dot += dy * gain[ch] * x;
            }
            T k = dot * inv * inv * inv / T(c);
            for (int ch = 0; ch < c; ++ch) {
                T x = slab[int64_t(ch) * hw + p];
                T dy = dslab[int64_t(ch) * hw + p];
                dst[int64_t(ch) * hw + p] = dy * gain[ch] * inv - x * k;
            }
        }
    }
    if (dgain)
        for (int ch = 0; ch < c; ++ch) (*dgain)[ch] += dg[size_t(ch)];
}

// --- small dense layers -----------------------------------------------------------

/// out[n, dout] = in[n, din] * w^T + b; w: (dout, din).
template <typename T>
void linear_forward(const Tensor<T>& w, const Tensor<T>& b, const T* in, T* out, int n, int din,
                    int dout) {
    for (int i = 0; i < n; ++i)
        for (int o = 0; o < dout; ++o) out[int64_t(i) * dout + o] = b[o];
    gemm(false, true, n, dout, din, T(1), in, din, w.ptr(), din, T(1), out, dout);
}

template <typename T>
void linear_backward(const Tensor<T>& w, const T* in, const T* dout, T* din, Tensor<T>& dw,
                     Tensor<T>& db, int n, int din_dim, int dout_dim) {
    // dW += dOut^T * in
    gemm(true, false, dout_dim, din_dim, n, T(1), dout, dout_dim, in, din_dim, T(1), dw.ptr(),
         din_dim);
    for (int i = 0; i < n; ++i)
        for (int o = 0; o < dout_dim; ++o) db[o] += dout[int64_t(i) * dout_dim + o];
    if (din)
        gemm(false, false, n, din_dim, dout_dim, T(1), dout, dout_dim, w.ptr(), din_dim, T(0), din,
             din_dim);
}

// --- FiLM (per-sample, per-channel scale/shift broadcast over F,H,W) ---------------

/// u' = u * (1 + scale_bc) + shift_bc; sc: (B, 2C) rows [scale | shift].
template <typename T>
void film_forward(const T* sc, const T* in, T* out, int batch, int frames, int c, int64_t hw) {
#pragma omp parallel for collapse(2) schedule(static)
    for (int b = 0; b < batch; ++b) {
        for (int f = 0; f < frames; ++f) {
            const T* row = sc + int64_t(b) * 2 * c;
            const T* src = in + (int64_t(b) * frames + f) * c * hw;
            T* dst = out + (int64_t(b) * frames + f) * c * hw;
            for (int ch = 0; ch < c; ++ch) {
                T s = T(1) + row[ch], t = row[c + ch];
                const T* si = src + int64_t(ch) * hw;
                T* di = dst + int64_t(ch) * hw;
                for (int64_t p = 0; p < hw; ++p) di[p] = si[p] * s + t;
            }
        }
    }
}

/// dsc may be null (frozen conditioning path).
template <typename T>
void film_backward(const T* sc, const T* in, const T* dout, T* din, T* dsc, int batch, int frames,
                   int c, int64_t hw) {
    for (int b = 0; b < batch; ++b) {
        const T* row = sc + int64_t(b) * 2 * c;
        T* drow = dsc ? dsc + int64_t(b) * 2 * c : nullptr;
        for (int f = 0; f < frames; ++f) {
            const T* src = in + (int64_t(b) * frames + f) * c * hw;
            const T* do_ = dout + (int64_t(b) * frames + f) * c * hw;
            T* di = din + (int64_t(b) * frames + f) * c * hw;
            for (int ch = 0; ch < c; ++ch) {
                T s = T(1) + row[ch];
                T acc_s = T(0), acc_t = T(0);
                const T* si = src + int64_t(ch) * hw;
                const T* doi = do_ + int64_t(ch) * hw;
                T* dii = di + int64_t(ch) * hw;
                for (int64_t p = 0; p < hw; ++p) {
                    acc_s += doi[p] * si[p];
                    acc_t += doi[p];
                    dii[p] = doi[p] * s;
                }
                if (drow) {
                    drow[ch] += acc_s;
                    drow[c + ch] += acc_t;
                }
            }
        }
    }
}

// --- parameter bookkeeping -----------------------------------------------------------

template <typename T>
struct NamedParams {
    std::vector<std::pair<std::string, Tensor<T>*>> items;

    void add(const std::string& name, Tensor<T>& t) { items.push_back({name, &t}); }

    int64_t total() const {
        int64_t n = 0;
        for (auto& [k, t] : items) n += t->numel();
        return n;
    }

    Tensor<T>* find(const std::string& name) const {
        for (auto& [k, t] : items)
            if (k == name) return t;
        return nullptr;
    }
};

}  // namespace kinemask::nn
