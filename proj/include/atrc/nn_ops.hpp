// Neural-network primitives: same-padding convolution, batch normalization,
// windowed local attention, and the task losses. Inputs follow the NCHW
// layout; attention operands are flattened to [batch, pixels, channels].

#pragma once

#include <cstdint>
#include <optional>
#include <span>

#include "atrc/ops.hpp"

namespace atrc {

namespace detail {

// im2col for a 3x3 kernel with zero padding 1: out is [C*9, H*W].
template <typename T>
void im2col3(const T* x, std::size_t C, std::size_t H, std::size_t W, T* col) {
    const std::size_t L = H * W;
    for (std::size_t c = 0; c < C; ++c) {
        const T* xc = x + c * L;
        for (int ky = -1; ky <= 1; ++ky)
            for (int kx = -1; kx <= 1; ++kx) {
                T* row = col + (c * 9 + static_cast<std::size_t>((ky + 1) * 3 + (kx + 1))) * L;
                for (std::size_t y = 0; y < H; ++y) {
                    const long sy = static_cast<long>(y) + ky;
                    if (sy < 0 || sy >= static_cast<long>(H)) {
                        std::fill(row + y * W, row + (y + 1) * W, T(0));
                        continue;
                    }
                    for (std::size_t xw = 0; xw < W; ++xw) {
                        const long sx = static_cast<long>(xw) + kx;
                        row[y * W + xw] = (sx < 0 || sx >= static_cast<long>(W))
                                              ? T(0)
                                              : xc[static_cast<std::size_t>(sy) * W + static_cast<std::size_t>(sx)];
                    }
                }
            }
    }
}

// Transpose of im2col3: scatter-adds [C*9, H*W] columns back into the image.
template <typename T>
void col2im3(const T* col, std::size_t C, std::size_t H, std::size_t W, T* x) {
    const std::size_t L = H * W;
    for (std::size_t c = 0; c < C; ++c) {
        T* xc = x + c * L;
        for (int ky = -1; ky <= 1; ++ky)
            for (int kx = -1; kx <= 1; ++kx) {
                const T* row = col + (c * 9 + static_cast<std::size_t>((ky + 1) * 3 + (kx + 1))) * L;
                for (std::size_t y = 0; y < H; ++y) {
                    const long sy = static_cast<long>(y) + ky;
                    if (sy < 0 || sy >= static_cast<long>(H)) continue;
                    for (std::size_t xw = 0; xw < W; ++xw) {
                        const long sx = static_cast<long>(xw) + kx;
                        if (sx < 0 || sx >= static_cast<long>(W)) continue;
                        xc[static_cast<std::size_t>(sy) * W + static_cast<std::size_t>(sx)] += row[y * W + xw];
                    }
                }
            }
    }
}

}  // namespace detail

// Cross-correlation with stride 1 and same padding; kernel 1 or 3.
// x: [N,C,H,W], w: [O,C,k,k], optional bias [O].
template <typename T>
VarT<T> conv2d(const VarT<T>& x, const VarT<T>& w, const VarT<T>& bias = nullptr) {
    const Shape& xs = x->value.shape();
    const Shape& ws = w->value.shape();
    if (xs.size() != 4) fail("conv2d", "input must be NCHW, got " + shape_str(xs));
    if (ws.size() != 4 || ws[2] != ws[3] || (ws[2] != 1 && ws[2] != 3))
        fail("conv2d", "weight must be [O,I,k,k] with k in {1,3}, got " + shape_str(ws));
    if (xs[1] != ws[1])
        fail("conv2d", "channel mismatch: input " + shape_str(xs) + " vs weight " + shape_str(ws));
    if (bias && bias->value.shape() != Shape{ws[0]})
        fail("conv2d", "bias shape " + shape_str(bias->value.shape()) + " != [O]");

    const std::size_t N = xs[0], C = xs[1], H = xs[2], W = xs[3];
    const std::size_t O = ws[0], k = ws[2], L = H * W;
    TensorT<T> out({N, O, H, W});

    // all samples in one GEMM: columns are (sample, pixel) pairs
    const std::size_t kk = C * k * k;
    AlignedVec<T> col(kk * N * L);
    for (std::size_t n = 0; n < N; ++n) {
        const T* xn = x->value.data() + n * C * L;
        if (k == 1) {
            for (std::size_t c = 0; c < C; ++c)
                std::copy(xn + c * L, xn + (c + 1) * L, col.data() + (c * N + n) * L);
        } else {
            // im2col per sample, written into this sample's column slab
            AlignedVec<T> tmp(kk * L);
            detail::im2col3(xn, C, H, W, tmp.data());
            for (std::size_t r = 0; r < kk; ++r)
                std::copy(tmp.data() + r * L, tmp.data() + (r + 1) * L,
                          col.data() + (r * N + n) * L);
        }
    }
    AlignedVec<T> y(O * N * L);
    detail::gemm(y.data(), w->value.data(), col.data(), O, N * L, kk, false, false, false);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t o = 0; o < O; ++o) {
            const T* src = y.data() + (o * N + n) * L;
            T* dst = out.data() + (n * O + o) * L;
            if (bias) {
                const T bv = bias->value[o];
                for (std::size_t i = 0; i < L; ++i) dst[i] = src[i] + bv;
            } else {
                std::copy(src, src + L, dst);
            }
        }

    std::vector<VarT<T>> parents{x, w};
    if (bias) parents.push_back(bias);
    return make_node<T>(std::move(out), std::move(parents),
                        [N, C, H, W, O, k, L, kk, col = std::move(col)](NodeT<T>& n_) {
        const T* g = n_.grad.data();
        NodeT<T>& px = *n_.parents[0];
        NodeT<T>& pw = *n_.parents[1];
        NodeT<T>* pb = n_.parents.size() > 2 ? n_.parents[2].get() : nullptr;
        // regroup the gradient to match the column layout
        AlignedVec<T> gy(O * N * L);
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t o = 0; o < O; ++o)
                std::copy(g + (n * O + o) * L, g + (n * O + o + 1) * L,
                          gy.data() + (o * N + n) * L);
        if (pw.requires_grad) {
            pw.ensure_grad();
            detail::gemm(pw.grad.data(), gy.data(), col.data(), O, kk, N * L, false, true, true);
        }
        if (px.requires_grad) {
            px.ensure_grad();
            AlignedVec<T> dcol(kk * N * L);
            detail::gemm(dcol.data(), pw.value.data(), gy.data(), kk, N * L, O, true, false, false);
            AlignedVec<T> tmp(kk * L);
            for (std::size_t n = 0; n < N; ++n) {
                T* dxn = px.grad.data() + n * C * L;
                if (k == 1) {
                    for (std::size_t c = 0; c < C; ++c) {
                        const T* src = dcol.data() + (c * N + n) * L;
                        T* dst = dxn + c * L;
                        for (std::size_t i = 0; i < L; ++i) dst[i] += src[i];
                    }
                } else {
                    for (std::size_t r = 0; r < kk; ++r)
                        std::copy(dcol.data() + (r * N + n) * L, dcol.data() + (r * N + n + 1) * L,
                                  tmp.data() + r * L);
                    detail::col2im3(tmp.data(), C, H, W, dxn);
                }
            }
        }
        if (pb && pb->requires_grad) {
            pb->ensure_grad();
            T* db = pb->grad.data();
            for (std::size_t o = 0; o < O; ++o) {
                T acc = T(0);
                const T* go = gy.data() + o * N * L;
                for (std::size_t i = 0; i < N * L; ++i) acc += go[i];
                db[o] += acc;
            }
        }
    });
}

// Batch normalization over NCHW. Training mode normalizes with batch
// statistics (biased variance) and updates the running buffers in place;
// eval mode uses the running buffers. gamma/beta may be null (fixed 1/0).
template <typename T>
VarT<T> batchnorm2d(const VarT<T>& x, const VarT<T>& gamma, const VarT<T>& beta,
                    TensorT<T>& running_mean, TensorT<T>& running_var, bool training,
                    T momentum = T(0.1), T eps = T(1e-5)) {
    const Shape& xs = x->value.shape();
    if (xs.size() != 4) fail("batchnorm2d", "input must be NCHW, got " + shape_str(xs));
    const std::size_t N = xs[0], C = xs[1], H = xs[2], W = xs[3];
    if (running_mean.shape() != Shape{C} || running_var.shape() != Shape{C})
        fail("batchnorm2d", "running stats must be [C] with C=" + std::to_string(C));
    if (gamma && gamma->value.shape() != Shape{C}) fail("batchnorm2d", "gamma must be [C]");
    if (beta && beta->value.shape() != Shape{C}) fail("batchnorm2d", "beta must be [C]");
    const std::size_t L = H * W;
    const std::size_t M = N * L;  // samples per channel

    using BnVec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
    std::vector<T> mean(C), inv_std(C);
    if (training) {
        for (std::size_t c = 0; c < C; ++c) {
            T s = T(0), s2 = T(0);
            for (std::size_t n = 0; n < N; ++n) {
                Eigen::Map<const BnVec> xc(x->value.data() + (n * C + c) * L, L);
                s += xc.sum();
                s2 += xc.squaredNorm();
            }
            const T mu = s / static_cast<T>(M);
            T var = s2 / static_cast<T>(M) - mu * mu;
            if (var < T(0)) var = T(0);
            mean[c] = mu;
            inv_std[c] = T(1) / std::sqrt(var + eps);
            const T unbiased = M > 1 ? var * static_cast<T>(M) / static_cast<T>(M - 1) : var;
            running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * mu;
            running_var[c] = (T(1) - momentum) * running_var[c] + momentum * unbiased;
        }
    } else {
        for (std::size_t c = 0; c < C; ++c) {
            mean[c] = running_mean[c];
            inv_std[c] = T(1) / std::sqrt(running_var[c] + eps);
        }
    }

    TensorT<T> out(xs);
    const T* gm = gamma ? gamma->value.data() : nullptr;
    const T* bt = beta ? beta->value.data() : nullptr;
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            Eigen::Map<const BnVec> xc(x->value.data() + (n * C + c) * L, L);
            Eigen::Map<BnVec> yc(out.data() + (n * C + c) * L, L);
            const T a = (gm ? gm[c] : T(1)) * inv_std[c];
            const T b = (bt ? bt[c] : T(0)) - a * mean[c];
            yc = (a * xc.array() + b).matrix();
        }

    std::vector<VarT<T>> parents{x};
    if (gamma) parents.push_back(gamma);
    if (beta) parents.push_back(beta);
    const bool has_gamma = gamma != nullptr, has_beta = beta != nullptr;
    return make_node<T>(std::move(out), std::move(parents),
                        [N, C, L, M, mean, inv_std, training, has_gamma, has_beta](NodeT<T>& n_) {
        const T* g = n_.grad.data();
        NodeT<T>& px = *n_.parents[0];
        NodeT<T>* pg_ = has_gamma ? n_.parents[1].get() : nullptr;
        NodeT<T>* pb_ = has_beta ? n_.parents[has_gamma ? 2 : 1].get() : nullptr;
        using BnVec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
        for (std::size_t c = 0; c < C; ++c) {
            const T mu = mean[c], inv = inv_std[c];
            const T gmv = pg_ ? pg_->value[c] : T(1);
            T sum_g = T(0), sum_gx = T(0);
            for (std::size_t n = 0; n < N; ++n) {
                Eigen::Map<const BnVec> gc(g + (n * C + c) * L, L);
                Eigen::Map<const BnVec> xc(px.value.data() + (n * C + c) * L, L);
                sum_g += gc.sum();
                sum_gx += (gc.array() * (xc.array() - mu)).sum() * inv;
            }
            if (pg_ && pg_->requires_grad) {
                pg_->ensure_grad();
                pg_->grad[c] += sum_gx;
            }
            if (pb_ && pb_->requires_grad) {
                pb_->ensure_grad();
                pb_->grad[c] += sum_g;
            }
            if (px.requires_grad) {
                px.ensure_grad();
                const T mg = sum_g / static_cast<T>(M);
                const T mgx = sum_gx / static_cast<T>(M);
                for (std::size_t n = 0; n < N; ++n) {
                    Eigen::Map<const BnVec> gc(g + (n * C + c) * L, L);
                    Eigen::Map<const BnVec> xc(px.value.data() + (n * C + c) * L, L);
                    Eigen::Map<BnVec> dxc(px.grad.data() + (n * C + c) * L, L);
                    if (training) {
                        dxc.array() += gmv * inv *
                                       (gc.array() - mg - (xc.array() - mu) * inv * mgx);
                    } else {
                        dxc.array() += gmv * inv * gc.array();
                    }
                }
            }
        }
    });
}

// Scaled-dot-product attention restricted to a b x b spatial window around
// each target pixel. Windows are clipped at the borders (no padding) and the
// softmax runs over the valid neighbors only.
// q, k: [B, L, dk], v: [B, L, dv] with L = H*W; b odd.
template <typename T>
VarT<T> local_attention(const VarT<T>& q, const VarT<T>& k, const VarT<T>& v, std::size_t H,
                        std::size_t W, std::size_t window) {
    const Shape& qs = q->value.shape();
    const Shape& ks = k->value.shape();
    const Shape& vs = v->value.shape();
    if (window % 2 == 0 || window == 0) fail("local_attention", "window extent must be odd");
    if (qs.size() != 3 || ks.size() != 3 || vs.size() != 3)
        fail("local_attention", "expects rank-3 [B,L,d] inputs");
    if (qs[0] != ks[0] || qs[0] != vs[0]) fail("local_attention", "batch mismatch");
    if (qs[1] != H * W || ks[1] != H * W || vs[1] != H * W)
        fail("local_attention", "pixel count must equal H*W");
    if (qs[2] != ks[2]) fail("local_attention", "query/key width mismatch");

    const std::size_t B = qs[0], L = qs[1], dk = qs[2], dv = vs[2];
    const long r = static_cast<long>(window / 2);
    const T scale = T(1) / std::sqrt(static_cast<T>(dk));
    TensorT<T> out({B, L, dv});

    auto window_bounds = [H, W, r](std::size_t pix, long& y0, long& y1, long& x0, long& x1) {
        const long y = static_cast<long>(pix / W), x = static_cast<long>(pix % W);
        y0 = std::max(0L, y - r);
        y1 = std::min(static_cast<long>(H) - 1, y + r);
        x0 = std::max(0L, x - r);
        x1 = std::min(static_cast<long>(W) - 1, x + r);
    };

    // neighbor rows within one window row are contiguous [n, d] blocks, so
    // scoring and weighting run as small vectorized mat-vec products
    using EVec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
    using ERow = detail::EMat<T>;
    AlignedVec<T> scores(window * window);
    EVec weighted(dv);
    for (std::size_t b = 0; b < B; ++b) {
        const T* qb = q->value.data() + b * L * dk;
        const T* kb = k->value.data() + b * L * dk;
        const T* vb = v->value.data() + b * L * dv;
        T* ob = out.data() + b * L * dv;
        for (std::size_t i = 0; i < L; ++i) {
            long y0, y1, x0, x1;
            window_bounds(i, y0, y1, x0, x1);
            const std::size_t nx = static_cast<std::size_t>(x1 - x0 + 1);
            Eigen::Map<const EVec> qi(qb + i * dk, dk);
            std::size_t cnt = 0;
            for (long yy = y0; yy <= y1; ++yy) {
                const std::size_t j0 = static_cast<std::size_t>(yy) * W + static_cast<std::size_t>(x0);
                Eigen::Map<const ERow> K(kb + j0 * dk, nx, dk);
                Eigen::Map<EVec>(scores.data() + cnt, nx).noalias() = K * qi;
                cnt += nx;
            }
            T mx = scores[0];
            for (std::size_t c = 1; c < cnt; ++c) mx = std::max(mx, scores[c]);
            T denom = T(0);
            for (std::size_t c = 0; c < cnt; ++c) {
                scores[c] = std::exp(scores[c] * scale - mx * scale);
                denom += scores[c];
            }
            const T inv = T(1) / denom;
            weighted.setZero();
            cnt = 0;
            for (long yy = y0; yy <= y1; ++yy) {
                const std::size_t j0 = static_cast<std::size_t>(yy) * W + static_cast<std::size_t>(x0);
                Eigen::Map<const ERow> V(vb + j0 * dv, nx, dv);
                weighted.noalias() += V.transpose() * Eigen::Map<const EVec>(scores.data() + cnt, nx);
                cnt += nx;
            }
            Eigen::Map<EVec>(ob + i * dv, dv) = weighted * inv;
        }
    }

    return make_node<T>(std::move(out), {q, k, v},
                        [B, L, dk, dv, H, W, r, scale, window, window_bounds](NodeT<T>& n_) {
        NodeT<T>& pq = *n_.parents[0];
        NodeT<T>& pk = *n_.parents[1];
        NodeT<T>& pv = *n_.parents[2];
        if (pq.requires_grad) pq.ensure_grad();
        if (pk.requires_grad) pk.ensure_grad();
        if (pv.requires_grad) pv.ensure_grad();
        using EVec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
        using ERow = detail::EMat<T>;
        AlignedVec<T> wts(window * window), gs(window * window), ds(window * window);
        for (std::size_t b = 0; b < B; ++b) {
            const T* qb = pq.value.data() + b * L * dk;
            const T* kb = pk.value.data() + b * L * dk;
            const T* vb = pv.value.data() + b * L * dv;
            const T* gb = n_.grad.data() + b * L * dv;
            for (std::size_t i = 0; i < L; ++i) {
                long y0, y1, x0, x1;
                window_bounds(i, y0, y1, x0, x1);
                const std::size_t nx = static_cast<std::size_t>(x1 - x0 + 1);
                Eigen::Map<const EVec> qi(qb + i * dk, dk);
                Eigen::Map<const EVec> gi(gb + i * dv, dv);
                // recompute the softmax weights and the g.v dots per window row
                std::size_t cnt = 0;
                for (long yy = y0; yy <= y1; ++yy) {
                    const std::size_t j0 = static_cast<std::size_t>(yy) * W + static_cast<std::size_t>(x0);
                    Eigen::Map<const ERow> K(kb + j0 * dk, nx, dk);
                    Eigen::Map<const ERow> V(vb + j0 * dv, nx, dv);
                    Eigen::Map<EVec>(wts.data() + cnt, nx).noalias() = K * qi;
                    Eigen::Map<EVec>(gs.data() + cnt, nx).noalias() = V * gi;
                    cnt += nx;
                }
                T mx = wts[0];
                for (std::size_t c = 1; c < cnt; ++c) mx = std::max(mx, wts[c]);
                T denom = T(0);
                for (std::size_t c = 0; c < cnt; ++c) {
                    wts[c] = std::exp(wts[c] * scale - mx * scale);
                    denom += wts[c];
                }
                const T invd = T(1) / denom;
                T gdot = T(0);
                for (std::size_t c = 0; c < cnt; ++c) {
                    wts[c] *= invd;
                    gdot += wts[c] * gs[c];
                }
                for (std::size_t c = 0; c < cnt; ++c) ds[c] = scale * wts[c] * (gs[c] - gdot);

                cnt = 0;
                for (long yy = y0; yy <= y1; ++yy) {
                    const std::size_t j0 = static_cast<std::size_t>(yy) * W + static_cast<std::size_t>(x0);
                    Eigen::Map<const EVec> w_seg(wts.data() + cnt, nx);
                    Eigen::Map<const EVec> d_seg(ds.data() + cnt, nx);
                    if (pv.requires_grad) {
                        Eigen::Map<ERow> dV(pv.grad.data() + (b * L + j0) * dv, nx, dv);
                        dV.noalias() += w_seg * gi.transpose();
                    }
                    if (pq.requires_grad) {
                        Eigen::Map<const ERow> K(kb + j0 * dk, nx, dk);
                        Eigen::Map<EVec> dqi(pq.grad.data() + (b * L + i) * dk, dk);
                        dqi.noalias() += K.transpose() * d_seg;
                    }
                    if (pk.requires_grad) {
                        Eigen::Map<ERow> dK(pk.grad.data() + (b * L + j0) * dk, nx, dk);
                        dK.noalias() += d_seg * qi.transpose();
                    }
                    cnt += nx;
                }
            }
        }
    });
}

// Mean negative log-softmax over non-ignored pixels.
// logits: [B, C, L]; targets: B*L class indices (row-major over batch then pixel).
template <typename T>
VarT<T> cross_entropy(const VarT<T>& logits, std::span<const std::int32_t> targets,
                      std::int32_t ignore_index = -1) {
    const Shape& s = logits->value.shape();
    if (s.size() != 3) fail("cross_entropy", "logits must be [B,C,L], got " + shape_str(s));
    const std::size_t B = s[0], C = s[1], L = s[2];
    if (targets.size() != B * L) fail("cross_entropy", "target count mismatch");

    for (std::int32_t t : targets)
        if (t != ignore_index && (t < 0 || static_cast<std::size_t>(t) >= C))
            fail("cross_entropy", "target " + std::to_string(t) + " outside [0," + std::to_string(C) + ")");

    // row-vectorized over the pixel axis (class rows are contiguous)
    using CeArr = Eigen::Array<T, Eigen::Dynamic, 1>;
    const T* x = logits->value.data();
    double loss = 0.0;
    std::size_t counted = 0;
    CeArr mx(L), se(L);
    for (std::size_t b = 0; b < B; ++b) {
        const T* xb = x + b * C * L;
        mx = Eigen::Map<const CeArr>(xb, L);
        for (std::size_t c = 1; c < C; ++c)
            mx = mx.max(Eigen::Map<const CeArr>(xb + c * L, L));
        se.setZero();
        for (std::size_t c = 0; c < C; ++c)
            se += (Eigen::Map<const CeArr>(xb + c * L, L) - mx).exp();
        for (std::size_t l = 0; l < L; ++l) {
            const std::int32_t t = targets[b * L + l];
            if (t == ignore_index) continue;
            loss += static_cast<double>(mx[l] + std::log(se[l]) -
                                        xb[static_cast<std::size_t>(t) * L + l]);
            ++counted;
        }
    }
    if (counted == 0) fail("cross_entropy", "all pixels ignored, loss undefined");
    const T mean_loss = static_cast<T>(loss / static_cast<double>(counted));

    std::vector<std::int32_t> tcopy(targets.begin(), targets.end());
    return make_node<T>(TensorT<T>::scalar(mean_loss), {logits},
                        [B, C, L, tcopy = std::move(tcopy), ignore_index, counted](NodeT<T>& n_) {
        NodeT<T>& p = *n_.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const T g = n_.grad[0] / static_cast<T>(counted);
        const T* x = p.value.data();
        T* dx = p.grad.data();
        using CeArr = Eigen::Array<T, Eigen::Dynamic, 1>;
        CeArr mx(L), se(L), mask(L);
        for (std::size_t b = 0; b < B; ++b) {
            const T* xb = x + b * C * L;
            T* dxb = dx + b * C * L;
            mx = Eigen::Map<const CeArr>(xb, L);
            for (std::size_t c = 1; c < C; ++c)
                mx = mx.max(Eigen::Map<const CeArr>(xb + c * L, L));
            se.setZero();
            for (std::size_t c = 0; c < C; ++c)
                se += (Eigen::Map<const CeArr>(xb + c * L, L) - mx).exp();
            for (std::size_t l = 0; l < L; ++l)
                mask[l] = tcopy[b * L + l] == ignore_index ? T(0) : g;
            for (std::size_t c = 0; c < C; ++c)
                Eigen::Map<CeArr>(dxb + c * L, L) +=
                    mask * (Eigen::Map<const CeArr>(xb + c * L, L) - mx).exp() / se;
            for (std::size_t l = 0; l < L; ++l) {
                const std::int32_t t = tcopy[b * L + l];
                if (t != ignore_index) dxb[static_cast<std::size_t>(t) * L + l] -= g;
            }
        }
    });
}

// Mean absolute error. With normalize_unit, predictions are rescaled to unit
// Euclidean norm per pixel over the channel axis (norm floored at 1e-6)
// before the comparison; channel count must be 3.
template <typename T>
VarT<T> l1_loss(const VarT<T>& pred, const TensorT<T>& target, bool normalize_unit = false) {
    if (pred->value.shape() != target.shape())
        fail("l1_loss", "shape mismatch " + shape_str(pred->value.shape()) + " vs " + shape_str(target.shape()));
    VarT<T> p = pred;
    if (normalize_unit) {
        const Shape& s = pred->value.shape();
        if (s.size() != 4 || s[1] != 3) fail("l1_loss", "unit normalization expects [N,3,H,W]");
        auto n2 = sum_axis(mul(p, p), 1);                  // [N,1,H,W]
        auto norm = sqrt_op(clamp_min(n2, T(1e-12)));      // norm floored at 1e-6
        p = div_bcast(p, norm, 1);
    }
    return mean_all(abs_op(sub(p, constant(target))));
}

// Pixel-weighted binary cross entropy on logits:
//   mean( w_pos * y * softplus(-x) + w_neg * (1-y) * softplus(x) )
template <typename T>
VarT<T> weighted_bce_loss(const VarT<T>& logits, const TensorT<T>& target, T w_pos, T w_neg) {
    if (logits->value.shape() != target.shape())
        fail("weighted_bce_loss", "shape mismatch " + shape_str(logits->value.shape()) + " vs " +
                                      shape_str(target.shape()));
    if (w_pos < T(0) || w_neg < T(0)) fail("weighted_bce_loss", "weights must be non-negative");
    TensorT<T> pos_mask(target.shape()), neg_mask(target.shape());
    for (std::size_t i = 0; i < target.size(); ++i) {
        pos_mask[i] = w_pos * target[i];
        neg_mask[i] = w_neg * (T(1) - target[i]);
    }
    auto pos_term = mul(constant(std::move(pos_mask)), softplus(neg(logits)));
    auto neg_term = mul(constant(std::move(neg_mask)), softplus(logits));
    return mean_all(add(pos_term, neg_term));
}

}  // namespace atrc
