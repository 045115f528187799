#include "cdiforge/nn.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "cdiforge/log.hpp"
#include "cdiforge/refine.hpp"

namespace cdiforge {

void NetworkConfig::validate() const {
    if (input_dim < 2) throw std::invalid_argument("NetworkConfig: input_dim too small");
    if (encoder_channels.empty())
        throw std::invalid_argument("NetworkConfig: encoder_channels empty");
    for (int c : encoder_channels)
        if (c < 1) throw std::invalid_argument("NetworkConfig: channel counts must be >= 1");
    if (kernel != 3) throw std::invalid_argument("NetworkConfig: kernel is fixed at 3");
    if (input_dim % (1 << stages()) != 0)
        throw std::invalid_argument("NetworkConfig: input_dim " + std::to_string(input_dim) +
                                    " not divisible by 2^" + std::to_string(stages()));
    if (dropout_rate < 0.0 || dropout_rate >= 1.0)
        throw std::invalid_argument("NetworkConfig: dropout_rate must be in [0, 1)");
}

std::vector<ConvShape> layer_plan(const NetworkConfig& cfg) {
    cfg.validate();
    const int S = cfg.stages();
    const auto& ch = cfg.encoder_channels;
    std::vector<ConvShape> plan;
    plan.reserve(3 * S + 2);
    for (int s = 0; s < S; ++s)
        plan.push_back({s == 0 ? 1 : ch[s - 1], ch[s], cfg.input_dim >> s});
    for (int dec = 0; dec < 2; ++dec) {
        for (int s = 0; s < S; ++s)
            plan.push_back({ch[S - 1 - s], s == S - 1 ? ch[0] : ch[S - 2 - s],
                            cfg.input_dim >> (S - 1 - s)});
        plan.push_back({ch[0], 1, cfg.input_dim});
    }
    return plan;
}

template <typename T>
std::size_t NetworkWeights_<T>::param_count() const {
    std::size_t n = 0;
    for (const auto& c : convs) n += c.param_count();
    return n;
}

template <typename T>
void NetworkWeights_<T>::fill_zero() {
    for (auto& c : convs) {
        std::fill(c.w.begin(), c.w.end(), T(0));
        std::fill(c.b.begin(), c.b.end(), T(0));
    }
}

// ---- direct convolution kernels ----
//
// Same-padded 3x3x3 convolution on a zero-padded copy of the input, so the
// hot loops carry no boundary branches. The z loop runs over a contiguous
// row and vectorizes; output channels are register-blocked.

namespace {

// P[ci][x+1][y+1][z+1] = x[ci][x][y][z], zero border of one voxel.
template <typename T>
void pad_channels(const T* x, int c, int d, T* P) {
    const int pd = d + 2;
    const std::size_t pplane = std::size_t(pd) * pd, pvol = pplane * pd;
    const std::size_t plane = std::size_t(d) * d;
    std::memset(P, 0, std::size_t(c) * pvol * sizeof(T));
    for (int ci = 0; ci < c; ++ci)
        for (int xx = 0; xx < d; ++xx)
            for (int yy = 0; yy < d; ++yy)
                std::memcpy(P + ci * pvol + (xx + 1) * pplane + (yy + 1) * pd + 1,
                            x + ci * plane * d + std::size_t(xx) * plane + std::size_t(yy) * d,
                            std::size_t(d) * sizeof(T));
}

constexpr int kMaxD = 256;  // row buffer bound for the accumulator tiles

// Accumulates B consecutive output channels starting at co0. Weights are
// indexed w[co][ci][kk] with kk = (kx*3 + ky)*3 + kz.
template <typename T, int B>
void conv_rows(const T* P, const T* w, const T* bias, T* out, int c_in, int d, int co0) {
    const int pd = d + 2;
    const std::size_t pplane = std::size_t(pd) * pd, pvol = pplane * pd;
    const std::size_t plane = std::size_t(d) * d, vol = plane * d;
    for (int x = 0; x < d; ++x)
        for (int y = 0; y < d; ++y) {
            T acc[B][kMaxD];
            for (int b = 0; b < B; ++b) {
                const T bv = bias ? bias[co0 + b] : T(0);
                for (int z = 0; z < d; ++z) acc[b][z] = bv;
            }
            for (int ci = 0; ci < c_in; ++ci) {
                const T* Pc = P + ci * pvol;
                for (int kx = 0; kx < 3; ++kx)
                    for (int ky = 0; ky < 3; ++ky) {
                        const T* row = Pc + (x + kx) * pplane + (y + ky) * pd;
                        for (int kz = 0; kz < 3; ++kz) {
                            const T* src = row + kz;
                            const int kk = (kx * 3 + ky) * 3 + kz;
                            T wv[B];
                            for (int b = 0; b < B; ++b)
                                wv[b] = w[(std::size_t(co0 + b) * c_in + ci) * 27 + kk];
                            for (int z = 0; z < d; ++z) {
                                const T s = src[z];
                                for (int b = 0; b < B; ++b) acc[b][z] += wv[b] * s;
                            }
                        }
                    }
            }
            for (int b = 0; b < B; ++b)
                std::memcpy(out + std::size_t(co0 + b) * vol + std::size_t(x) * plane +
                                std::size_t(y) * d,
                            acc[b], std::size_t(d) * sizeof(T));
        }
}

// out[co] = bias[co] + sum_ci w[co][ci] (*) P, blocked over co.
template <typename T>
void conv_padded(const T* P, const T* w, const T* bias, T* out, int c_in, int c_out, int d) {
    if (d > kMaxD) throw std::invalid_argument("conv3d: spatial dim exceeds kernel bound");
    int co = 0;
    for (; co + 8 <= c_out; co += 8) conv_rows<T, 8>(P, w, bias, out, c_in, d, co);
    for (; co + 4 <= c_out; co += 4) conv_rows<T, 4>(P, w, bias, out, c_in, d, co);
    for (; co + 2 <= c_out; co += 2) conv_rows<T, 2>(P, w, bias, out, c_in, d, co);
    for (; co < c_out; ++co) conv_rows<T, 1>(P, w, bias, out, c_in, d, co);
}

}  // namespace

template <typename T>
void conv3d_forward(const Tensor5<T>& x, const ConvParams<T>& p, Tensor5<T>& out,
                    std::vector<T>& pad_ws) {
    if (x.c != p.c_in)
        throw std::invalid_argument("conv3d_forward: input channels " + std::to_string(x.c) +
                                    " != kernel c_in " + std::to_string(p.c_in));
    const int d = x.d, pd = d + 2;
    if (out.n != x.n || out.c != p.c_out || out.d != d) out = Tensor5<T>(x.n, p.c_out, d);
    pad_ws.resize(std::size_t(p.c_in) * pd * pd * pd);
    for (int ni = 0; ni < x.n; ++ni) {
        pad_channels(x.chan(ni, 0), p.c_in, d, pad_ws.data());
        conv_padded(pad_ws.data(), p.w.data(), p.b.data(), out.chan(ni, 0), p.c_in, p.c_out, d);
    }
}

template <typename T>
void conv3d_backward(const Tensor5<T>& x, const ConvParams<T>& p, const Tensor5<T>& grad_out,
                     Tensor5<T>* grad_x, ConvParams<T>* grad_p, std::vector<T>& pad_ws) {
    if (x.c != p.c_in || grad_out.c != p.c_out || grad_out.d != x.d || grad_out.n != x.n)
        throw std::invalid_argument("conv3d_backward: shape mismatch");
    const int d = x.d, pd = d + 2;
    const std::size_t pvol = std::size_t(pd) * pd * pd;
    const std::size_t plane = std::size_t(d) * d, vol = plane * d;

    if (grad_p) {
        if (grad_p->c_in != p.c_in || grad_p->c_out != p.c_out)
            *grad_p = ConvParams<T>(p.c_in, p.c_out);
        std::fill(grad_p->w.begin(), grad_p->w.end(), T(0));
        std::fill(grad_p->b.begin(), grad_p->b.end(), T(0));
    }
    if (grad_x && (grad_x->n != x.n || grad_x->c != x.c || grad_x->d != d))
        *grad_x = Tensor5<T>(x.n, x.c, d);

    static thread_local std::vector<T> pad_g, w_flip;
    for (int ni = 0; ni < x.n; ++ni) {
        if (grad_p) {
            pad_ws.resize(std::size_t(p.c_in) * pvol);
            pad_channels(x.chan(ni, 0), p.c_in, d, pad_ws.data());
            // gw[co][ci][kk] = sum_v gout[co][v] * P[ci][v + off(kk)], computed
            // through per-z accumulator rows so the hot loop stays elementwise
            for (int co = 0; co < p.c_out; ++co) {
                const T* g = grad_out.chan(ni, co);
                double bias_acc = 0.0;
                for (std::size_t v = 0; v < vol; ++v) bias_acc += double(g[v]);
                grad_p->b[co] += T(bias_acc);
                for (int ci = 0; ci < p.c_in; ++ci) {
                    const T* Pc = pad_ws.data() + ci * pvol;
                    T acc[27][kMaxD];
                    for (int kk = 0; kk < 27; ++kk)
                        for (int z = 0; z < d; ++z) acc[kk][z] = T(0);
                    for (int xx = 0; xx < d; ++xx)
                        for (int yy = 0; yy < d; ++yy) {
                            const T* grow = g + std::size_t(xx) * plane + std::size_t(yy) * d;
                            for (int kx = 0; kx < 3; ++kx)
                                for (int ky = 0; ky < 3; ++ky) {
                                    const T* prow = Pc + std::size_t(xx + kx) * pd * pd +
                                                    std::size_t(yy + ky) * pd;
                                    const int kb = (kx * 3 + ky) * 3;
                                    T* a0 = acc[kb];
                                    T* a1 = acc[kb + 1];
                                    T* a2 = acc[kb + 2];
                                    for (int z = 0; z < d; ++z) {
                                        const T gz = grow[z];
                                        a0[z] += gz * prow[z];
                                        a1[z] += gz * prow[z + 1];
                                        a2[z] += gz * prow[z + 2];
                                    }
                                }
                        }
                    T* gw = grad_p->w.data() + (std::size_t(co) * p.c_in + ci) * 27;
                    for (int kk = 0; kk < 27; ++kk) {
                        double s = 0.0;
                        for (int z = 0; z < d; ++z) s += double(acc[kk][z]);
                        gw[kk] += T(s);
                    }
                }
            }
        }
        if (grad_x) {
            // full correlation: conv of gout with the channel-transposed,
            // spatially flipped kernel
            w_flip.resize(p.w.size());
            for (int co = 0; co < p.c_out; ++co)
                for (int ci = 0; ci < p.c_in; ++ci)
                    for (int kk = 0; kk < 27; ++kk)
                        w_flip[(std::size_t(ci) * p.c_out + co) * 27 + (26 - kk)] =
                            p.w[(std::size_t(co) * p.c_in + ci) * 27 + kk];
            pad_g.resize(std::size_t(p.c_out) * pvol);
            pad_channels(grad_out.chan(ni, 0), p.c_out, d, pad_g.data());
            conv_padded(pad_g.data(), w_flip.data(), static_cast<const T*>(nullptr),
                        grad_x->chan(ni, 0), p.c_out, p.c_in, d);
        }
    }
}

template <typename T>
void relu_forward(Tensor5<T>& x) {
    for (auto& v : x.data)
        if (v < T(0)) v = T(0);
}

template <typename T>
void relu_backward(const Tensor5<T>& activated, Tensor5<T>& grad) {
    if (activated.size() != grad.size())
        throw std::invalid_argument("relu_backward: size mismatch");
    for (std::size_t i = 0; i < grad.size(); ++i)
        if (activated.data[i] <= T(0)) grad.data[i] = T(0);
}

template <typename T>
void maxpool2_forward(const Tensor5<T>& x, Tensor5<T>& out, std::vector<std::int32_t>& argmax) {
    if (x.d % 2 != 0)
        throw std::invalid_argument("maxpool2: odd spatial dim " + std::to_string(x.d));
    const int d = x.d, h = d / 2;
    if (out.n != x.n || out.c != x.c || out.d != h) out = Tensor5<T>(x.n, x.c, h);
    argmax.resize(out.size());
    const std::size_t plane = std::size_t(d) * d;
    std::size_t oi = 0;
    for (int ni = 0; ni < x.n; ++ni)
        for (int ci = 0; ci < x.c; ++ci) {
            const T* src = x.chan(ni, ci);
            T* dst = out.chan(ni, ci);
            for (int ox = 0; ox < h; ++ox)
                for (int oy = 0; oy < h; ++oy)
                    for (int oz = 0; oz < h; ++oz) {
                        const std::size_t base =
                            std::size_t(2 * ox) * plane + std::size_t(2 * oy) * d + 2 * oz;
                        T best = src[base];
                        std::int32_t besti = std::int32_t(base);
                        for (int i = 0; i < 2; ++i)
                            for (int j = 0; j < 2; ++j)
                                for (int k = 0; k < 2; ++k) {
                                    const std::size_t idx =
                                        base + std::size_t(i) * plane + std::size_t(j) * d + k;
                                    if (src[idx] > best) {
                                        best = src[idx];
                                        besti = std::int32_t(idx);
                                    }
                                }
                        dst[(std::size_t(ox) * h + oy) * h + oz] = best;
                        argmax[oi++] = besti;
                    }
        }
}

template <typename T>
void maxpool2_backward(const Tensor5<T>& grad_out, const std::vector<std::int32_t>& argmax,
                       Tensor5<T>& grad_x) {
    const int h = grad_out.d, d = 2 * h;
    if (grad_x.n != grad_out.n || grad_x.c != grad_out.c || grad_x.d != d)
        grad_x = Tensor5<T>(grad_out.n, grad_out.c, d);
    std::fill(grad_x.data.begin(), grad_x.data.end(), T(0));
    if (argmax.size() != grad_out.size())
        throw std::invalid_argument("maxpool2_backward: argmax size mismatch");
    std::size_t oi = 0;
    for (int ni = 0; ni < grad_out.n; ++ni)
        for (int ci = 0; ci < grad_out.c; ++ci) {
            const T* g = grad_out.chan(ni, ci);
            T* gx = grad_x.chan(ni, ci);
            const std::size_t cnt = grad_out.spatial();
            for (std::size_t v = 0; v < cnt; ++v) gx[argmax[oi + v]] += g[v];
            oi += cnt;
        }
}

template <typename T>
void upsample2_forward(const Tensor5<T>& x, Tensor5<T>& out) {
    const int d = x.d, D = 2 * d;
    if (out.n != x.n || out.c != x.c || out.d != D) out = Tensor5<T>(x.n, x.c, D);
    const std::size_t plane = std::size_t(D) * D;
    for (int ni = 0; ni < x.n; ++ni)
        for (int ci = 0; ci < x.c; ++ci) {
            const T* src = x.chan(ni, ci);
            T* dst = out.chan(ni, ci);
            for (int xx = 0; xx < d; ++xx)
                for (int yy = 0; yy < d; ++yy) {
                    const T* s = src + (std::size_t(xx) * d + yy) * d;
                    for (int i = 0; i < 2; ++i)
                        for (int j = 0; j < 2; ++j) {
                            T* row = dst + std::size_t(2 * xx + i) * plane +
                                     std::size_t(2 * yy + j) * D;
                            for (int zz = 0; zz < d; ++zz) {
                                row[2 * zz] = s[zz];
                                row[2 * zz + 1] = s[zz];
                            }
                        }
                }
        }
}

template <typename T>
void upsample2_backward(const Tensor5<T>& grad_out, Tensor5<T>& grad_x) {
    const int D = grad_out.d, d = D / 2;
    if (grad_x.n != grad_out.n || grad_x.c != grad_out.c || grad_x.d != d)
        grad_x = Tensor5<T>(grad_out.n, grad_out.c, d);
    const std::size_t plane = std::size_t(D) * D;
    for (int ni = 0; ni < grad_out.n; ++ni)
        for (int ci = 0; ci < grad_out.c; ++ci) {
            const T* g = grad_out.chan(ni, ci);
            T* gx = grad_x.chan(ni, ci);
            for (int xx = 0; xx < d; ++xx)
                for (int yy = 0; yy < d; ++yy) {
                    T* dst = gx + (std::size_t(xx) * d + yy) * d;
                    for (int zz = 0; zz < d; ++zz) dst[zz] = T(0);
                    for (int i = 0; i < 2; ++i)
                        for (int j = 0; j < 2; ++j) {
                            const T* row = g + std::size_t(2 * xx + i) * plane +
                                           std::size_t(2 * yy + j) * D;
                            for (int zz = 0; zz < d; ++zz)
                                dst[zz] += row[2 * zz] + row[2 * zz + 1];
                        }
                }
        }
}

template <typename T>
void dropout_forward(Tensor5<T>& x, double rate, Rng& rng, std::vector<std::uint8_t>& mask) {
    if (rate <= 0.0) {
        mask.clear();
        return;
    }
    const T scale = T(1.0 / (1.0 - rate));
    mask.resize(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const bool keep = rng.uniform() >= rate;
        mask[i] = keep ? 1 : 0;
        x.data[i] = keep ? x.data[i] * scale : T(0);
    }
}

template <typename T>
void dropout_backward(const std::vector<std::uint8_t>& mask, double rate, Tensor5<T>& grad) {
    if (mask.empty()) return;
    if (mask.size() != grad.size())
        throw std::invalid_argument("dropout_backward: mask size mismatch");
    const T scale = T(1.0 / (1.0 - rate));
    for (std::size_t i = 0; i < grad.size(); ++i)
        grad.data[i] = mask[i] ? grad.data[i] * scale : T(0);
}

// ---- network ----

template <typename T>
Network<T>::Network(NetworkConfig cfg, NetworkWeights_<T> weights)
    : cfg_(std::move(cfg)), w_(std::move(weights)) {
    cfg_.validate();
    const auto plan = layer_plan(cfg_);
    if (w_.convs.size() != plan.size())
        throw std::invalid_argument("Network: weights have " + std::to_string(w_.convs.size()) +
                                    " convs, plan needs " + std::to_string(plan.size()));
    for (std::size_t i = 0; i < plan.size(); ++i)
        if (w_.convs[i].c_in != plan[i].c_in || w_.convs[i].c_out != plan[i].c_out)
            throw std::invalid_argument("Network: conv " + std::to_string(i) +
                                        " does not match the layer plan");
}

template <typename T>
Network<T> Network<T>::random_init(const NetworkConfig& cfg, std::uint64_t seed) {
    const auto plan = layer_plan(cfg);
    Rng rng(mix_seed(seed, 0x696e697477747300ULL));
    NetworkWeights_<T> w;
    w.convs.reserve(plan.size());
    for (const auto& shape : plan) {
        ConvParams<T> p(shape.c_in, shape.c_out);
        const double bound = 1.0 / std::sqrt(double(shape.c_in) * 27.0);
        for (auto& v : p.w) v = T(rng.uniform(-bound, bound));
        w.convs.push_back(std::move(p));
    }
    return Network<T>(cfg, std::move(w));
}

namespace {

template <typename T>
void apply_shape_head(Tensor5<T>& x) {
    for (auto& v : x.data) v = T(1) / (T(1) + T(std::exp(-double(v))));
}

template <typename T>
void apply_phase_head(Tensor5<T>& x) {
    for (auto& v : x.data) v = T(M_PI * std::tanh(double(v)));
}

}  // namespace

template <typename T>
void Network<T>::forward(const Tensor5<T>& input, Tensor5<T>& shape_out, Tensor5<T>& phase_out,
                         NetCache<T>* cache, bool training, Rng* dropout_rng) const {
    if (input.c != 1 || input.d != cfg_.input_dim)
        throw std::invalid_argument("Network::forward: expected (n, 1, " +
                                    std::to_string(cfg_.input_dim) + ") input");
    const int S = cfg_.stages();
    const bool drop = training && cfg_.dropout_rate > 0.0 && dropout_rng != nullptr;

    static thread_local std::vector<T> col_ws;
    NetCache<T> local;
    NetCache<T>& c = cache ? *cache : local;
    c.enc_act.assign(S, {});
    c.enc_mask.assign(S, {});
    c.enc_drop.assign(S, {});
    c.enc_argmax.assign(S, {});
    c.enc_pool.assign(S, {});
    if (cache) c.input = input;

    Tensor5<T> cur = input;
    for (int s = 0; s < S; ++s) {
        Tensor5<T> act;
        conv3d_forward(cur, w_.convs[s], act, col_ws);
        relu_forward(act);
        c.enc_act[s] = act;  // post-relu, pre-dropout
        if (drop)
            dropout_forward(act, cfg_.dropout_rate, *dropout_rng, c.enc_mask[s]);
        else
            c.enc_mask[s].clear();
        c.enc_drop[s] = act;
        maxpool2_forward(act, c.enc_pool[s], c.enc_argmax[s]);
        cur = c.enc_pool[s];
    }

    auto run_decoder = [&](int conv_off, bool shape_head, typename NetCache<T>::Decoder& dc,
                           Tensor5<T>& out) {
        dc.up.assign(S, {});
        dc.act.assign(S, {});
        dc.mask.assign(S, {});
        dc.drop.assign(S, {});
        Tensor5<T> t = c.enc_pool[S - 1];
        for (int s = 0; s < S; ++s) {
            upsample2_forward(t, dc.up[s]);
            Tensor5<T> act;
            conv3d_forward(dc.up[s], w_.convs[conv_off + s], act, col_ws);
            relu_forward(act);
            dc.act[s] = act;
            if (drop)
                dropout_forward(act, cfg_.dropout_rate, *dropout_rng, dc.mask[s]);
            else
                dc.mask[s].clear();
            dc.drop[s] = act;
            t = act;
        }
        conv3d_forward(t, w_.convs[conv_off + S], out, col_ws);
        if (shape_head)
            apply_shape_head(out);
        else
            apply_phase_head(out);
        dc.head_out = out;
    };

    run_decoder(S, true, c.shape, shape_out);
    run_decoder(2 * S + 1, false, c.phase, phase_out);
}

template <typename T>
void Network<T>::backward(const NetCache<T>& cache, const Tensor5<T>& g_shape,
                          const Tensor5<T>& g_phase, NetworkWeights_<T>& grads,
                          const BackwardOptions& opt) const {
    const int S = cfg_.stages();
    if (grads.convs.size() != w_.convs.size()) {
        grads.convs.clear();
        for (const auto& p : w_.convs) grads.convs.emplace_back(p.c_in, p.c_out);
    }
    static thread_local std::vector<T> col_ws;

    Tensor5<T> g_latent(cache.enc_pool[S - 1].n, cache.enc_pool[S - 1].c,
                        cache.enc_pool[S - 1].d);

    auto back_decoder = [&](int conv_off, const typename NetCache<T>::Decoder& dc,
                            const Tensor5<T>& g_head, bool shape_head, bool train_dec) {
        if (!train_dec && !opt.train_encoder) return;

        // head derivative from the cached post-activation output
        Tensor5<T> g = g_head;
        const Tensor5<T>& out = dc.head_out;
        if (shape_head) {
            for (std::size_t i = 0; i < g.size(); ++i)
                g.data[i] *= out.data[i] * (T(1) - out.data[i]);
        } else {
            for (std::size_t i = 0; i < g.size(); ++i)
                g.data[i] *= T(M_PI) - out.data[i] * out.data[i] / T(M_PI);
        }

        Tensor5<T> g_in;
        conv3d_backward(dc.drop[S - 1], w_.convs[conv_off + S], g, &g_in,
                        train_dec ? &grads.convs[conv_off + S] : nullptr, col_ws);
        g = std::move(g_in);
        for (int s = S - 1; s >= 0; --s) {
            dropout_backward(dc.mask[s], cfg_.dropout_rate, g);
            relu_backward(dc.act[s], g);
            const bool need_dgrad = s > 0 || opt.train_encoder;
            Tensor5<T> g_up;
            conv3d_backward(dc.up[s], w_.convs[conv_off + s], g, need_dgrad ? &g_up : nullptr,
                            train_dec ? &grads.convs[conv_off + s] : nullptr, col_ws);
            if (!need_dgrad) return;
            Tensor5<T> g_prev;
            upsample2_backward(g_up, g_prev);
            if (s == 0) {
                for (std::size_t i = 0; i < g_latent.size(); ++i)
                    g_latent.data[i] += g_prev.data[i];
            } else {
                g = std::move(g_prev);
            }
        }
    };

    back_decoder(S, cache.shape, g_shape, true, opt.train_shape);
    back_decoder(2 * S + 1, cache.phase, g_phase, false, opt.train_phase);

    if (!opt.train_encoder) return;
    Tensor5<T> g = std::move(g_latent);
    for (int s = S - 1; s >= 0; --s) {
        Tensor5<T> g_drop;
        maxpool2_backward(g, cache.enc_argmax[s], g_drop);
        dropout_backward(cache.enc_mask[s], cfg_.dropout_rate, g_drop);
        relu_backward(cache.enc_act[s], g_drop);
        const Tensor5<T>& x = s == 0 ? cache.input : cache.enc_pool[s - 1];
        Tensor5<T> g_prev;
        conv3d_backward(x, w_.convs[s], g_drop, s > 0 ? &g_prev : nullptr, &grads.convs[s],
                        col_ws);
        if (s > 0) g = std::move(g_prev);
    }
}

// ---- losses ----

LossTerms physics_loss(const RealVolume& shape_pred, const RealVolume& phase_pred,
                       const RealVolume& shape_true, const RealVolume& phase_true,
                       const RealVolume& m, double smoothing_eps, bool normalize_magnitude) {
    const Dims3 d = shape_pred.dims();
    if (!(phase_pred.dims() == d) || !(shape_true.dims() == d) || !(phase_true.dims() == d) ||
        !(m.dims() == d))
        throw std::invalid_argument("physics_loss: dims disagree");
    const std::size_t n = d.count();
    LossTerms t;
    for (std::size_t i = 0; i < n; ++i) {
        t.shape_mae += std::abs(double(shape_pred[i]) - double(shape_true[i]));
        t.phase_mae += std::abs(double(phase_pred[i]) - double(phase_true[i]));
    }
    t.shape_mae /= double(n);
    t.phase_mae /= double(n);

    std::vector<std::complex<double>> rho(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double s = shape_pred[i], p = phase_pred[i];
        rho[i] = {s * std::cos(p), s * std::sin(p)};
    }
    std::vector<double> mm(n);
    for (std::size_t i = 0; i < n; ++i) mm[i] = m[i];
    t.physics = MagnitudeLoss(std::move(mm), d, smoothing_eps, normalize_magnitude).value(rho);
    return t;
}

namespace {

struct StagePlan {
    typename Network<float>::BackwardOptions opt;
    bool use_shape_mae;
    bool use_phase_mae;
};

StagePlan stage_plan(int stage) {
    switch (stage) {
        case 0: return {{true, true, false}, true, false};
        case 1: return {{false, false, true}, false, true};
        case 2: return {{true, false, true}, false, true};
        default: return {{true, true, true}, true, true};
    }
}

// Per-sample loss terms and gradient. The physics-term gradient chains the
// magnitude-loss adjoint through recombine into both heads.
template <typename T>
LossTerms sample_loss_grad(const Network<T>& net, const TrainingSample& sample,
                           const StagePlan& plan, const TrainConfig& cfg,
                           std::uint64_t dropout_seed, NetworkWeights_<T>* grads) {
    const int D = net.config().input_dim;
    const std::size_t n = std::size_t(D) * D * D;
    if (sample.magnitude.size() != n)
        throw std::invalid_argument("train: sample dims do not match the network input");

    Tensor5<T> input(1, 1, D);
    for (std::size_t i = 0; i < n; ++i) input.data[i] = T(sample.magnitude[i]);

    NetCache<T> cache;
    Tensor5<T> s_pred, p_pred;
    Rng drop_rng(dropout_seed);
    net.forward(input, s_pred, p_pred, grads ? &cache : nullptr, grads != nullptr,
                grads ? &drop_rng : nullptr);

    LossTerms terms;
    for (std::size_t i = 0; i < n; ++i) {
        terms.shape_mae += std::abs(double(s_pred.data[i]) - double(sample.shape[i]));
        terms.phase_mae += std::abs(double(p_pred.data[i]) - double(sample.phase[i]));
    }
    terms.shape_mae /= double(n);
    terms.phase_mae /= double(n);

    // physics term through the double-precision magnitude loss
    std::vector<std::complex<double>> rho(n);
    std::vector<double> cosp(n), sinp(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double s = double(s_pred.data[i]), p = double(p_pred.data[i]);
        cosp[i] = std::cos(p);
        sinp[i] = std::sin(p);
        rho[i] = {s * cosp[i], s * sinp[i]};
    }
    std::vector<double> mm(n);
    for (std::size_t i = 0; i < n; ++i) mm[i] = sample.magnitude[i];
    const MagnitudeLoss mloss(std::move(mm), Dims3{D, D, D}, cfg.smoothing_eps,
                              cfg.normalize_magnitude);

    if (!grads) {
        terms.physics = mloss.value(rho);
        return terms;
    }

    auto [physics, G] = mloss.value_and_gradient(rho);
    terms.physics = physics;

    Tensor5<T> g_shape(1, 1, D), g_phase(1, 1, D);
    const double inv_n = 1.0 / double(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double s = double(s_pred.data[i]);
        double gs = cfg.physics_weight * (G[i].real() * cosp[i] + G[i].imag() * sinp[i]);
        double gp =
            cfg.physics_weight * s * (-G[i].real() * sinp[i] + G[i].imag() * cosp[i]);
        if (plan.use_shape_mae) {
            const double r = s - double(sample.shape[i]);
            gs += (r > 0.0 ? 1.0 : r < 0.0 ? -1.0 : 0.0) * inv_n;
        }
        if (plan.use_phase_mae) {
            const double r = double(p_pred.data[i]) - double(sample.phase[i]);
            gp += (r > 0.0 ? 1.0 : r < 0.0 ? -1.0 : 0.0) * inv_n;
        }
        g_shape.data[i] = T(gs);
        g_phase.data[i] = T(gp);
    }

    grads->fill_zero();
    typename Network<T>::BackwardOptions opt;
    opt.train_encoder = plan.opt.train_encoder;
    opt.train_shape = plan.opt.train_shape;
    opt.train_phase = plan.opt.train_phase;
    net.backward(cache, g_shape, g_phase, *grads, opt);
    return terms;
}

}  // namespace

void TrainConfig::validate() const {
    for (int e : stage_epochs)
        if (e < 0) throw std::invalid_argument("TrainConfig: negative epoch count");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("TrainConfig: learning_rate <= 0");
    if (physics_weight < 0.0) throw std::invalid_argument("TrainConfig: physics_weight < 0");
    if (val_fraction < 0.0 || val_fraction >= 1.0)
        throw std::invalid_argument("TrainConfig: val_fraction must be in [0, 1)");
    if (!(smoothing_eps > 0.0)) throw std::invalid_argument("TrainConfig: smoothing_eps <= 0");
}

TrainResult train(const std::vector<TrainingSample>& samples, const NetworkConfig& net_cfg,
                  const TrainConfig& train_cfg) {
    net_cfg.validate();
    train_cfg.validate();
    if (samples.empty()) throw std::invalid_argument("train: empty dataset");

#ifdef _OPENMP
    if (train_cfg.threads > 0) omp_set_num_threads(train_cfg.threads);
#endif

    // deterministic validation split
    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng split_rng(mix_seed(train_cfg.seed, 0x73706c6974736565ULL));
    for (std::size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[split_rng.uniform_int(i)]);
    std::size_t n_val = std::size_t(std::llround(train_cfg.val_fraction * order.size()));
    n_val = std::min(n_val, order.size() - 1);
    std::vector<std::size_t> val_idx(order.begin(), order.begin() + n_val);
    std::vector<std::size_t> train_idx(order.begin() + n_val, order.end());

    Network<float> net = Network<float>::random_init(net_cfg, train_cfg.seed);
    const std::size_t n_params = net.weights().param_count();
    const int S = net_cfg.stages();

    auto conv_trainable = [&](int conv_idx, const StagePlan& plan) {
        if (conv_idx < S) return plan.opt.train_encoder;
        if (conv_idx < 2 * S + 1) return plan.opt.train_shape;
        return plan.opt.train_phase;
    };

    auto validate_epoch = [&](EpochMetrics& em) {
        if (val_idx.empty()) return;
        std::vector<LossTerms> terms(val_idx.size());
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
        for (std::size_t i = 0; i < val_idx.size(); ++i)
            terms[i] = sample_loss_grad<float>(net, samples[val_idx[i]],
                                               stage_plan(3), train_cfg, 0, nullptr);
        double s = 0, p = 0, ph = 0;
        for (const auto& t : terms) {
            s += t.shape_mae;
            p += t.phase_mae;
            ph += t.physics;
        }
        em.val_shape_mae = s / double(terms.size());
        em.val_phase_mae = p / double(terms.size());
        em.val_physics = ph / double(terms.size());
    };

    TrainResult result;

    const int n_slots = train_cfg.batch_size;
    std::vector<NetworkWeights_<float>> slot_grads(n_slots);
    std::vector<LossTerms> slot_terms(n_slots);

    for (int stage = 0; stage < 4; ++stage) {
        const StagePlan plan = stage_plan(stage);
        std::vector<double> m1(n_params, 0.0), m2(n_params, 0.0);
        long step = 0;

        for (int epoch = 0; epoch < train_cfg.stage_epochs[std::size_t(stage)]; ++epoch) {
            Rng shuffle_rng(mix_seed(train_cfg.seed,
                                     0x65706f6368000000ULL + std::uint64_t(stage) * 4096 +
                                         std::uint64_t(epoch)));
            std::vector<std::size_t> idx = train_idx;
            for (std::size_t i = idx.size(); i > 1; --i)
                std::swap(idx[i - 1], idx[shuffle_rng.uniform_int(i)]);

            double epoch_loss = 0.0;
            std::size_t seen = 0;

            for (std::size_t start = 0; start < idx.size(); start += n_slots) {
                const int b = int(std::min(idx.size() - start, std::size_t(n_slots)));
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
                for (int k = 0; k < b; ++k) {
                    const std::size_t si = idx[start + k];
                    const std::uint64_t drop_seed = mix_seed(
                        train_cfg.seed, 0x64726f7000000000ULL ^ (std::uint64_t(stage) << 56) ^
                                            (std::uint64_t(epoch) << 40) ^ si);
                    slot_terms[k] = sample_loss_grad<float>(net, samples[si], plan, train_cfg,
                                                            drop_seed, &slot_grads[k]);
                }

                // fixed-order reduction keeps results identical for any thread count
                std::vector<double> gsum(n_params, 0.0);
                for (int k = 0; k < b; ++k) {
                    std::size_t off = 0;
                    for (const auto& c : slot_grads[k].convs) {
                        for (std::size_t i = 0; i < c.w.size(); ++i) gsum[off + i] += c.w[i];
                        off += c.w.size();
                        for (std::size_t i = 0; i < c.b.size(); ++i) gsum[off + i] += c.b[i];
                        off += c.b.size();
                    }
                    epoch_loss += slot_terms[k].total(train_cfg.physics_weight,
                                                      plan.use_shape_mae, plan.use_phase_mae);
                }
                seen += std::size_t(b);
                const double inv_b = 1.0 / double(b);

                ++step;
                const double b1t = 1.0 - std::pow(train_cfg.adam_beta1, double(step));
                const double b2t = 1.0 - std::pow(train_cfg.adam_beta2, double(step));
                std::size_t off = 0;
                for (std::size_t ci = 0; ci < net.weights().convs.size(); ++ci) {
                    auto& c = net.weights().convs[ci];
                    const bool trainable = conv_trainable(int(ci), plan);
                    auto update = [&](float* w, std::size_t count) {
                        if (trainable)
                            for (std::size_t i = 0; i < count; ++i) {
                                const double g = gsum[off + i] * inv_b;
                                m1[off + i] = train_cfg.adam_beta1 * m1[off + i] +
                                              (1.0 - train_cfg.adam_beta1) * g;
                                m2[off + i] = train_cfg.adam_beta2 * m2[off + i] +
                                              (1.0 - train_cfg.adam_beta2) * g * g;
                                w[i] = float(double(w[i]) -
                                             train_cfg.learning_rate * (m1[off + i] / b1t) /
                                                 (std::sqrt(m2[off + i] / b2t) +
                                                  train_cfg.adam_eps));
                            }
                        off += count;
                    };
                    update(c.w.data(), c.w.size());
                    update(c.b.data(), c.b.size());
                }
            }

            EpochMetrics em;
            em.stage = stage;
            em.epoch = epoch;
            em.train_loss = seen ? epoch_loss / double(seen) : 0.0;
            validate_epoch(em);
            result.metrics.push_back(em);
            CDI_LOG_INFO("stage %d epoch %d: train %.5f val_shape %.5f val_phase %.5f "
                         "val_physics %.5f",
                         stage, epoch, em.train_loss, em.val_shape_mae, em.val_phase_mae,
                         em.val_physics);
        }
    }

    result.weights = net.weights();
    return result;
}

PredictResult predict(const RealVolume& m, const Network<float>& net) {
    const int D = net.config().input_dim;
    if (!(m.dims() == Dims3{D, D, D}))
        throw std::invalid_argument("predict: magnitude dims " + m.dims().str() +
                                    " do not match network input " + std::to_string(D));
    Tensor5<float> input(1, 1, D);
    for (std::size_t i = 0; i < input.size(); ++i) input.data[i] = m[i];

    const auto t0 = std::chrono::steady_clock::now();
    Tensor5<float> s, p;
    net.forward(input, s, p, nullptr, false, nullptr);
    const auto t1 = std::chrono::steady_clock::now();

    PredictResult out;
    out.shape = RealVolume(m.dims());
    out.phase = RealVolume(m.dims());
    for (std::size_t i = 0; i < out.shape.size(); ++i) {
        out.shape[i] = s.data[i];
        out.phase[i] = p.data[i];
    }
    out.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    return out;
}

// ---- weights io ----

namespace {

constexpr unsigned char kWeightsMagic[4] = {'C', 'D', 'N', 'W'};

void put_u32(std::string& s, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) s.push_back(char((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const unsigned char* p) {
    return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 |
           std::uint32_t(p[3]) << 24;
}

void put_f32(std::string& s, float f) {
    std::uint32_t v;
    std::memcpy(&v, &f, 4);
    put_u32(s, v);
}

float get_f32(const unsigned char* p) {
    const std::uint32_t v = get_u32(p);
    float f;
    std::memcpy(&f, &v, 4);
    return f;
}

}  // namespace

void write_weights(const std::filesystem::path& path, const NetworkConfig& cfg,
                   const NetworkWeights& w) {
    const auto plan = layer_plan(cfg);
    if (w.convs.size() != plan.size())
        throw std::invalid_argument("write_weights: weights do not match the layer plan");
    std::string buf;
    buf.append(reinterpret_cast<const char*>(kWeightsMagic), 4);
    buf.push_back(char(1));  // version
    put_u32(buf, std::uint32_t(cfg.input_dim));
    put_u32(buf, std::uint32_t(cfg.encoder_channels.size()));
    for (int c : cfg.encoder_channels) put_u32(buf, std::uint32_t(c));
    put_u32(buf, std::uint32_t(cfg.kernel));
    put_f32(buf, float(cfg.dropout_rate));
    for (const auto& conv : w.convs) {
        for (float v : conv.w) put_f32(buf, v);
        for (float v : conv.b) put_f32(buf, v);
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("write_weights: cannot open " + path.string());
    out.write(buf.data(), std::streamsize(buf.size()));
    if (!out) throw std::runtime_error("write_weights: write failed " + path.string());
}

std::pair<NetworkConfig, NetworkWeights> read_weights(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("read_weights: cannot open " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
    if (bytes.size() < 13 || std::memcmp(bytes.data(), kWeightsMagic, 4) != 0)
        throw std::runtime_error("read_weights: bad magic: " + path.string());
    if (bytes[4] != 1)
        throw std::runtime_error("read_weights: unsupported version: " + path.string());

    std::size_t pos = 5;
    auto need = [&](std::size_t n) {
        if (pos + n > bytes.size())
            throw std::runtime_error("read_weights: truncated file: " + path.string());
    };
    need(8);
    NetworkConfig cfg;
    cfg.input_dim = int(get_u32(&bytes[pos])); pos += 4;
    const std::uint32_t n_stages = get_u32(&bytes[pos]); pos += 4;
    if (n_stages == 0 || n_stages > 16)
        throw std::runtime_error("read_weights: implausible stage count");
    need(4 * n_stages + 8);
    cfg.encoder_channels.clear();
    for (std::uint32_t i = 0; i < n_stages; ++i) {
        cfg.encoder_channels.push_back(int(get_u32(&bytes[pos])));
        pos += 4;
    }
    cfg.kernel = int(get_u32(&bytes[pos])); pos += 4;
    cfg.dropout_rate = double(get_f32(&bytes[pos])); pos += 4;
    cfg.validate();

    const auto plan = layer_plan(cfg);
    NetworkWeights w;
    for (const auto& shape : plan) {
        ConvParams<float> p(shape.c_in, shape.c_out);
        need(4 * (p.w.size() + p.b.size()));
        for (auto& v : p.w) { v = get_f32(&bytes[pos]); pos += 4; }
        for (auto& v : p.b) { v = get_f32(&bytes[pos]); pos += 4; }
        for (float v : p.w)
            if (!std::isfinite(v))
                throw std::runtime_error("read_weights: non-finite weight: " + path.string());
        w.convs.push_back(std::move(p));
    }
    if (pos != bytes.size())
        throw std::runtime_error("read_weights: trailing bytes: " + path.string());
    return {cfg, std::move(w)};
}

// ---- explicit instantiations ----

template struct NetworkWeights_<float>;
template struct NetworkWeights_<double>;
template class Network<float>;
template class Network<double>;

#define CDIFORGE_INSTANTIATE_LAYERS(T)                                                       \
    template void conv3d_forward<T>(const Tensor5<T>&, const ConvParams<T>&, Tensor5<T>&,    \
                                    std::vector<T>&);                                        \
    template void conv3d_backward<T>(const Tensor5<T>&, const ConvParams<T>&,                \
                                     const Tensor5<T>&, Tensor5<T>*, ConvParams<T>*,         \
                                     std::vector<T>&);                                       \
    template void relu_forward<T>(Tensor5<T>&);                                              \
    template void relu_backward<T>(const Tensor5<T>&, Tensor5<T>&);                          \
    template void maxpool2_forward<T>(const Tensor5<T>&, Tensor5<T>&,                        \
                                      std::vector<std::int32_t>&);                           \
    template void maxpool2_backward<T>(const Tensor5<T>&, const std::vector<std::int32_t>&,  \
                                       Tensor5<T>&);                                         \
    template void upsample2_forward<T>(const Tensor5<T>&, Tensor5<T>&);                      \
    template void upsample2_backward<T>(const Tensor5<T>&, Tensor5<T>&);                     \
    template void dropout_forward<T>(Tensor5<T>&, double, Rng&, std::vector<std::uint8_t>&); \
    template void dropout_backward<T>(const std::vector<std::uint8_t>&, double, Tensor5<T>&);

CDIFORGE_INSTANTIATE_LAYERS(float)
CDIFORGE_INSTANTIATE_LAYERS(double)

}  // namespace cdiforge
