#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "cdiforge/crystalgen.hpp"
#include "cdiforge/rng.hpp"
#include "cdiforge/volume.hpp"

namespace cdiforge {

// Dense feature map (batch, channels, d, d, d), z fastest within a channel.
template <typename T>
struct Tensor5 {
    int n = 0, c = 0, d = 0;
    std::vector<T> data;

    Tensor5() = default;
    Tensor5(int n_, int c_, int d_)
        : n(n_), c(c_), d(d_), data(std::size_t(n_) * c_ * d_ * d_ * d_, T(0)) {}

    std::size_t spatial() const { return std::size_t(d) * d * d; }
    std::size_t size() const { return data.size(); }
    T* chan(int ni, int ci) { return data.data() + (std::size_t(ni) * c + ci) * spatial(); }
    const T* chan(int ni, int ci) const {
        return data.data() + (std::size_t(ni) * c + ci) * spatial();
    }
};

struct NetworkConfig {
    int input_dim = 32;
    std::vector<int> encoder_channels {16, 32, 64};  // paper-scale: {64, 128, 256}
    int kernel = 3;                                  // fixed 3x3x3
    double dropout_rate = 0.10;

    int stages() const { return int(encoder_channels.size()); }
    int latent_dim() const { return input_dim >> stages(); }
    void validate() const;
};

template <typename T>
struct ConvParams {
    int c_in = 0, c_out = 0;
    std::vector<T> w;  // c_out * c_in * 27, kernel index (kx*3 + ky)*3 + kz
    std::vector<T> b;  // c_out

    ConvParams() = default;
    ConvParams(int ci, int co)
        : c_in(ci), c_out(co), w(std::size_t(co) * ci * 27, T(0)), b(std::size_t(co), T(0)) {}
    std::size_t param_count() const { return w.size() + b.size(); }
};

// One conv in serialization order: encoder stages, then the shape decoder
// (stage convs plus the final 1-channel conv), then the phase decoder.
struct ConvShape {
    int c_in, c_out, spatial;
};
std::vector<ConvShape> layer_plan(const NetworkConfig& cfg);

template <typename T>
struct NetworkWeights_ {
    std::vector<ConvParams<T>> convs;

    std::size_t param_count() const;
    void fill_zero();
};
using NetworkWeights = NetworkWeights_<float>;

// ---- layer kernels ----
// 3x3x3 cross-correlation, stride 1, zero padding; spatial dims preserved.
template <typename T>
void conv3d_forward(const Tensor5<T>& x, const ConvParams<T>& p, Tensor5<T>& out,
                    std::vector<T>& col_ws);
// Exact adjoints; null grad pointers skip the corresponding computation.
template <typename T>
void conv3d_backward(const Tensor5<T>& x, const ConvParams<T>& p, const Tensor5<T>& grad_out,
                     Tensor5<T>* grad_x, ConvParams<T>* grad_p, std::vector<T>& col_ws);

template <typename T>
void relu_forward(Tensor5<T>& x);
template <typename T>
void relu_backward(const Tensor5<T>& activated, Tensor5<T>& grad);

// Non-overlapping 2x2x2 max pooling; argmax stores the linear offset of the
// winner inside its input channel block, first index on ties.
template <typename T>
void maxpool2_forward(const Tensor5<T>& x, Tensor5<T>& out, std::vector<std::int32_t>& argmax);
template <typename T>
void maxpool2_backward(const Tensor5<T>& grad_out, const std::vector<std::int32_t>& argmax,
                       Tensor5<T>& grad_x);

// Nearest-neighbor doubling; backward sums the 8 replicated positions.
template <typename T>
void upsample2_forward(const Tensor5<T>& x, Tensor5<T>& out);
template <typename T>
void upsample2_backward(const Tensor5<T>& grad_out, Tensor5<T>& grad_x);

// Inverted dropout: zero with probability rate, scale survivors by
// 1/(1 - rate). The mask is recorded for replay in the backward pass.
template <typename T>
void dropout_forward(Tensor5<T>& x, double rate, Rng& rng, std::vector<std::uint8_t>& mask);
template <typename T>
void dropout_backward(const std::vector<std::uint8_t>& mask, double rate, Tensor5<T>& grad);

// ---- network ----
template <typename T>
struct NetCache {
    Tensor5<T> input;
    std::vector<Tensor5<T>> enc_act;   // post-relu
    std::vector<std::vector<std::uint8_t>> enc_mask;
    std::vector<Tensor5<T>> enc_drop;  // post-dropout (pool input)
    std::vector<std::vector<std::int32_t>> enc_argmax;
    std::vector<Tensor5<T>> enc_pool;  // post-pool; back() is the latent
    struct Decoder {
        std::vector<Tensor5<T>> up;    // post-upsample (conv input)
        std::vector<Tensor5<T>> act;   // post-relu
        std::vector<std::vector<std::uint8_t>> mask;
        std::vector<Tensor5<T>> drop;  // post-dropout
        Tensor5<T> head_out;           // post-activation output
    } shape, phase;
};

template <typename T>
class Network {
public:
    Network() = default;
    Network(NetworkConfig cfg, NetworkWeights_<T> weights);
    static Network random_init(const NetworkConfig& cfg, std::uint64_t seed);

    const NetworkConfig& config() const { return cfg_; }
    const NetworkWeights_<T>& weights() const { return w_; }
    NetworkWeights_<T>& weights() { return w_; }

    // Encoder/dual-decoder pass. shape_out in (0,1) via sigmoid, phase_out in
    // (-pi, pi) via pi*tanh. Dropout fires only when training with an rng.
    void forward(const Tensor5<T>& input, Tensor5<T>& shape_out, Tensor5<T>& phase_out,
                 NetCache<T>* cache, bool training, Rng* dropout_rng) const;

    struct BackwardOptions {
        bool train_encoder = true;
        bool train_shape = true;
        bool train_phase = true;
    };
    // grads must be zero-filled with the network's geometry; head gradients
    // are with respect to the post-activation outputs.
    void backward(const NetCache<T>& cache, const Tensor5<T>& g_shape,
                  const Tensor5<T>& g_phase, NetworkWeights_<T>& grads,
                  const BackwardOptions& opt) const;

private:
    NetworkConfig cfg_;
    NetworkWeights_<T> w_;
};

// ---- training ----
struct TrainConfig {
    std::array<int, 4> stage_epochs {10, 10, 5, 5};  // paper-scale: 50 each
    int batch_size = 16;                             // paper-scale: 256
    double learning_rate = 1e-3;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double physics_weight = 1.0;
    double smoothing_eps = 1e-8;
    bool normalize_magnitude = true;
    double val_fraction = 0.1;
    std::uint64_t seed = 0;
    int threads = 0;  // 0 = library default

    void validate() const;
};

struct LossTerms {
    double shape_mae = 0.0;
    double phase_mae = 0.0;
    double physics = 0.0;

    double total(double lambda, bool use_shape, bool use_phase) const {
        return (use_shape ? shape_mae : 0.0) + (use_phase ? phase_mae : 0.0) +
               lambda * physics;
    }
};

// Supervised per-voxel MAE on both heads plus the diffraction-magnitude term.
LossTerms physics_loss(const RealVolume& shape_pred, const RealVolume& phase_pred,
                       const RealVolume& shape_true, const RealVolume& phase_true,
                       const RealVolume& m, double smoothing_eps = 1e-8,
                       bool normalize_magnitude = true);

struct EpochMetrics {
    int stage = 0;
    int epoch = 0;
    double train_loss = 0.0;
    double val_shape_mae = 0.0;
    double val_phase_mae = 0.0;
    double val_physics = 0.0;
};

struct TrainResult {
    NetworkWeights weights;
    std::vector<EpochMetrics> metrics;
};

// The four-stage schedule: (1) encoder + shape decoder, (2) phase decoder
// with the rest frozen, (3) encoder unfrozen alongside the phase decoder,
// (4) joint refinement of all branches. ADAM throughout; per-epoch metrics
// on a held-out validation slice of the provided samples.
TrainResult train(const std::vector<TrainingSample>& samples, const NetworkConfig& net_cfg,
                  const TrainConfig& train_cfg);

struct PredictResult {
    RealVolume shape;
    RealVolume phase;
    double wall_ms = 0.0;
};
PredictResult predict(const RealVolume& m, const Network<float>& net);

// CDNW weights file: magic "CDNW", u8 version, the NetworkConfig header in
// fixed field order, then per-layer f32 tensors in layer-plan order.
void write_weights(const std::filesystem::path& path, const NetworkConfig& cfg,
                   const NetworkWeights& w);
std::pair<NetworkConfig, NetworkWeights> read_weights(const std::filesystem::path& path);

}  // namespace cdiforge
