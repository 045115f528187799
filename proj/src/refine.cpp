#include "cdiforge/refine.hpp"

#include <cmath>
#include <stdexcept>

namespace cdiforge {

void RefineConfig::validate() const {
    if (iterations < 1) throw std::invalid_argument("RefineConfig: iterations must be >= 1");
    if (!(step_size > 0.0)) throw std::invalid_argument("RefineConfig: step_size must be > 0");
    if (!(adam_eps > 0.0) || !(smoothing_eps > 0.0))
        throw std::invalid_argument("RefineConfig: eps values must be > 0");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
        throw std::invalid_argument("RefineConfig: adam betas must be in [0, 1)");
    if (support_constraint && !all_finite(*support_constraint))
        throw std::invalid_argument("RefineConfig: non-finite support mask");
}

MagnitudeLoss::MagnitudeLoss(std::vector<double> measured, Dims3 dims, double smoothing_eps,
                             bool normalize)
    : dims_(dims), m_(std::move(measured)), eps_(smoothing_eps), normalize_(normalize) {
    if (m_.size() != dims_.count())
        throw std::invalid_argument("MagnitudeLoss: measured size != dims " + dims_.str());
    if (!dims_.all_even())
        throw std::invalid_argument("MagnitudeLoss: dims must be even, got " + dims_.str());
    if (!(eps_ > 0.0)) throw std::invalid_argument("MagnitudeLoss: smoothing_eps must be > 0");
}

MagnitudeLoss::MagnitudeLoss(const RealVolume& measured, const RefineConfig& cfg)
    : MagnitudeLoss(
          [&] {
              std::vector<double> m(measured.size());
              for (std::size_t i = 0; i < m.size(); ++i) m[i] = measured[i];
              return m;
          }(),
          measured.dims(), cfg.smoothing_eps, cfg.normalize_magnitude) {}

namespace {

// |F| and the normalization scale for one object.
struct Diffracted {
    std::vector<std::complex<double>> f;
    std::vector<double> mag;
    double scale;  // 1 or max |F|
};

Diffracted diffract(const Dims3& dims, const std::vector<std::complex<double>>& rho,
                    bool normalize) {
    Diffracted out;
    out.f = rho;
    detail::fft3_centered_f64(dims, out.f.data(), false);
    out.mag.resize(out.f.size());
    double peak = 0.0;
    for (std::size_t i = 0; i < out.f.size(); ++i) {
        out.mag[i] = std::hypot(out.f[i].real(), out.f[i].imag());
        peak = std::max(peak, out.mag[i]);
    }
    out.scale = (normalize && peak > 0.0) ? peak : 1.0;
    return out;
}

}  // namespace

double MagnitudeLoss::value(const std::vector<std::complex<double>>& rho) const {
    if (rho.size() != m_.size())
        throw std::invalid_argument("MagnitudeLoss: object size mismatch");
    const Diffracted d = diffract(dims_, rho, normalize_);
    const double inv_scale = 1.0 / d.scale;
    double acc = 0.0;
    for (std::size_t i = 0; i < m_.size(); ++i) {
        const double r = d.mag[i] * inv_scale - m_[i];
        acc += std::sqrt(r * r + eps_ * eps_);
    }
    return acc / double(m_.size());
}

std::vector<std::complex<double>> MagnitudeLoss::gradient(
    const std::vector<std::complex<double>>& rho) const {
    return value_and_gradient(rho).second;
}

std::pair<double, std::vector<std::complex<double>>> MagnitudeLoss::value_and_gradient(
    const std::vector<std::complex<double>>& rho) const {
    if (rho.size() != m_.size())
        throw std::invalid_argument("MagnitudeLoss: object size mismatch");
    const std::size_t n = m_.size();
    const Diffracted d = diffract(dims_, rho, normalize_);
    const double inv_scale = 1.0 / d.scale;

    // Chain rule through the unitary-up-to-N transform: with
    // L = (1/N) sum s(|F|/M - m) and G packaged as 2 dL/d(rho*),
    // G = ifft( s'(r) * F / (M (|F| + eps)) ), s'(x) = x / sqrt(x^2 + eps^2).
    // M carries no Jacobian (treated as a constant scale).
    double acc = 0.0;
    std::vector<std::complex<double>> g(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double r = d.mag[i] * inv_scale - m_[i];
        const double sr = std::sqrt(r * r + eps_ * eps_);
        acc += sr;
        const double w = (r / sr) * inv_scale / (d.mag[i] + eps_);
        g[i] = d.f[i] * w;
    }
    detail::fft3_centered_f64(dims_, g.data(), true);
    return {acc / double(n), std::move(g)};
}

namespace {

std::vector<std::complex<double>> to_f64(const ComplexVolume& v) {
    std::vector<std::complex<double>> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i)
        out[i] = {double(v[i].real()), double(v[i].imag())};
    return out;
}

}  // namespace

double magnitude_mae(const ComplexVolume& rho, const RealVolume& m, const RefineConfig& cfg) {
    if (!(rho.dims() == m.dims()))
        throw std::invalid_argument("magnitude_mae: rho dims " + rho.dims().str() +
                                    " != magnitude dims " + m.dims().str());
    return MagnitudeLoss(m, cfg).value(to_f64(rho));
}

ComplexVolume loss_gradient(const ComplexVolume& rho, const RealVolume& m,
                            const RefineConfig& cfg) {
    if (!(rho.dims() == m.dims()))
        throw std::invalid_argument("loss_gradient: rho dims " + rho.dims().str() +
                                    " != magnitude dims " + m.dims().str());
    const auto g = MagnitudeLoss(m, cfg).gradient(to_f64(rho));
    ComplexVolume out(rho.dims());
    for (std::size_t i = 0; i < g.size(); ++i)
        out[i] = {float(g[i].real()), float(g[i].imag())};
    return out;
}

RefineResult refine(const ComplexVolume& rho0, const RealVolume& m, const RefineConfig& cfg) {
    cfg.validate();
    if (!(rho0.dims() == m.dims()))
        throw std::invalid_argument("refine: rho0 dims " + rho0.dims().str() +
                                    " != magnitude dims " + m.dims().str());
    if (cfg.support_constraint && !(cfg.support_constraint->dims() == m.dims()))
        throw std::invalid_argument("refine: support dims mismatch");

    const MagnitudeLoss loss(m, cfg);
    const std::size_t n = m.size();

    std::vector<std::complex<double>> rho = to_f64(rho0);
    std::vector<double> m1(2 * n, 0.0), m2(2 * n, 0.0);  // ADAM moments, re/im interleaved

    RefineResult res;
    res.initial_loss = loss.value(rho);
    res.loss_history.reserve(cfg.iterations);

    std::vector<std::complex<double>> best = rho;
    double best_loss = res.initial_loss;

    for (int it = 0; it < cfg.iterations; ++it) {
        const auto g = loss.gradient(rho);
        const double b1t = 1.0 - std::pow(cfg.adam_beta1, it + 1);
        const double b2t = 1.0 - std::pow(cfg.adam_beta2, it + 1);
        for (std::size_t i = 0; i < n; ++i) {
            const double gr = g[i].real(), gi = g[i].imag();
            m1[2 * i] = cfg.adam_beta1 * m1[2 * i] + (1.0 - cfg.adam_beta1) * gr;
            m1[2 * i + 1] = cfg.adam_beta1 * m1[2 * i + 1] + (1.0 - cfg.adam_beta1) * gi;
            m2[2 * i] = cfg.adam_beta2 * m2[2 * i] + (1.0 - cfg.adam_beta2) * gr * gr;
            m2[2 * i + 1] = cfg.adam_beta2 * m2[2 * i + 1] + (1.0 - cfg.adam_beta2) * gi * gi;
            const double sr = (m1[2 * i] / b1t) / (std::sqrt(m2[2 * i] / b2t) + cfg.adam_eps);
            const double si =
                (m1[2 * i + 1] / b1t) / (std::sqrt(m2[2 * i + 1] / b2t) + cfg.adam_eps);
            rho[i] -= std::complex<double>(cfg.step_size * sr, cfg.step_size * si);
        }
        if (cfg.support_constraint) {
            const RealVolume& s = *cfg.support_constraint;
            for (std::size_t i = 0; i < n; ++i)
                if (s[i] == 0.0f) rho[i] = {0.0, 0.0};
        }
        const double l = loss.value(rho);
        if (!std::isfinite(l))
            throw std::runtime_error("refine: non-finite loss at iteration " +
                                     std::to_string(it) + " (step size too large?)");
        res.loss_history.push_back(l);
        if (l < best_loss) {
            best_loss = l;
            best = rho;
        }
    }

    res.best_loss = best_loss;
    ComplexVolume out(rho0.dims());
    for (std::size_t i = 0; i < n; ++i)
        out[i] = {float(best[i].real()), float(best[i].imag())};
    res.object = std::move(out);
    return res;
}

}  // namespace cdiforge
