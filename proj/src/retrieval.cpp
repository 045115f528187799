#include "cdiforge/retrieval.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

#include <cmath>
#include <stdexcept>

#include "cdiforge/log.hpp"

namespace cdiforge {

void PRConfig::validate() const {
    if (average_last < 1 || total_iters < average_last)
        throw std::invalid_argument("PRConfig: need total_iters >= average_last >= 1");
    if (!(beta > 0.0 && beta <= 1.0))
        throw std::invalid_argument("PRConfig: beta must be in (0, 1]");
    if (!(shrinkwrap_threshold > 0.0 && shrinkwrap_threshold < 1.0))
        throw std::invalid_argument("PRConfig: shrinkwrap_threshold must be in (0, 1)");
    if (shrinkwrap_sigma < 0.0)
        throw std::invalid_argument("PRConfig: shrinkwrap_sigma must be >= 0");
    if (shrinkwrap_interval < 0)
        throw std::invalid_argument("PRConfig: shrinkwrap_interval must be >= 0");
    if (block_pattern.empty())
        throw std::invalid_argument("PRConfig: empty block pattern");
    for (const auto& [alg, count] : block_pattern) {
        (void)alg;
        if (count < 1) throw std::invalid_argument("PRConfig: block counts must be >= 1");
    }
    if (!(epsilon > 0.0)) throw std::invalid_argument("PRConfig: epsilon must be > 0");
}

std::size_t Support::count() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < mask.size(); ++i)
        if (mask[i] != 0.0f) ++n;
    return n;
}

ComplexVolume modulus_project(const ComplexVolume& rho, const RealVolume& m, double epsilon) {
    if (!(rho.dims() == m.dims()))
        throw std::invalid_argument("modulus_project: rho dims " + rho.dims().str() +
                                    " != magnitude dims " + m.dims().str());
    ComplexVolume f = fft3_centered(rho);
    for (std::size_t i = 0; i < f.size(); ++i) {
        const double mag = std::hypot(double(f[i].real()), double(f[i].imag()));
        const double w = double(m[i]) / (mag + epsilon);
        f[i] = {float(f[i].real() * w), float(f[i].imag() * w)};
    }
    return ifft3_centered(f);
}

ComplexVolume er_step(const ComplexVolume& rho, const RealVolume& m, const Support& support,
                      double epsilon) {
    ComplexVolume next = modulus_project(rho, m, epsilon);
    for (std::size_t i = 0; i < next.size(); ++i)
        if (support.mask[i] == 0.0f) next[i] = {0.0f, 0.0f};
    return next;
}

ComplexVolume hio_step(const ComplexVolume& rho, const RealVolume& m, const Support& support,
                       double beta, double epsilon) {
    ComplexVolume proj = modulus_project(rho, m, epsilon);
    for (std::size_t i = 0; i < proj.size(); ++i)
        if (support.mask[i] == 0.0f)
            proj[i] = {rho[i].real() - float(beta) * proj[i].real(),
                       rho[i].imag() - float(beta) * proj[i].imag()};
    return proj;
}

Support shrinkwrap(const ComplexVolume& rho, double sigma, double threshold) {
    RealVolume blurred = gaussian_blur(magnitude(rho), sigma);
    const float peak = vmax(blurred);
    const float cut = float(threshold) * peak;
    Support s;
    s.mask = RealVolume(rho.dims(), 0.0f);
    for (std::size_t i = 0; i < blurred.size(); ++i)
        if (blurred[i] >= cut) s.mask[i] = 1.0f;
    return s;
}

double chi2(const ComplexVolume& rho, const RealVolume& m) {
    const RealVolume mag = magnitude(fft3_centered(rho));
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < mag.size(); ++i) {
        const double r = double(mag[i]) - double(m[i]);
        num += r * r;
        den += double(m[i]) * double(m[i]);
    }
    if (den == 0.0) throw std::invalid_argument("chi2: zero magnitude volume");
    return num / den;
}

PRResult run_phase_retrieval(const RealVolume& m, const PRConfig& cfg, Rng& rng) {
    cfg.validate();
    const Dims3 d = m.dims();
    if (!d.all_even())
        throw std::invalid_argument("run_phase_retrieval: dims must be even, got " + d.str());

    ComplexVolume rho(d);
    if (cfg.init) {
        if (!(cfg.init->dims() == d))
            throw std::invalid_argument("run_phase_retrieval: init dims mismatch");
        rho = *cfg.init;
    } else {
        // measured modulus with uniform random phases, back to real space
        ComplexVolume f(d);
        for (std::size_t i = 0; i < f.size(); ++i) {
            const double phi = rng.uniform(0.0, 2.0 * M_PI);
            f[i] = {float(m[i] * std::cos(phi)), float(m[i] * std::sin(phi))};
        }
        rho = ifft3_centered(f);
    }

    Support support;
    support.mask = RealVolume(d, 1.0f);

    // averaging buffer for the last average_last iterates
    std::vector<std::complex<double>> avg(d.count(), {0.0, 0.0});
    int averaged = 0;

    PRResult res;
    res.chi2_history.reserve(cfg.total_iters);

    int block = 0, in_block = 0;
    for (int it = 0; it < cfg.total_iters; ++it) {
        const PRAlgorithm alg = cfg.block_pattern[block].first;
        rho = alg == PRAlgorithm::ER ? er_step(rho, m, support, cfg.epsilon)
                                     : hio_step(rho, m, support, cfg.beta, cfg.epsilon);
        if (++in_block >= cfg.block_pattern[block].second) {
            in_block = 0;
            block = (block + 1) % int(cfg.block_pattern.size());
        }

        if (cfg.shrinkwrap_interval > 0 && (it + 1) % cfg.shrinkwrap_interval == 0) {
            support = shrinkwrap(rho, cfg.shrinkwrap_sigma, cfg.shrinkwrap_threshold);
            if (support.count() == 0)
                throw std::runtime_error("run_phase_retrieval: empty support at iteration " +
                                         std::to_string(it));
        }

        res.chi2_history.push_back(chi2(rho, m));

        if (cfg.total_iters - it <= cfg.average_last) {
            for (std::size_t i = 0; i < avg.size(); ++i)
                avg[i] += std::complex<double>(rho[i].real(), rho[i].imag());
            ++averaged;
        }
    }

    res.rho_avg = ComplexVolume(d);
    for (std::size_t i = 0; i < avg.size(); ++i)
        res.rho_avg[i] = {float(avg[i].real() / averaged), float(avg[i].imag() / averaged)};
    res.final_support = std::move(support);
    res.final_chi2 = chi2(res.rho_avg, m);
    return res;
}

PRResult run_phase_retrieval_restarts(const RealVolume& m, const PRConfig& cfg,
                                      std::uint64_t seed, int restarts, int threads) {
    if (restarts < 1) throw std::invalid_argument("run_phase_retrieval_restarts: restarts < 1");
    std::vector<PRResult> results(restarts);
    std::vector<std::string> errors(restarts);
#ifdef _OPENMP
    if (threads > 0) omp_set_num_threads(threads);
#pragma omp parallel for schedule(dynamic)
#endif
    for (int r = 0; r < restarts; ++r) {
        try {
            Rng rng(mix_seed(seed, 0x7265737461727400ULL + std::uint64_t(r)));
            results[r] = run_phase_retrieval(m, cfg, rng);
        } catch (const std::exception& e) {
            errors[r] = e.what();
        }
    }
    int best = -1;
    for (int r = 0; r < restarts; ++r) {
        if (!errors[r].empty()) {
            CDI_LOG_WARN("restart %d failed: %s", r, errors[r].c_str());
            continue;
        }
        if (best < 0 || results[r].final_chi2 < results[best].final_chi2) best = r;
    }
    if (best < 0)
        throw std::runtime_error("run_phase_retrieval_restarts: every restart failed; last: " +
                                 errors[restarts - 1]);
    return std::move(results[best]);
}

}  // namespace cdiforge
