#pragma once

// Central finite-difference check of the analytic batch gradient on a 2-pair
// batch of random 8x8 tiles. Parameters are initialised in 32-bit and promoted
// to 64-bit for the check.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include <pathossl/net.hpp>

namespace pathossl::testing {

struct GradientCheckResult {
    std::size_t checked = 0;
    std::size_t mismatched = 0;
    double worst_relative_error = 0.0;

    double mismatch_fraction() const { return checked ? static_cast<double>(mismatched) / checked : 0.0; }
};

inline double relative_error(double analytic, double numeric) {
    // the 1e-6 floor keeps gradients that are zero on both sides from
    // dividing by zero
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

inline GradientCheckResult gradient_check(std::uint64_t seed, double step = 1e-3, double tolerance = 1e-3) {
    Architecture arch;
    arch.tile_size = 8;
    const NetParams<double> params = init_params(seed, arch).cast<double>();

    Rng rng(derive_seed(seed, {77}));
    std::vector<Image<double>> images;
    for (int i = 0; i < 4; ++i) {
        Image<double> im(3, 8, 8);
        for (auto& v : im.data) v = rng.uniform();
        images.push_back(std::move(im));
    }
    const std::vector<PairSample<double>> batch{{&images[0], &images[1], PairLabel::similar},
                                                {&images[2], &images[3], PairLabel::dissimilar}};
    const std::span<const PairSample<double>> view(batch);
    const LossHyper hyper;
    const BatchGradient g = backward(params, view, hyper);

    GradientCheckResult r;
    NetParams<double> probe = params;
    for (std::size_t k = 0; k < params.tensors.size(); ++k) {
        for (std::size_t i = 0; i < params.tensors[k].data.size(); ++i) {
            const double orig = params.tensors[k].data[i];
            probe.tensors[k].data[i] = orig + step;
            const double up = batch_loss(probe, view, hyper);
            probe.tensors[k].data[i] = orig - step;
            const double down = batch_loss(probe, view, hyper);
            probe.tensors[k].data[i] = orig;
            const double err = relative_error(g.grads[k][i], (up - down) / (2.0 * step));
            ++r.checked;
            r.mismatched += err > tolerance;
            r.worst_relative_error = std::max(r.worst_relative_error, err);
        }
    }
    return r;
}

}  // namespace pathossl::testing
