// Differentiable context-type search: per-block categorical logits, the
// Gumbel-Softmax relaxation, entropy regularization with its linear weight
// schedule, probability-gap freezing, and cross-run voting.

#pragma once

#include <optional>

#include "atrc/contexts.hpp"
#include "atrc/ops.hpp"
#include "atrc/rng.hpp"

namespace atrc {

struct SearchSchedule {
    std::size_t total_iters = 0;
    double lambda_start = 1.0;   // Gumbel-Softmax temperature, annealed linearly
    double lambda_end = 0.05;
    double omega_h_start = -0.02;  // entropy weight, linear ramp
    double omega_h_end = 0.06;
    double freeze_threshold = 0.3;  // on the softmax probability gap
    double alpha_lr = 0.0005;       // Adam, no weight decay
};

inline double lambda_at(std::size_t iter, const SearchSchedule& s) {
    if (s.total_iters == 0) fail("lambda_at", "schedule has zero length");
    if (iter > s.total_iters) fail("lambda_at", "iter exceeds schedule length");
    const double t = static_cast<double>(iter) / static_cast<double>(s.total_iters);
    return s.lambda_start + (s.lambda_end - s.lambda_start) * t;
}

inline double omega_h_at(std::size_t iter, const SearchSchedule& s) {
    if (s.total_iters == 0) fail("omega_h_at", "schedule has zero length");
    if (iter > s.total_iters) fail("omega_h_at", "iter exceeds schedule length");
    const double t = static_cast<double>(iter) / static_cast<double>(s.total_iters);
    return s.omega_h_start + (s.omega_h_end - s.omega_h_start) * t;
}

// Architecture state: one 5-logit row per CP block plus the freeze record.
// The logit tensors live in the model's ParamStore ("arch.alpha.<j>"), so
// they ride along in checkpoints and the Adam state.
template <typename T>
struct ArchParamsT {
    std::vector<VarT<T>> alpha;  // each [5], initialized to zeros
    std::vector<std::optional<ContextType>> frozen;

    std::size_t blocks() const { return alpha.size(); }

    bool all_frozen() const {
        for (const auto& f : frozen)
            if (!f) return false;
        return true;
    }

    std::size_t frozen_count() const {
        std::size_t n = 0;
        for (const auto& f : frozen)
            if (f) ++n;
        return n;
    }

    // Frozen type where set, argmax of the logits otherwise.
    std::vector<ContextType> current_selection() const {
        std::vector<ContextType> out(alpha.size(), ContextType::kNone);
        for (std::size_t j = 0; j < alpha.size(); ++j) {
            if (frozen[j]) {
                out[j] = *frozen[j];
                continue;
            }
            std::size_t best = 0;
            for (std::size_t i = 1; i < kNumContextTypes; ++i)
                if (alpha[j]->value[i] > alpha[j]->value[best]) best = i;
            out[j] = kContextOrder[best];
        }
        return out;
    }
};

// Five Gumbel(0,1) draws for one block.
template <typename T>
TensorT<T> gumbel_noise(CounterRng& rng) {
    TensorT<T> g({kNumContextTypes});
    for (std::size_t i = 0; i < kNumContextTypes; ++i) g[i] = static_cast<T>(rng.gumbel());
    return g;
}

// Softened one-hot sample: softmax((alpha + G) / lambda). Differentiable in
// alpha (the noise enters additively, reparameterization style).
template <typename T>
VarT<T> gumbel_softmax_sample(const VarT<T>& alpha_j, T lambda, const TensorT<T>& noise) {
    if (alpha_j->value.shape() != Shape{kNumContextTypes})
        fail("gumbel_softmax_sample", "alpha must have shape [5]");
    if (noise.shape() != Shape{kNumContextTypes})
        fail("gumbel_softmax_sample", "noise must have shape [5]");
    if (!(lambda > T(0))) fail("gumbel_softmax_sample", "temperature must be positive");
    auto shifted = add(alpha_j, constant(noise));
    return softmax_axis(mul_scalar(shifted, T(1) / lambda), 0);
}

// Convex combination of candidate outputs with weights z (one-hot or a
// Gumbel-Softmax sample).
template <typename T>
VarT<T> mix_candidates(const std::vector<VarT<T>>& outputs, const VarT<T>& z) {
    if (outputs.empty()) fail("mix_candidates", "no candidates");
    if (z->value.shape() != Shape{outputs.size()})
        fail("mix_candidates", "weight count " + shape_str(z->value.shape()) + " != candidates " +
                                   std::to_string(outputs.size()));
    for (const auto& o : outputs)
        if (!same_shape(o->value, outputs[0]->value))
            fail("mix_candidates", "candidate shape mismatch");
    VarT<T> acc;
    for (std::size_t i = 0; i < outputs.size(); ++i) {
        auto term = scale_by(outputs[i], slice(z, 0, i, 1));
        acc = acc ? add(acc, term) : term;
    }
    return acc;
}

// H(softmax(alpha_j)) in nats, as a differentiable graph node.
template <typename T>
VarT<T> block_entropy(const VarT<T>& alpha_j) {
    auto lsm = log_softmax_axis(alpha_j, 0);
    return neg(sum_all(mul(exp_op(lsm), lsm)));
}

// Mean entropy over the unfrozen blocks; zero when everything is frozen.
template <typename T>
VarT<T> entropy_regularizer(const ArchParamsT<T>& arch) {
    VarT<T> acc;
    std::size_t active = 0;
    for (std::size_t j = 0; j < arch.blocks(); ++j) {
        if (arch.frozen[j]) continue;
        auto h = block_entropy(arch.alpha[j]);
        acc = acc ? add(acc, h) : h;
        ++active;
    }
    if (!acc) return constant(TensorT<T>::scalar(T(0)));
    return mul_scalar(acc, T(1) / static_cast<T>(active));
}

// Freezes once the gap between the two largest softmax probabilities exceeds
// the threshold; returns the winning candidate.
template <typename T>
std::optional<ContextType> freeze_check(const TensorT<T>& alpha_j, double threshold = 0.3) {
    if (alpha_j.shape() != Shape{kNumContextTypes}) fail("freeze_check", "alpha must have shape [5]");
    double mx = alpha_j[0];
    for (std::size_t i = 1; i < kNumContextTypes; ++i) mx = std::max(mx, static_cast<double>(alpha_j[i]));
    double denom = 0;
    std::array<double, kNumContextTypes> p{};
    for (std::size_t i = 0; i < kNumContextTypes; ++i) {
        p[i] = std::exp(static_cast<double>(alpha_j[i]) - mx);
        denom += p[i];
    }
    std::size_t first = 0;
    for (std::size_t i = 0; i < kNumContextTypes; ++i) {
        p[i] /= denom;
        if (p[i] > p[first]) first = i;
    }
    double second = -1.0;
    for (std::size_t i = 0; i < kNumContextTypes; ++i)
        if (i != first) second = std::max(second, p[i]);
    if (p[first] - second > threshold) return kContextOrder[first];
    return std::nullopt;
}

// Per-block plurality vote over runs; ties resolve to the lowest candidate
// index in the fixed enumeration order.
inline std::vector<ContextType> vote_final_config(
    const std::vector<std::vector<ContextType>>& runs) {
    if (runs.empty()) fail("vote_final_config", "no runs");
    const std::size_t blocks = runs[0].size();
    for (const auto& r : runs)
        if (r.size() != blocks) fail("vote_final_config", "run block-count mismatch");
    std::vector<ContextType> out(blocks, ContextType::kNone);
    for (std::size_t j = 0; j < blocks; ++j) {
        std::array<std::size_t, kNumContextTypes> tally{};
        for (const auto& r : runs) ++tally[static_cast<std::size_t>(r[j])];
        std::size_t best = 0;
        for (std::size_t c = 1; c < kNumContextTypes; ++c)
            if (tally[c] > tally[best]) best = c;
        out[j] = kContextOrder[best];
    }
    return out;
}

// Vote tallies per block, for the search report.
inline std::vector<std::array<std::size_t, kNumContextTypes>> vote_tallies(
    const std::vector<std::vector<ContextType>>& runs) {
    if (runs.empty()) fail("vote_tallies", "no runs");
    const std::size_t blocks = runs[0].size();
    std::vector<std::array<std::size_t, kNumContextTypes>> out(blocks);
    for (std::size_t j = 0; j < blocks; ++j) {
        out[j].fill(0);
        for (const auto& r : runs) ++out[j][static_cast<std::size_t>(r[j])];
    }
    return out;
}

}  // namespace atrc
