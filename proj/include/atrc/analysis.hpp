// Quantitative analyses: multi-task performance delta against single-task
// baselines, permutation importance of CP blocks, and search-reliability
// statistics (percentage agreement, Cohen's and Light's kappa).

#pragma once

#include "atrc/pipeline.hpp"

namespace atrc {

// Average per-task performance drop, in percent:
//   (100/N) * sum_i (-1)^gamma_i (M_model,i - M_base,i) / M_base,i
inline double delta_m(const MetricsReport& model, const MetricsReport& baseline) {
    if (model.values.size() != baseline.values.size() || model.values.empty())
        fail("delta_m", "mismatched task sets");
    double acc = 0.0;
    for (std::size_t i = 0; i < model.values.size(); ++i) {
        if (baseline.values[i] == 0.0)
            fail("delta_m", "zero baseline metric for task '" + baseline.task_names[i] + "'");
        const double rel = (model.values[i] - baseline.values[i]) / baseline.values[i];
        acc += (baseline.gammas[i] == 1 ? -rel : rel);
    }
    return 100.0 * acc / static_cast<double>(model.values.size());
}

struct ImportanceResult {
    std::size_t n_tasks = 0;
    std::vector<double> mean_drop;  // N*N entries, percentage points of delta_m
    std::vector<bool> absent;       // true for severed (none) blocks
    std::size_t repetitions = 0;
    double base_delta_m = 0.0;
};

// Permutation feature importance over CP blocks: the drop in delta_m when
// one block's cached per-sample outputs are shuffled across the evaluation
// split. All blocks replay from the cache, so only the permuted connection
// changes between passes.
template <typename T>
ImportanceResult permutation_importance(MultiTaskNetT<T>& net, const std::vector<Sample>& data,
                                        const std::vector<std::array<std::vector<std::int32_t>, 4>>& regions,
                                        std::size_t batch_size, const MetricsReport& baseline,
                                        std::size_t repetitions = 5, std::uint64_t seed = 0) {
    if (net.n_blocks() == 0) fail("permutation_importance", "network has no CP blocks");
    if (repetitions == 0) fail("permutation_importance", "need at least one repetition");
    const std::size_t count = data.size();
    const std::size_t N = net.n_tasks();

    // cache pass: per-block, per-batch outputs
    std::vector<std::vector<TensorT<T>>> batch_cache;
    MetricsReport plain = evaluate<T>(net, data, regions, batch_size, {}, &batch_cache);
    const double base_dm = delta_m(plain, baseline);

    // re-slice into per-sample maps [dv,H,W]
    std::vector<std::vector<TensorT<T>>> sample_cache(net.n_blocks());
    for (std::size_t j = 0; j < net.n_blocks(); ++j) {
        for (const auto& bt : batch_cache[j]) {
            const Shape& s = bt.shape();  // [B,dv,H,W]
            const std::size_t per = s[1] * s[2] * s[3];
            for (std::size_t b = 0; b < s[0]; ++b) {
                TensorT<T> one({s[1], s[2], s[3]});
                std::copy(bt.data() + b * per, bt.data() + (b + 1) * per, one.data());
                sample_cache[j].push_back(std::move(one));
            }
        }
    }

    ImportanceResult out;
    out.n_tasks = N;
    out.repetitions = repetitions;
    out.base_delta_m = base_dm;
    out.mean_drop.assign(net.n_blocks(), 0.0);
    out.absent.assign(net.n_blocks(), false);

    // assemble a batched tensor from cached samples in a given order
    auto batched_from = [&](std::size_t block, std::size_t first, std::size_t n,
                            const std::vector<std::size_t>& order) {
        const Shape& one = sample_cache[block][0].shape();
        TensorT<T> bt({n, one[0], one[1], one[2]});
        const std::size_t per = one[0] * one[1] * one[2];
        for (std::size_t b = 0; b < n; ++b) {
            const std::size_t src = order.empty() ? first + b : order[first + b];
            std::copy(sample_cache[block][src].data(), sample_cache[block][src].data() + per,
                      bt.data() + b * per);
        }
        return bt;
    };

    std::vector<std::size_t> identity;
    for (std::size_t j = 0; j < net.n_blocks(); ++j) {
        if (net.arch.frozen[j] && *net.arch.frozen[j] == ContextType::kNone) {
            out.absent[j] = true;  // severed connection: importance defined as 0
            continue;
        }
        double drop_acc = 0.0;
        for (std::size_t rep = 0; rep < repetitions; ++rep) {
            CounterRng prng(seed, {rng_stream::kPermutation, j, rep});
            std::vector<std::size_t> perm(count);
            for (std::size_t i = 0; i < count; ++i) perm[i] = i;
            for (std::size_t i = count; i > 1; --i)
                std::swap(perm[i - 1], perm[prng.below(i)]);

            std::vector<TensorT<T>> held;  // keep replacement tensors alive per batch
            auto override_fn = [&](std::size_t block, std::size_t first) -> const TensorT<T>* {
                const std::size_t n = std::min(batch_size, count - first);
                held.push_back(batched_from(block, first, n, block == j ? perm : identity));
                return &held.back();
            };
            MetricsReport permuted = evaluate<T>(net, data, regions, batch_size, override_fn);
            drop_acc += base_dm - delta_m(permuted, baseline);
        }
        out.mean_drop[j] = drop_acc / static_cast<double>(repetitions);
    }
    return out;
}

// ---------------------------------------------------------------------------
// search reliability
// ---------------------------------------------------------------------------

// Mean over unordered run pairs of the per-block agreement fraction.
inline double percentage_agreement(const std::vector<std::vector<ContextType>>& runs) {
    if (runs.size() < 2) fail("percentage_agreement", "need at least 2 runs");
    const std::size_t blocks = runs[0].size();
    for (const auto& r : runs)
        if (r.size() != blocks) fail("percentage_agreement", "run length mismatch");
    if (blocks == 0) fail("percentage_agreement", "empty decision lists");
    double acc = 0.0;
    std::size_t pairs = 0;
    for (std::size_t a = 0; a < runs.size(); ++a)
        for (std::size_t b = a + 1; b < runs.size(); ++b) {
            std::size_t agree = 0;
            for (std::size_t j = 0; j < blocks; ++j)
                if (runs[a][j] == runs[b][j]) ++agree;
            acc += static_cast<double>(agree) / static_cast<double>(blocks);
            ++pairs;
        }
    return acc / static_cast<double>(pairs);
}

// Cohen's kappa with the expected agreement from both raters' marginal
// category frequencies. Degenerate p_e = 1: kappa is 1 for perfect observed
// agreement, 0 otherwise.
inline double cohens_kappa(const std::vector<ContextType>& a, const std::vector<ContextType>& b,
                           std::size_t categories = kNumContextTypes) {
    if (a.size() != b.size()) fail("cohens_kappa", "length mismatch");
    if (a.empty()) fail("cohens_kappa", "empty decision list");
    const double n = static_cast<double>(a.size());
    std::vector<double> fa(categories, 0.0), fb(categories, 0.0);
    double po = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        fa[static_cast<std::size_t>(a[i])] += 1.0;
        fb[static_cast<std::size_t>(b[i])] += 1.0;
        if (a[i] == b[i]) po += 1.0;
    }
    po /= n;
    double pe = 0.0;
    for (std::size_t c = 0; c < categories; ++c) pe += (fa[c] / n) * (fb[c] / n);
    if (pe >= 1.0 - 1e-15) return po >= 1.0 - 1e-15 ? 1.0 : 0.0;
    return (po - pe) / (1.0 - pe);
}

// Light's kappa: Cohen's kappa averaged over all unordered run pairs.
inline double lights_kappa(const std::vector<std::vector<ContextType>>& runs,
                           std::size_t categories = kNumContextTypes) {
    if (runs.size() < 2) fail("lights_kappa", "need at least 2 runs");
    double acc = 0.0;
    std::size_t pairs = 0;
    for (std::size_t a = 0; a < runs.size(); ++a)
        for (std::size_t b = a + 1; b < runs.size(); ++b) {
            acc += cohens_kappa(runs[a], runs[b], categories);
            ++pairs;
        }
    return acc / static_cast<double>(pairs);
}

// Pearson correlation between per-block importance and cross-run agreement.
inline double pearson_correlation(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size() || x.size() < 2) fail("pearson_correlation", "need two equal series");
    const double n = static_cast<double>(x.size());
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) fail("pearson_correlation", "zero variance series");
    return sxy / std::sqrt(sxx * syy);
}

// Per-block agreement fraction across runs (the reliability series that the
// importance correlation consumes).
inline std::vector<double> per_block_agreement(const std::vector<std::vector<ContextType>>& runs) {
    if (runs.size() < 2) fail("per_block_agreement", "need at least 2 runs");
    const std::size_t blocks = runs[0].size();
    std::vector<double> out(blocks, 0.0);
    std::size_t pairs = 0;
    for (std::size_t a = 0; a < runs.size(); ++a)
        for (std::size_t b = a + 1; b < runs.size(); ++b) {
            ++pairs;
            for (std::size_t j = 0; j < blocks; ++j)
                if (runs[a][j] == runs[b][j]) out[j] += 1.0;
        }
    for (auto& v : out) v /= static_cast<double>(pairs);
    return out;
}

// Renders an N x N matrix as an upscaled grayscale PGM heatmap.
inline void export_matrix_pgm(const std::vector<double>& matrix, std::size_t n,
                              const std::string& path, std::size_t cell = 24) {
    if (matrix.size() != n * n) fail("export_matrix_pgm", "matrix size mismatch");
    auto bytes = normalize_to_bytes(matrix);
    std::vector<std::uint8_t> img(n * cell * n * cell);
    for (std::size_t y = 0; y < n * cell; ++y)
        for (std::size_t x = 0; x < n * cell; ++x)
            img[y * n * cell + x] = bytes[(y / cell) * n + (x / cell)];
    write_pgm(path, n * cell, n * cell, img);
}

}  // namespace atrc
