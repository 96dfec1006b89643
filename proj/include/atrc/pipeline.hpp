// Multi-task pipeline: shared backbone, per-task main and auxiliary heads,
// the N x N grid of CP blocks with fusion and prediction layers, the
// training loop (SGD on weights, Adam on architecture logits during search),
// the five-run search driver with voting, evaluation metrics, and bit-exact
// train-state checkpointing.

#pragma once

#include <functional>
#include <future>
#include <map>

#include "atrc/checkpoint.hpp"
#include "atrc/label_space.hpp"
#include "atrc/nas.hpp"
#include "atrc/synth_data.hpp"

namespace atrc {

// ---------------------------------------------------------------------------
// tasks
// ---------------------------------------------------------------------------

enum class TaskKind { kClassification, kDepth, kNormals, kBoundary };

struct TaskSpec {
    std::string name;
    TaskKind kind = TaskKind::kClassification;
    std::size_t out_channels = 1;
    double loss_weight = 1.0;  // omega_n
    int gamma = 0;             // 1 when lower metric is better
    std::size_t regions = 1;   // R_n
};

// The four dense-prediction tasks with the published loss weights.
inline std::vector<TaskSpec> default_tasks(std::size_t depth_bins = 40, std::size_t codewords = 40) {
    return {
        {"semseg", TaskKind::kClassification, kNumClasses, 1.0, 0, kNumClasses},
        {"depth", TaskKind::kDepth, 1, 1.0, 1, depth_bins},
        {"normals", TaskKind::kNormals, 3, 10.0, 1, codewords},
        {"boundary", TaskKind::kBoundary, 1, 50.0, 0, 2},
    };
}

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

enum class ArchMode { kBaseline, kFixed, kSearch, kSearchNoSelf };

struct ModelConfig {
    std::size_t backbone_channels = 16;
    std::size_t backbone_depth = 3;
    std::size_t feat_channels = 16;  // width of F_n
    std::size_t dk = 8;
    std::size_t dv = 8;
    std::size_t local_window = 9;
    ArchMode mode = ArchMode::kSearch;
    std::vector<ContextType> fixed_arch;  // N*N entries when mode == kFixed
    bool gt_regions = false;              // ground-truth region maps (upper bound)
};

struct TrainHyper {
    std::size_t iterations = 1200;
    std::size_t batch_size = 8;
    double lr = 0.01;
    double momentum = 0.9;
    double weight_decay = 0.0005;
    double poly_power = 0.9;
    double bce_pos_weight = 0.8;
    double bce_neg_weight = 0.2;
};

// ---------------------------------------------------------------------------
// label spaces and prepared data
// ---------------------------------------------------------------------------

struct LabelSpaces {
    DepthBinning depth_bins;
    std::shared_ptr<const NormalCodebook> codebook;
};

// Depth range from the training split with a 1% margin; codebook fit on a
// deterministic subsample of the training normals.
inline LabelSpaces build_label_spaces(const std::vector<Sample>& train, std::size_t n_bins,
                                      std::size_t codewords, std::uint64_t seed,
                                      std::size_t max_kmeans_points = 8000) {
    if (train.empty()) fail("build_label_spaces", "empty training split");
    double dmin = 1e300, dmax = -1e300;
    std::size_t total = 0;
    for (const auto& s : train) {
        for (float d : s.depth) {
            dmin = std::min(dmin, static_cast<double>(d));
            dmax = std::max(dmax, static_cast<double>(d));
        }
        total += s.depth.size();
    }
    LabelSpaces out;
    out.depth_bins = build_depth_bins(dmin * 0.99, dmax * 1.01, n_bins);

    const std::size_t stride = std::max<std::size_t>(1, total / max_kmeans_points);
    std::vector<Vec3> normals;
    std::size_t idx = 0;
    for (const auto& s : train) {
        const std::size_t L = s.height * s.width;
        for (std::size_t i = 0; i < L; ++i, ++idx)
            if (idx % stride == 0)
                normals.push_back(
                    {s.normals[i], s.normals[L + i], s.normals[2 * L + i]});
    }
    out.codebook = std::make_shared<NormalCodebook>(fit_normal_codebook(normals, codewords, seed));
    return out;
}

struct PreparedData {
    std::vector<Sample> train, test;
    LabelSpaces spaces;
    // per sample, per task: region index per pixel
    std::vector<std::array<std::vector<std::int32_t>, 4>> train_regions, test_regions;
};

inline std::array<std::vector<std::int32_t>, 4> region_labels_for(const Sample& s,
                                                                  const LabelSpaces& spaces) {
    const std::size_t L = s.height * s.width;
    std::array<std::vector<std::int32_t>, 4> out;
    out[0].assign(s.semseg.begin(), s.semseg.end());
    out[1].resize(L);
    for (std::size_t i = 0; i < L; ++i)
        out[1][i] = static_cast<std::int32_t>(depth_to_region(s.depth[i], spaces.depth_bins));
    out[2].resize(L);
    for (std::size_t i = 0; i < L; ++i) {
        const Vec3 n{s.normals[i], s.normals[L + i], s.normals[2 * L + i]};
        out[2][i] = static_cast<std::int32_t>(nearest_codeword(n, spaces.codebook->codewords));
    }
    out[3].resize(L);
    for (std::size_t i = 0; i < L; ++i) out[3][i] = s.boundary[i] > 0.5f ? 1 : 0;
    return out;
}

inline PreparedData prepare_data(const SceneSpec& scene, std::size_t train_count,
                                 std::size_t test_count, std::size_t depth_bins,
                                 std::size_t codewords, std::uint64_t label_seed) {
    PreparedData d;
    d.train = make_dataset(scene, train_count, Split::kTrain);
    d.test = make_dataset(scene, test_count, Split::kTest);
    d.spaces = build_label_spaces(d.train, depth_bins, codewords, label_seed);
    d.train_regions.reserve(d.train.size());
    for (const auto& s : d.train) d.train_regions.push_back(region_labels_for(s, d.spaces));
    d.test_regions.reserve(d.test.size());
    for (const auto& s : d.test) d.test_regions.push_back(region_labels_for(s, d.spaces));
    return d;
}

// ---------------------------------------------------------------------------
// batches
// ---------------------------------------------------------------------------

template <typename T>
struct BatchT {
    std::size_t size = 0, height = 0, width = 0;
    VarT<T> images;                                    // [B,3,H,W]
    std::vector<std::int32_t> semseg;                  // B*L
    TensorT<T> depth;                                  // [B,1,H,W]
    TensorT<T> normals;                                // [B,3,H,W]
    TensorT<T> boundary;                               // [B,1,H,W]
    std::array<std::vector<std::int32_t>, 4> regions;  // per task, B*L
};

template <typename T>
BatchT<T> make_batch(const std::vector<Sample>& data,
                     const std::vector<std::array<std::vector<std::int32_t>, 4>>& regions,
                     std::span<const std::size_t> indices) {
    if (indices.empty()) fail("make_batch", "empty index list");
    const Sample& first = data[indices[0]];
    const std::size_t B = indices.size(), H = first.height, W = first.width, L = H * W;
    BatchT<T> b;
    b.size = B;
    b.height = H;
    b.width = W;
    TensorT<T> img({B, 3, H, W});
    b.depth = TensorT<T>({B, 1, H, W});
    b.normals = TensorT<T>({B, 3, H, W});
    b.boundary = TensorT<T>({B, 1, H, W});
    b.semseg.resize(B * L);
    for (auto& r : b.regions) r.resize(B * L);
    for (std::size_t bi = 0; bi < B; ++bi) {
        const Sample& s = data[indices[bi]];
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t i = 0; i < L; ++i) {
                img[(bi * 3 + c) * L + i] = static_cast<T>(s.image[c * L + i]);
                b.normals[(bi * 3 + c) * L + i] = static_cast<T>(s.normals[c * L + i]);
            }
        for (std::size_t i = 0; i < L; ++i) {
            b.depth[bi * L + i] = static_cast<T>(s.depth[i]);
            b.boundary[bi * L + i] = static_cast<T>(s.boundary[i]);
            b.semseg[bi * L + i] = s.semseg[i];
        }
        for (std::size_t t = 0; t < 4; ++t)
            std::copy(regions[indices[bi]][t].begin(), regions[indices[bi]][t].end(),
                      b.regions[t].begin() + static_cast<long>(bi * L));
    }
    b.images = constant(std::move(img));
    return b;
}

// Column-stochastic ground-truth region map [B,L,R]; empty regions stay zero.
template <typename T>
TensorT<T> gt_ahat(const std::vector<std::int32_t>& region_labels, std::size_t B, std::size_t L,
                   std::size_t R) {
    TensorT<T> m({B, L, R});
    for (std::size_t b = 0; b < B; ++b) {
        std::vector<std::size_t> counts(R, 0);
        for (std::size_t l = 0; l < L; ++l) {
            const auto r = static_cast<std::size_t>(region_labels[b * L + l]);
            if (r >= R) fail("gt_ahat", "region label out of range");
            ++counts[r];
        }
        for (std::size_t l = 0; l < L; ++l) {
            const auto r = static_cast<std::size_t>(region_labels[b * L + l]);
            m.at({b, l, r}) = T(1) / static_cast<T>(counts[r]);
        }
    }
    return m;
}

// ---------------------------------------------------------------------------
// the network
// ---------------------------------------------------------------------------

template <typename T>
struct ForwardResultT {
    std::vector<VarT<T>> preds;       // per task [B,out,H,W]
    std::vector<VarT<T>> aux_logits;  // per task [B,R,H,W] (ATRC modes only)
    std::vector<VarT<T>> ahat;        // per task [B,L,R]
    std::vector<VarT<T>> cp_outputs;  // N*N entries (ATRC modes only)
};

template <typename T>
struct ForwardOptionsT {
    bool training = true;
    // per-block mixing weights for unfrozen blocks during search
    const std::vector<VarT<T>>* mix_weights = nullptr;
    // ground-truth region maps, per task [B,L,R]
    const std::vector<TensorT<T>>* gt_region_maps = nullptr;
    // permutation-importance override: replacement output for a block
    std::function<const TensorT<T>*(std::size_t block)> cp_override;
};

template <typename T>
class MultiTaskNetT {
public:
    ParamStoreT<T> params;
    ArchParamsT<T> arch;  // populated in the search modes

    MultiTaskNetT(const ModelConfig& cfg, std::vector<TaskSpec> tasks, std::uint64_t init_seed)
        : cfg_(cfg), tasks_(std::move(tasks)) {
        if (tasks_.size() < 2) fail("MultiTaskNet", "need at least 2 tasks");
        const std::size_t N = tasks_.size();
        const std::size_t C = cfg_.backbone_channels, F = cfg_.feat_channels;

        backbone_.emplace_back(params, "backbone.0", 3, C, 3, init_seed, Activation::kRelu);
        for (std::size_t i = 1; i < cfg_.backbone_depth; ++i)
            backbone_.emplace_back(params, "backbone." + std::to_string(i), C, C, 3, init_seed,
                                   Activation::kRelu);

        const bool with_atrc = cfg_.mode != ArchMode::kBaseline;
        for (std::size_t t = 0; t < N; ++t) {
            const std::string tn = "task." + tasks_[t].name;
            heads_.emplace_back(params, tn + ".head", C, F, 3, init_seed, Activation::kRelu);
            if (with_atrc) {
                aux1_.emplace_back(params, tn + ".aux1", C, C, 1, init_seed, Activation::kRelu);
                aux2_.emplace_back(params, tn + ".aux2", C, tasks_[t].regions, 1, init_seed, true);
                fuse_conv_.emplace_back(params, tn + ".fuse", N * cfg_.dv, F, 1, init_seed, false);
                fuse_bn_.emplace_back(params, tn + ".fuse.bn", F, true);
                post_.emplace_back(params, tn + ".post", 2 * F, F, 1, init_seed, Activation::kRelu);
            } else {
                post_.emplace_back(params, tn + ".post", F, F, 1, init_seed, Activation::kRelu);
            }
            pred_.emplace_back(params, tn + ".pred", F, tasks_[t].out_channels, 1, init_seed, true);
        }

        if (with_atrc) {
            CpBlockConfig bc;
            bc.feat_ch = F;
            bc.dk = cfg_.dk;
            bc.dv = cfg_.dv;
            bc.window = LocalWindow{cfg_.local_window};
            if (cfg_.mode == ArchMode::kFixed && cfg_.fixed_arch.size() != N * N)
                fail("MultiTaskNet", "fixed architecture must list " + std::to_string(N * N) +
                                         " blocks");
            arch.frozen.resize(N * N);
            for (std::size_t t = 0; t < N; ++t)
                for (std::size_t s = 0; s < N; ++s) {
                    const std::size_t j = t * N + s;
                    const std::string bn =
                        "cp." + tasks_[t].name + "." + tasks_[s].name;
                    std::array<bool, kNumContextTypes> mask{true, true, true, true, true};
                    if (cfg_.mode == ArchMode::kFixed) {
                        mask = {false, false, false, false, false};
                        if (cfg_.fixed_arch[j] != ContextType::kNone)
                            mask[static_cast<std::size_t>(cfg_.fixed_arch[j])] = true;
                        arch.frozen[j] = cfg_.fixed_arch[j];
                    } else if (cfg_.mode == ArchMode::kSearchNoSelf && t == s) {
                        mask = {false, false, false, false, false};
                        arch.frozen[j] = ContextType::kNone;
                    }
                    cp_.emplace_back(params, bn, bc, init_seed, mask);
                    arch.alpha.push_back(
                        params.add("arch.alpha." + std::to_string(j), TensorT<T>({kNumContextTypes}),
                                   cfg_.mode == ArchMode::kSearch || cfg_.mode == ArchMode::kSearchNoSelf));
                }
            // fixed blocks never update their logits
            if (cfg_.mode == ArchMode::kFixed)
                for (std::size_t j = 0; j < N * N; ++j) params.set_trainable_prefix("arch.alpha." + std::to_string(j), false);
            if (cfg_.mode == ArchMode::kSearchNoSelf)
                for (std::size_t t = 0; t < N; ++t)
                    params.set_trainable_prefix("arch.alpha." + std::to_string(t * N + t), false);
        }
    }

    const ModelConfig& config() const { return cfg_; }
    const std::vector<TaskSpec>& tasks() const { return tasks_; }
    std::size_t n_tasks() const { return tasks_.size(); }
    std::size_t n_blocks() const { return cp_.size(); }
    const CpBlockT<T>& cp_block(std::size_t j) const { return cp_[j]; }

    // Marks the unused candidates of a frozen block as fixed (they stop
    // receiving optimizer updates and are skipped in the forward pass).
    void freeze_block(std::size_t j, ContextType c) {
        arch.frozen[j] = c;
        params.set_trainable_prefix("arch.alpha." + std::to_string(j), false);
        for (ContextType other : kContextOrder) {
            if (other == c || other == ContextType::kNone) continue;
            params.set_trainable_prefix(cp_[j].candidate_prefix(other), false);
        }
    }

    ForwardResultT<T> forward(const BatchT<T>& batch, const ForwardOptionsT<T>& opts) {
        const std::size_t N = tasks_.size();
        const std::size_t H = batch.height, W = batch.width, L = H * W;
        ForwardResultT<T> out;

        VarT<T> x = batch.images;
        for (const auto& layer : backbone_) x = layer(x, opts.training);

        std::vector<VarT<T>> feats(N);
        for (std::size_t t = 0; t < N; ++t) feats[t] = heads_[t](x, opts.training);

        if (cfg_.mode == ArchMode::kBaseline) {
            for (std::size_t t = 0; t < N; ++t)
                out.preds.push_back(pred_[t](post_[t](feats[t], opts.training)));
            return out;
        }

        // auxiliary region maps; backpropagation into the trunk is stopped
        auto trunk_detached = stop_gradient(x);
        out.aux_logits.resize(N);
        out.ahat.resize(N);
        for (std::size_t t = 0; t < N; ++t) {
            out.aux_logits[t] = aux2_[t](aux1_[t](trunk_detached, opts.training));
            if (opts.gt_region_maps) {
                out.ahat[t] = constant((*opts.gt_region_maps)[t]);
            } else {
                // spatial softmax: each region column becomes a distribution
                // over pixels
                auto flat = reshape(out.aux_logits[t], {batch.size, tasks_[t].regions, L});
                out.ahat[t] = permute(softmax_axis(flat, 2), {0, 2, 1});  // [B,L,R]
            }
        }

        out.cp_outputs.resize(N * N);
        for (std::size_t t = 0; t < N; ++t)
            for (std::size_t s = 0; s < N; ++s) {
                const std::size_t j = t * N + s;
                if (opts.cp_override) {
                    if (const TensorT<T>* rep = opts.cp_override(j)) {
                        out.cp_outputs[j] = constant(*rep);
                        continue;
                    }
                }
                if (arch.frozen[j]) {
                    out.cp_outputs[j] = cp_[j].forward_fixed(*arch.frozen[j], feats[t], feats[s],
                                                             out.ahat[t], out.ahat[s], opts.training);
                } else {
                    if (!opts.mix_weights || !(*opts.mix_weights)[j])
                        fail("forward", "unfrozen block " + std::to_string(j) +
                                            " needs mixing weights during search");
                    out.cp_outputs[j] = cp_[j].forward_mixed((*opts.mix_weights)[j], feats[t],
                                                             feats[s], out.ahat[t], out.ahat[s],
                                                             opts.training);
                }
            }

        for (std::size_t t = 0; t < N; ++t) {
            std::vector<VarT<T>> row(out.cp_outputs.begin() + static_cast<long>(t * N),
                                     out.cp_outputs.begin() + static_cast<long>((t + 1) * N));
            auto fused = fuse_bn_[t](fuse_conv_[t](concat(row, 1)), opts.training);
            auto g = post_[t](concat<T>({feats[t], fused}, 1), opts.training);
            out.preds.push_back(pred_[t](g));
        }
        return out;
    }

private:
    ModelConfig cfg_;
    std::vector<TaskSpec> tasks_;
    std::vector<ConvBnActT<T>> backbone_;
    std::vector<ConvBnActT<T>> heads_;
    std::vector<ConvBnActT<T>> aux1_;
    std::vector<Conv2dT<T>> aux2_;
    std::vector<CpBlockT<T>> cp_;
    std::vector<Conv2dT<T>> fuse_conv_;
    std::vector<BatchNorm2dT<T>> fuse_bn_;
    std::vector<ConvBnActT<T>> post_;
    std::vector<Conv2dT<T>> pred_;
};

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

template <typename T>
struct LossBreakdownT {
    VarT<T> total;
    std::vector<double> task_losses;  // unweighted
    std::vector<double> aux_losses;   // unweighted
    double entropy = 0.0;             // regularizer value (nats)
};

// Weighted task losses plus auxiliary region cross-entropies; adds the
// scheduled entropy term during search. include_aux=false drops the
// auxiliary terms (used by the stop-gradient invariant checks, where finite
// differences would otherwise see through the stopped path).
template <typename T>
LossBreakdownT<T> total_loss(MultiTaskNetT<T>& net, const ForwardResultT<T>& fwd,
                             const BatchT<T>& batch, const TrainHyper& hyper,
                             const double* omega_h = nullptr, bool include_aux = true) {
    const auto& tasks = net.tasks();
    const std::size_t L = batch.height * batch.width;
    LossBreakdownT<T> out;
    out.task_losses.resize(tasks.size(), 0.0);
    out.aux_losses.resize(tasks.size(), 0.0);
    VarT<T> total;
    auto accumulate_term = [&](const VarT<T>& term) {
        total = total ? add(total, term) : term;
    };

    for (std::size_t t = 0; t < tasks.size(); ++t) {
        if (tasks[t].loss_weight == 0.0) continue;
        VarT<T> loss;
        switch (tasks[t].kind) {
            case TaskKind::kClassification: {
                auto logits = reshape(fwd.preds[t], {batch.size, tasks[t].out_channels, L});
                loss = cross_entropy(logits, batch.semseg);
                break;
            }
            case TaskKind::kDepth:
                loss = l1_loss(fwd.preds[t], batch.depth);
                break;
            case TaskKind::kNormals:
                loss = l1_loss(fwd.preds[t], batch.normals, true);
                break;
            case TaskKind::kBoundary:
                loss = weighted_bce_loss(fwd.preds[t], batch.boundary,
                                         static_cast<T>(hyper.bce_pos_weight),
                                         static_cast<T>(hyper.bce_neg_weight));
                break;
        }
        out.task_losses[t] = loss->value[0];
        accumulate_term(mul_scalar(loss, static_cast<T>(tasks[t].loss_weight)));

        if (include_aux && !fwd.aux_logits.empty() && fwd.aux_logits[t]) {
            auto aux_flat = reshape(fwd.aux_logits[t], {batch.size, tasks[t].regions, L});
            auto aux = cross_entropy(aux_flat, batch.regions[t]);
            out.aux_losses[t] = aux->value[0];
            accumulate_term(mul_scalar(aux, static_cast<T>(tasks[t].loss_weight)));
        }
    }
    if (!total) total = constant(TensorT<T>::scalar(T(0)));  // all weights zero

    if (omega_h) {
        auto reg = entropy_regularizer(net.arch);
        out.entropy = reg->value[0];
        accumulate_term(mul_scalar(reg, static_cast<T>(*omega_h)));
    }
    out.total = total;
    return out;
}

// ---------------------------------------------------------------------------
// trainer
// ---------------------------------------------------------------------------

template <typename T>
class TrainerT {
public:
    TrainerT(MultiTaskNetT<T>& net, const TrainHyper& hyper, std::uint64_t run_seed,
             const SearchSchedule* schedule = nullptr)
        : net_(net),
          hyper_(hyper),
          seed_(run_seed),
          schedule_(schedule),
          sgd_(static_cast<T>(hyper.momentum), static_cast<T>(hyper.weight_decay)) {
        if (schedule_) freeze_iters_.assign(net_.arch.blocks(), -1);
        // blocks frozen at construction (fixed arch / pinned diagonal)
        for (std::size_t j = 0; j < net_.arch.blocks(); ++j)
            if (net_.arch.frozen[j]) {
                net_.freeze_block(j, *net_.arch.frozen[j]);
                if (schedule_) freeze_iters_[j] = 0;
            }
    }

    std::size_t iteration() const { return iteration_; }
    std::uint64_t seed() const { return seed_; }
    const std::vector<long>& freeze_iterations() const { return freeze_iters_; }

    std::size_t total_iterations() const {
        return schedule_ ? schedule_->total_iters : hyper_.iterations;
    }

    // One optimization step; returns the loss value.
    double step(const std::vector<Sample>& train,
                const std::vector<std::array<std::vector<std::int32_t>, 4>>& regions,
                const std::vector<TensorT<T>>* gt_maps_all = nullptr) {
        const std::size_t total = total_iterations();
        if (iteration_ >= total) fail("Trainer", "schedule exhausted");

        // batch indices are a pure function of (seed, iteration)
        CounterRng brng(seed_, {rng_stream::kBatch, iteration_});
        std::vector<std::size_t> idx(hyper_.batch_size);
        for (auto& i : idx) i = static_cast<std::size_t>(brng.below(train.size()));
        BatchT<T> batch = make_batch<T>(train, regions, idx);

        ForwardOptionsT<T> opts;
        opts.training = true;
        std::vector<TensorT<T>> gt_maps;
        if (net_.config().gt_regions) {
            gt_maps = make_gt_maps(batch);
            opts.gt_region_maps = &gt_maps;
        }
        (void)gt_maps_all;

        std::vector<VarT<T>> mix(net_.arch.blocks());
        double omega_h = 0.0;
        const bool searching = schedule_ != nullptr;
        if (searching) {
            const double lambda = lambda_at(iteration_, *schedule_);
            omega_h = omega_h_at(iteration_, *schedule_);
            CounterRng grng(seed_, {rng_stream::kGumbel, iteration_});
            for (std::size_t j = 0; j < net_.arch.blocks(); ++j) {
                if (net_.arch.frozen[j]) continue;
                auto noise = gumbel_noise<T>(grng);
                mix[j] = gumbel_softmax_sample(net_.arch.alpha[j], static_cast<T>(lambda), noise);
            }
            opts.mix_weights = &mix;
        }

        auto fwd = net_.forward(batch, opts);
        auto loss = total_loss(net_, fwd, batch, hyper_, searching ? &omega_h : nullptr);
        if (!std::isfinite(static_cast<double>(loss.total->value[0])))
            throw std::runtime_error("train_step: non-finite loss at iteration " +
                                     std::to_string(iteration_));
        backward(loss.total);

        // SGD on the network weights under the poly schedule
        const T lr = poly_lr(iteration_, total, static_cast<T>(hyper_.lr),
                             static_cast<T>(hyper_.poly_power));
        std::vector<ParamT<T>*> weights, alphas;
        for (auto* p : net_.params.trainable()) {
            if (p->name.rfind("arch.alpha.", 0) == 0) alphas.push_back(p);
            else weights.push_back(p);
        }
        sgd_.step(weights, lr);
        if (searching && !alphas.empty()) adam_.step(alphas, static_cast<T>(schedule_->alpha_lr));
        zero_grads(net_.params.trainable());

        if (searching) {
            for (std::size_t j = 0; j < net_.arch.blocks(); ++j) {
                if (net_.arch.frozen[j]) continue;
                if (auto f = freeze_check(net_.arch.alpha[j]->value, schedule_->freeze_threshold)) {
                    net_.freeze_block(j, *f);
                    freeze_iters_[j] = static_cast<long>(iteration_);
                }
            }
        }
        ++iteration_;
        return loss.total->value[0];
    }

    std::vector<TensorT<T>> make_gt_maps(const BatchT<T>& batch) const {
        std::vector<TensorT<T>> maps;
        const std::size_t L = batch.height * batch.width;
        for (std::size_t t = 0; t < net_.tasks().size(); ++t)
            maps.push_back(gt_ahat<T>(batch.regions[t], batch.size, L, net_.tasks()[t].regions));
        return maps;
    }

    SgdT<T>& sgd() { return sgd_; }
    AdamT<T>& adam() { return adam_; }
    void set_iteration(std::size_t it) { iteration_ = it; }
    std::vector<long>& freeze_iterations_mutable() { return freeze_iters_; }

private:
    MultiTaskNetT<T>& net_;
    TrainHyper hyper_;
    std::uint64_t seed_;
    const SearchSchedule* schedule_;
    SgdT<T> sgd_;
    AdamT<T> adam_;
    std::size_t iteration_ = 0;
    std::vector<long> freeze_iters_;
};

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

struct MetricsReport {
    std::vector<std::string> task_names;
    std::vector<double> values;  // one per task
    std::vector<int> gammas;
};

namespace detail {

// dilate a binary map by one pixel (8-neighborhood)
inline std::vector<std::uint8_t> dilate1(const std::vector<std::uint8_t>& m, std::size_t H,
                                         std::size_t W) {
    std::vector<std::uint8_t> out(m.size(), 0);
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            bool on = false;
            for (int dy = -1; dy <= 1 && !on; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    const long yy = static_cast<long>(y) + dy, xx = static_cast<long>(x) + dx;
                    if (yy < 0 || yy >= static_cast<long>(H) || xx < 0 || xx >= static_cast<long>(W))
                        continue;
                    if (m[static_cast<std::size_t>(yy) * W + static_cast<std::size_t>(xx)]) {
                        on = true;
                        break;
                    }
                }
            out[y * W + x] = on ? 1 : 0;
        }
    return out;
}

}  // namespace detail

// Accumulates the per-task metrics over an evaluation split:
// mIoU, depth RMSE, mean angular error (degrees), boundary F-measure
// maximized over 20 thresholds with 1-pixel tolerance.
template <typename T>
class EvaluatorT {
public:
    explicit EvaluatorT(const std::vector<TaskSpec>& tasks) : tasks_(tasks) {
        confusion_.assign(kNumClasses * kNumClasses, 0);
        f_counts_.assign(kThresholds, {});
    }

    static constexpr std::size_t kThresholds = 20;

    void add_batch(const ForwardResultT<T>& fwd, const BatchT<T>& batch) {
        const std::size_t B = batch.size, L = batch.height * batch.width;
        for (std::size_t t = 0; t < tasks_.size(); ++t) {
            const TensorT<T>& pred = fwd.preds[t]->value;
            switch (tasks_[t].kind) {
                case TaskKind::kClassification: {
                    for (std::size_t b = 0; b < B; ++b)
                        for (std::size_t l = 0; l < L; ++l) {
                            std::size_t arg = 0;
                            for (std::size_t c = 1; c < kNumClasses; ++c)
                                if (pred[(b * kNumClasses + c) * L + l] >
                                    pred[(b * kNumClasses + arg) * L + l])
                                    arg = c;
                            const auto gt = static_cast<std::size_t>(batch.semseg[b * L + l]);
                            ++confusion_[gt * kNumClasses + arg];
                        }
                    break;
                }
                case TaskKind::kDepth: {
                    for (std::size_t i = 0; i < B * L; ++i) {
                        const double d = static_cast<double>(pred[i]) - static_cast<double>(batch.depth[i]);
                        depth_sq_ += d * d;
                        ++depth_n_;
                    }
                    break;
                }
                case TaskKind::kNormals: {
                    for (std::size_t b = 0; b < B; ++b)
                        for (std::size_t l = 0; l < L; ++l) {
                            double px = pred[(b * 3 + 0) * L + l], py = pred[(b * 3 + 1) * L + l],
                                   pz = pred[(b * 3 + 2) * L + l];
                            const double n = std::max(std::sqrt(px * px + py * py + pz * pz), 1e-6);
                            px /= n;
                            py /= n;
                            pz /= n;
                            const double raw = px * batch.normals[(b * 3 + 0) * L + l] +
                                               py * batch.normals[(b * 3 + 1) * L + l] +
                                               pz * batch.normals[(b * 3 + 2) * L + l];
                            const double dot = std::clamp(raw, -1.0, 1.0);
                            angle_sum_ += std::acos(dot) * 180.0 / 3.14159265358979323846;
                            ++angle_n_;
                        }
                    break;
                }
                case TaskKind::kBoundary: {
                    const std::size_t H = batch.height, W = batch.width;
                    for (std::size_t b = 0; b < B; ++b) {
                        std::vector<std::uint8_t> gt(L);
                        for (std::size_t l = 0; l < L; ++l) gt[l] = batch.boundary[b * L + l] > T(0.5);
                        const auto gt_dil = detail::dilate1(gt, H, W);
                        for (std::size_t ti = 0; ti < kThresholds; ++ti) {
                            const double tau = (static_cast<double>(ti) + 0.5) / kThresholds;
                            std::vector<std::uint8_t> pp(L);
                            for (std::size_t l = 0; l < L; ++l) {
                                const double s =
                                    1.0 / (1.0 + std::exp(-static_cast<double>(pred[b * L + l])));
                                pp[l] = s > tau;
                            }
                            const auto pp_dil = detail::dilate1(pp, H, W);
                            auto& fc = f_counts_[ti];
                            for (std::size_t l = 0; l < L; ++l) {
                                if (pp[l]) {
                                    ++fc.pred_total;
                                    if (gt_dil[l]) ++fc.pred_matched;
                                }
                                if (gt[l]) {
                                    ++fc.gt_total;
                                    if (pp_dil[l]) ++fc.gt_matched;
                                }
                            }
                        }
                    }
                    break;
                }
            }
        }
    }

    MetricsReport report() const {
        MetricsReport r;
        for (const auto& t : tasks_) {
            r.task_names.push_back(t.name);
            r.gammas.push_back(t.gamma);
            switch (t.kind) {
                case TaskKind::kClassification: {
                    double miou = 0;
                    for (std::size_t c = 0; c < kNumClasses; ++c) {
                        double tp = static_cast<double>(confusion_[c * kNumClasses + c]);
                        double fp = 0, fn = 0;
                        for (std::size_t o = 0; o < kNumClasses; ++o) {
                            if (o == c) continue;
                            fp += static_cast<double>(confusion_[o * kNumClasses + c]);
                            fn += static_cast<double>(confusion_[c * kNumClasses + o]);
                        }
                        const double uni = tp + fp + fn;
                        miou += uni > 0 ? tp / uni : 1.0;
                    }
                    r.values.push_back(miou / kNumClasses);
                    break;
                }
                case TaskKind::kDepth:
                    r.values.push_back(depth_n_ ? std::sqrt(depth_sq_ / static_cast<double>(depth_n_)) : 0.0);
                    break;
                case TaskKind::kNormals:
                    r.values.push_back(angle_n_ ? angle_sum_ / static_cast<double>(angle_n_) : 0.0);
                    break;
                case TaskKind::kBoundary: {
                    double best = 0;
                    for (const auto& fc : f_counts_) {
                        const double p = fc.pred_total ? static_cast<double>(fc.pred_matched) /
                                                             static_cast<double>(fc.pred_total)
                                                       : 0.0;
                        const double rec = fc.gt_total ? static_cast<double>(fc.gt_matched) /
                                                             static_cast<double>(fc.gt_total)
                                                       : 0.0;
                        if (p + rec > 0) best = std::max(best, 2 * p * rec / (p + rec));
                    }
                    r.values.push_back(best);
                    break;
                }
            }
        }
        return r;
    }

private:
    struct FCount {
        std::size_t pred_total = 0, pred_matched = 0, gt_total = 0, gt_matched = 0;
    };
    std::vector<TaskSpec> tasks_;
    std::vector<std::size_t> confusion_;
    double depth_sq_ = 0.0;
    std::size_t depth_n_ = 0;
    double angle_sum_ = 0.0;
    std::size_t angle_n_ = 0;
    std::vector<FCount> f_counts_;
};

// Runs the network in eval mode over a split. `override_fn` (optional)
// substitutes cached CP-block outputs, used by the permutation analysis.
template <typename T>
MetricsReport evaluate(
    MultiTaskNetT<T>& net, const std::vector<Sample>& data,
    const std::vector<std::array<std::vector<std::int32_t>, 4>>& regions, std::size_t batch_size,
    std::function<const TensorT<T>*(std::size_t block, std::size_t first_sample)> override_fn = {},
    std::vector<std::vector<TensorT<T>>>* cp_cache_out = nullptr) {
    if (data.empty()) fail("evaluate", "empty evaluation split");
    EvaluatorT<T> ev(net.tasks());
    if (cp_cache_out) cp_cache_out->assign(net.n_blocks(), {});
    for (std::size_t start = 0; start < data.size(); start += batch_size) {
        const std::size_t n = std::min(batch_size, data.size() - start);
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = start + i;
        BatchT<T> batch = make_batch<T>(data, regions, idx);
        ForwardOptionsT<T> opts;
        opts.training = false;
        std::vector<TensorT<T>> gt_maps;
        if (net.config().gt_regions) {
            const std::size_t L = batch.height * batch.width;
            for (std::size_t t = 0; t < net.tasks().size(); ++t)
                gt_maps.push_back(gt_ahat<T>(batch.regions[t], batch.size, L, net.tasks()[t].regions));
            opts.gt_region_maps = &gt_maps;
        }
        if (override_fn)
            opts.cp_override = [&](std::size_t block) { return override_fn(block, start); };
        auto fwd = net.forward(batch, opts);
        if (cp_cache_out)
            for (std::size_t j = 0; j < net.n_blocks(); ++j)
                (*cp_cache_out)[j].push_back(fwd.cp_outputs[j]->value);
        ev.add_batch(fwd, batch);
    }
    return ev.report();
}

// ---------------------------------------------------------------------------
// checkpointing
// ---------------------------------------------------------------------------

// Serializes parameters, optimizer state, architecture state, label spaces,
// and the RNG seed; save -> load -> continue is bit-exact at 32-bit
// precision because batches and noise are keyed by (seed, iteration).
template <typename T>
std::vector<CheckpointEntry> train_state_entries(const MultiTaskNetT<T>& net,
                                                 const TrainerT<T>& trainer,
                                                 const LabelSpaces* spaces) {
    std::vector<CheckpointEntry> out;
    auto push_f32 = [&](const std::string& name, const TensorT<T>& t) {
        if constexpr (std::is_same_v<T, float>) out.push_back({name, t});
        else out.push_back({name, t.template cast<float>()});
    };

    Tensor meta({4});
    meta[0] = static_cast<float>(trainer.iteration());
    float lo, hi;
    pack_u64(trainer.seed(), lo, hi);
    meta[1] = lo;
    meta[2] = hi;
    meta[3] = static_cast<float>(net.n_blocks());
    out.push_back({"state.meta", meta});

    if (net.n_blocks() > 0) {
        Tensor frozen({net.n_blocks()});
        Tensor fiter({net.n_blocks()});
        const auto& fi = trainer.freeze_iterations();
        for (std::size_t j = 0; j < net.n_blocks(); ++j) {
            frozen[j] = net.arch.frozen[j] ? static_cast<float>(static_cast<int>(*net.arch.frozen[j]))
                                           : -1.f;
            fiter[j] = fi.empty() ? -1.f : static_cast<float>(fi[j]);
        }
        out.push_back({"state.frozen", frozen});
        out.push_back({"state.freeze_iter", fiter});
    }

    for (const auto& p : net.params.items()) push_f32("param." + p.name, p.var->value);
    for (const auto& [name, v] : const_cast<TrainerT<T>&>(trainer).sgd().velocity())
        push_f32("sgd.v." + name, v);
    auto& adam = const_cast<TrainerT<T>&>(trainer).adam();
    for (const auto& [name, m] : adam.moment1()) push_f32("adam.m." + name, m);
    for (const auto& [name, v] : adam.moment2()) push_f32("adam.v." + name, v);
    for (const auto& [name, t] : adam.steps())
        out.push_back({"adam.t." + name, Tensor({1}, {static_cast<float>(t)})});

    if (spaces) {
        Tensor edges({spaces->depth_bins.edges.size()});
        for (std::size_t i = 0; i < edges.size(); ++i)
            edges[i] = static_cast<float>(spaces->depth_bins.edges[i]);
        out.push_back({"labels.depth_edges", edges});
        const auto& book = *spaces->codebook;
        Tensor cw({book.codewords.size(), 3});
        for (std::size_t i = 0; i < book.codewords.size(); ++i)
            for (std::size_t c = 0; c < 3; ++c) cw[i * 3 + c] = static_cast<float>(book.codewords[i][c]);
        out.push_back({"labels.codewords", cw});
        if (!book.triangles.empty()) {
            Tensor tri({book.triangles.size(), 3});
            for (std::size_t i = 0; i < book.triangles.size(); ++i)
                for (std::size_t c = 0; c < 3; ++c)
                    tri[i * 3 + c] = static_cast<float>(book.triangles[i].v[c]);
            out.push_back({"labels.triangles", tri});
        }
    }
    return out;
}

template <typename T>
void restore_train_state(const std::vector<CheckpointEntry>& entries, MultiTaskNetT<T>& net,
                         TrainerT<T>& trainer) {
    std::map<std::string, const CheckpointEntry*> index;
    for (const auto& e : entries) index[e.name] = &e;
    auto need = [&](const std::string& name) -> const Tensor& {
        auto it = index.find(name);
        if (it == index.end())
            throw std::runtime_error("restore_train_state: missing entry '" + name + "'");
        return it->second->tensor;
    };
    auto to_T = [](const Tensor& t) {
        if constexpr (std::is_same_v<T, float>) return t;
        else return t.template cast<T>();
    };

    const Tensor& meta = need("state.meta");
    trainer.set_iteration(static_cast<std::size_t>(meta[0]));

    for (auto& p : net.params.items()) {
        const Tensor& t = need("param." + p.name);
        if (t.shape() != p.var->value.shape())
            throw std::runtime_error("restore_train_state: shape mismatch for '" + p.name + "'");
        p.var->value = to_T(t);
    }
    trainer.sgd().velocity().clear();
    trainer.adam().moment1().clear();
    trainer.adam().moment2().clear();
    trainer.adam().steps().clear();
    for (const auto& e : entries) {
        if (e.name.rfind("sgd.v.", 0) == 0)
            trainer.sgd().velocity().emplace(e.name.substr(6), to_T(e.tensor));
        else if (e.name.rfind("adam.m.", 0) == 0)
            trainer.adam().moment1().emplace(e.name.substr(7), to_T(e.tensor));
        else if (e.name.rfind("adam.v.", 0) == 0)
            trainer.adam().moment2().emplace(e.name.substr(7), to_T(e.tensor));
        else if (e.name.rfind("adam.t.", 0) == 0)
            trainer.adam().steps()[e.name.substr(7)] = static_cast<std::size_t>(e.tensor[0]);
    }

    if (net.n_blocks() > 0) {
        const Tensor& frozen = need("state.frozen");
        const Tensor& fiter = need("state.freeze_iter");
        for (std::size_t j = 0; j < net.n_blocks(); ++j) {
            if (frozen[j] >= 0.f)
                net.freeze_block(j, kContextOrder[static_cast<std::size_t>(frozen[j])]);
            if (!trainer.freeze_iterations_mutable().empty())
                trainer.freeze_iterations_mutable()[j] = static_cast<long>(fiter[j]);
        }
    }
}

// ---------------------------------------------------------------------------
// the search driver
// ---------------------------------------------------------------------------

struct SearchRunResult {
    std::uint64_t seed = 0;
    std::vector<ContextType> selection;
    std::vector<long> freeze_iterations;  // -1 = resolved by argmax at the end
    std::size_t frozen_blocks = 0;
    double final_loss = 0.0;
};

struct SearchOutcome {
    std::vector<SearchRunResult> runs;
    std::vector<ContextType> voted;
    std::vector<std::array<std::size_t, kNumContextTypes>> tallies;
};

inline std::size_t worker_cap(std::size_t requested) {
    if (const char* env = std::getenv("ATRC_THREADS")) {
        const long v = std::atol(env);
        if (v > 0) return std::min<std::size_t>(requested, static_cast<std::size_t>(v));
    }
    return requested;
}

// Executes `runs` independent searches with distinct seeds and returns the
// per-block plurality vote. Runs execute in parallel up to the worker cap.
template <typename T>
SearchOutcome run_search(const ModelConfig& model_cfg, const std::vector<TaskSpec>& tasks,
                         const TrainHyper& hyper, const SearchSchedule& schedule,
                         const PreparedData& data, std::size_t runs, std::uint64_t base_seed,
                         std::function<void(const SearchRunResult&)> on_run_done = {}) {
    if (model_cfg.mode != ArchMode::kSearch && model_cfg.mode != ArchMode::kSearchNoSelf)
        fail("run_search", "model mode must be a search mode");
    SearchOutcome out;
    out.runs.resize(runs);

    auto one_run = [&](std::size_t r) {
        const std::uint64_t seed = base_seed + r;
        MultiTaskNetT<T> net(model_cfg, tasks, seed);
        TrainerT<T> trainer(net, hyper, seed, &schedule);
        double loss = 0.0;
        for (std::size_t it = 0; it < schedule.total_iters; ++it)
            loss = trainer.step(data.train, data.train_regions);
        SearchRunResult res;
        res.seed = seed;
        res.selection = net.arch.current_selection();
        res.freeze_iterations = trainer.freeze_iterations();
        res.frozen_blocks = net.arch.frozen_count();
        res.final_loss = loss;
        return res;
    };

    const std::size_t workers = std::max<std::size_t>(1, worker_cap(std::min(runs, std::size_t(8))));
    std::size_t next = 0;
    while (next < runs) {
        const std::size_t wave = std::min(workers, runs - next);
        std::vector<std::future<SearchRunResult>> futs;
        for (std::size_t w = 0; w < wave; ++w)
            futs.push_back(std::async(std::launch::async, one_run, next + w));
        for (std::size_t w = 0; w < wave; ++w) {
            out.runs[next + w] = futs[w].get();
            if (on_run_done) on_run_done(out.runs[next + w]);
        }
        next += wave;
    }

    std::vector<std::vector<ContextType>> selections;
    for (const auto& r : out.runs) selections.push_back(r.selection);
    out.voted = vote_final_config(selections);
    out.tallies = vote_tallies(selections);
    return out;
}

}  // namespace atrc
