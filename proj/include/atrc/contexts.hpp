// Relational context operators and the Context Pooling (CP) block. A CP
// block refines target-task features from one source task through one of
// five candidates: global (linearized attention), local (windowed
// attention), T-label / S-label (attention over label-region prototypes),
// or none (severed flow). In mixed mode all candidates run and the block
// returns their convex combination.

#pragma once

#include <array>
#include <optional>

#include "atrc/image_io.hpp"
#include "atrc/nn.hpp"

namespace atrc {

enum class ContextType : int {
    kGlobal = 0,
    kLocal = 1,
    kTLabel = 2,
    kSLabel = 3,
    kNone = 4,
};

inline constexpr std::size_t kNumContextTypes = 5;

inline constexpr std::array<ContextType, kNumContextTypes> kContextOrder = {
    ContextType::kGlobal, ContextType::kLocal, ContextType::kTLabel,
    ContextType::kSLabel, ContextType::kNone};

inline const char* context_name(ContextType c) {
    switch (c) {
        case ContextType::kGlobal: return "global";
        case ContextType::kLocal: return "local";
        case ContextType::kTLabel: return "t_label";
        case ContextType::kSLabel: return "s_label";
        case ContextType::kNone: return "none";
    }
    return "?";
}

inline ContextType context_from_name(const std::string& name) {
    for (ContextType c : kContextOrder)
        if (name == context_name(c)) return c;
    fail("context_from_name", "unknown context type '" + name + "'");
}

struct LocalWindow {
    std::size_t extent = 9;  // b, odd and >= 1

    void validate() const {
        if (extent == 0 || extent % 2 == 0)
            fail("LocalWindow", "extent must be odd and positive, got " + std::to_string(extent));
    }
};

// [B,C,H,W] -> [B,L,C] with L = H*W.
template <typename T>
VarT<T> to_rows(const VarT<T>& x) {
    const Shape& s = x->value.shape();
    if (s.size() != 4) fail("to_rows", "expects NCHW, got " + shape_str(s));
    return permute(reshape(x, {s[0], s[1], s[2] * s[3]}), {0, 2, 1});
}

// [B,L,C] -> [B,C,H,W].
template <typename T>
VarT<T> from_rows(const VarT<T>& rows, std::size_t H, std::size_t W) {
    const Shape& s = rows->value.shape();
    if (s.size() != 3 || s[1] != H * W) fail("from_rows", "bad row tensor " + shape_str(s));
    return reshape(permute(rows, {0, 2, 1}), {s[0], s[2], H, W});
}

template <typename T>
struct AttentionResult {
    VarT<T> out;   // [B, Lq, dv]
    VarT<T> attn;  // [B, Lq, Lk], rows on the simplex
};

// v' = softmax(q k^T / sqrt(dk)) v. Exposes the attention matrix for
// inspection and export.
template <typename T>
AttentionResult<T> attention_quadratic(const VarT<T>& q, const VarT<T>& k, const VarT<T>& v) {
    const Shape& qs = q->value.shape();
    const Shape& ks = k->value.shape();
    const Shape& vs = v->value.shape();
    if (qs.size() != 3 || ks.size() != 3 || vs.size() != 3)
        fail("attention_quadratic", "expects rank-3 [B,L,d] operands");
    if (qs[2] != ks[2])
        fail("attention_quadratic", "query/key width mismatch " + shape_str(qs) + " vs " + shape_str(ks));
    if (ks[1] != vs[1]) fail("attention_quadratic", "key/value pixel count mismatch");
    const T scale = T(1) / std::sqrt(static_cast<T>(qs[2]));
    auto attn = softmax_axis(mul_scalar(bmm(q, k, false, true), scale), 2);
    return {bmm(attn, v), attn};
}

// Linear-kernel attention computed in O(L): the key-value summary and key
// sum are built once and reused for every query. Requires elementwise
// non-negative q and k (softplus projections guarantee this).
template <typename T>
VarT<T> global_context_linearized(const VarT<T>& q, const VarT<T>& k, const VarT<T>& v) {
    const Shape& qs = q->value.shape();
    const Shape& ks = k->value.shape();
    if (qs.size() != 3 || ks.size() != 3 || v->value.shape().size() != 3)
        fail("global_context_linearized", "expects rank-3 [B,L,d] operands");
    if (qs[2] != ks[2]) fail("global_context_linearized", "query/key width mismatch");
    for (std::size_t i = 0; i < q->value.size(); ++i)
        if (q->value[i] < T(0))
            fail("global_context_linearized", "negative query entry violates the kernel contract");
    for (std::size_t i = 0; i < k->value.size(); ++i)
        if (k->value[i] < T(0))
            fail("global_context_linearized", "negative key entry violates the kernel contract");

    auto summary = bmm(k, v, true, false);        // [B, dk, dv]
    auto numer = bmm(q, summary);                 // [B, L, dv]
    auto key_sum = sum_axis(k, 1);                // [B, 1, dk]
    auto denom = clamp_min(bmm(q, key_sum, false, true), T(1e-12));  // [B, L, 1]
    return div_bcast(numer, denom, 2);
}

// Windowed scaled-dot-product attention (Eq. of the local context); clipped
// windows at the borders, b x b neighborhood.
template <typename T>
VarT<T> local_context(const VarT<T>& q, const VarT<T>& k, const VarT<T>& v,
                      const LocalWindow& window, std::size_t H, std::size_t W) {
    window.validate();
    return local_attention(q, k, v, H, W, window.extent);
}

// p = Ahat^T F_S: region prototypes as the Ahat-weighted average of source
// features. F_S: [B,L,C], Ahat: [B,L,R] with column-stochastic columns.
template <typename T>
VarT<T> label_prototypes(const VarT<T>& fs_rows, const VarT<T>& ahat) {
    const Shape& fs = fs_rows->value.shape();
    const Shape& as = ahat->value.shape();
    if (fs.size() != 3 || as.size() != 3 || fs[0] != as[0])
        fail("label_prototypes", "expects rank-3 [B,L,*] operands with equal batch");
    if (fs[1] != as[1])
        fail("label_prototypes", "pixel count mismatch " + shape_str(fs) + " vs " + shape_str(as));
    return bmm(ahat, fs_rows, true, false);  // [B, R, C]
}

// Query/key/value projection triple. Activation is ReLU except for the
// global context where softplus keeps q and k in the positive domain; the
// value path's batch norm always runs without learnable affine parameters.
template <typename T>
struct QkvProjectionT {
    ConvBnActT<T> fq, fk, fv;

    QkvProjectionT() = default;
    QkvProjectionT(ParamStoreT<T>& ps, const std::string& prefix, std::size_t in_ch, std::size_t dk,
                   std::size_t dv, std::uint64_t seed, Activation qk_act)
        : fq(ps, prefix + ".fq", in_ch, dk, 1, seed, qk_act),
          fk(ps, prefix + ".fk", in_ch, dk, 1, seed, qk_act),
          fv(ps, prefix + ".fv", in_ch, dv, 1, seed, Activation::kRelu, /*bn_affine=*/false) {}
};

// Projects spatial maps to (q, k, v) rows.
template <typename T>
struct ProjectedQkv {
    VarT<T> q, k, v;
};

template <typename T>
ProjectedQkv<T> project_qkv(const VarT<T>& f_target, const VarT<T>& f_source,
                            const QkvProjectionT<T>& proj, bool training) {
    const Shape& ts = f_target->value.shape();
    const Shape& ss = f_source->value.shape();
    if (ts.size() != 4 || ss.size() != 4 || ts[2] != ss[2] || ts[3] != ss[3])
        fail("project_qkv", "spatial mismatch " + shape_str(ts) + " vs " + shape_str(ss));
    return {to_rows(proj.fq(f_target, training)), to_rows(proj.fk(f_source, training)),
            to_rows(proj.fv(f_source, training))};
}

struct CpBlockConfig {
    std::size_t feat_ch = 16;  // channels of F_n
    std::size_t dk = 8;
    std::size_t dv = 8;
    LocalWindow window{9};
};

// One source->target Context Pooling block holding the per-candidate
// projection parameters. Candidates outside `mask` are never instantiated
// (fixed-architecture retraining only allocates the selected one).
template <typename T>
class CpBlockT {
public:
    CpBlockT() = default;
    CpBlockT(ParamStoreT<T>& ps, std::string prefix, const CpBlockConfig& cfg, std::uint64_t seed,
             const std::array<bool, kNumContextTypes>& mask = {true, true, true, true, true})
        : prefix_(std::move(prefix)), cfg_(cfg) {
        if (mask[0]) global_.emplace(ps, prefix_ + ".global", cfg.feat_ch, cfg.dk, cfg.dv, seed,
                                     Activation::kSoftplus);
        if (mask[1]) local_.emplace(ps, prefix_ + ".local", cfg.feat_ch, cfg.dk, cfg.dv, seed,
                                    Activation::kRelu);
        if (mask[2]) tlabel_.emplace(ps, prefix_ + ".t_label", cfg.feat_ch, cfg.dk, cfg.dv, seed,
                                     Activation::kRelu);
        if (mask[3]) slabel_.emplace(ps, prefix_ + ".s_label", cfg.feat_ch, cfg.dk, cfg.dv, seed,
                                     Activation::kRelu);
    }

    const std::string& prefix() const { return prefix_; }
    std::string candidate_prefix(ContextType c) const {
        return prefix_ + "." + context_name(c);
    }
    const CpBlockConfig& config() const { return cfg_; }

    // Runs a single candidate. ahat_t / ahat_s: [B,L,R] column-stochastic
    // region maps of the target / source task (only used by label contexts).
    VarT<T> context(ContextType c, const VarT<T>& f_t, const VarT<T>& f_s, const VarT<T>& ahat_t,
                    const VarT<T>& ahat_s, bool training) const {
        const Shape& s = f_t->value.shape();
        const std::size_t H = s[2], W = s[3];
        switch (c) {
            case ContextType::kGlobal: {
                auto qkv = project_qkv(f_t, f_s, require(global_, c), training);
                return from_rows(global_context_linearized(qkv.q, qkv.k, qkv.v), H, W);
            }
            case ContextType::kLocal: {
                auto qkv = project_qkv(f_t, f_s, require(local_, c), training);
                return from_rows(local_context(qkv.q, qkv.k, qkv.v, cfg_.window, H, W), H, W);
            }
            case ContextType::kTLabel:
                return label_context(require(tlabel_, c), f_t, f_s, ahat_t, training, H, W);
            case ContextType::kSLabel:
                return label_context(require(slabel_, c), f_t, f_s, ahat_s, training, H, W);
            case ContextType::kNone:
                return none_context(f_t);
        }
        fail("CpBlock", "invalid context type");
    }

    // Zero output with the block's shape; contributes no gradient anywhere.
    VarT<T> none_context(const VarT<T>& f_t) const {
        const Shape& s = f_t->value.shape();
        return constant(TensorT<T>({s[0], cfg_.dv, s[2], s[3]}));
    }

    VarT<T> forward_fixed(ContextType c, const VarT<T>& f_t, const VarT<T>& f_s,
                          const VarT<T>& ahat_t, const VarT<T>& ahat_s, bool training) const {
        return context(c, f_t, f_s, ahat_t, ahat_s, training);
    }

    // weights: [5] on the simplex (a softened one-hot sample during search).
    VarT<T> forward_mixed(const VarT<T>& weights, const VarT<T>& f_t, const VarT<T>& f_s,
                          const VarT<T>& ahat_t, const VarT<T>& ahat_s, bool training) const {
        if (weights->value.shape() != Shape{kNumContextTypes})
            fail("CpBlock", "mixing weights must have shape [5], got " +
                                shape_str(weights->value.shape()));
        T sum = T(0);
        for (std::size_t i = 0; i < kNumContextTypes; ++i) {
            if (weights->value[i] < T(-1e-5)) fail("CpBlock", "mixing weight below zero");
            sum += weights->value[i];
        }
        if (std::abs(static_cast<double>(sum) - 1.0) > 1e-5)
            fail("CpBlock", "mixing weights off the simplex (sum " + std::to_string(sum) + ")");
        VarT<T> acc;
        for (std::size_t i = 0; i < kNumContextTypes; ++i) {
            auto out = context(kContextOrder[i], f_t, f_s, ahat_t, ahat_s, training);
            auto term = scale_by(out, slice(weights, 0, i, 1));
            acc = acc ? add(acc, term) : term;
        }
        return acc;
    }

private:
    // Label context: prototypes replace the source features ahead of the
    // k/v projections; queries stay spatial. Attention then runs over the
    // R prototypes.
    VarT<T> label_context(const QkvProjectionT<T>& proj, const VarT<T>& f_t, const VarT<T>& f_s,
                          const VarT<T>& ahat, bool training, std::size_t H, std::size_t W) const {
        const Shape& as = ahat->value.shape();
        if (as.size() != 3 || as[2] == 0) fail("label_context", "region count must be positive");
        auto protos = label_prototypes(to_rows(f_s), ahat);      // [B, R, C]
        // run the k/v projections over the prototypes as a [B,C,R,1] map
        auto proto_img = reshape(permute(protos, {0, 2, 1}), {as[0], cfg_.feat_ch, as[2], 1});
        auto q = to_rows(proj.fq(f_t, training));
        auto k = to_rows(proj.fk(proto_img, training));
        auto v = to_rows(proj.fv(proto_img, training));
        return from_rows(attention_quadratic(q, k, v).out, H, W);
    }

    template <typename Opt>
    const QkvProjectionT<T>& require(const Opt& opt, ContextType c) const {
        if (!opt)
            fail("CpBlock", std::string("candidate '") + context_name(c) +
                                "' was not instantiated in block " + prefix_);
        return *opt;
    }

    std::string prefix_;
    CpBlockConfig cfg_;
    std::optional<QkvProjectionT<T>> global_, local_, tlabel_, slabel_;
};

// Writes one attention row as a min-max normalized grayscale PGM. Rows of
// length H*W map directly onto pixels; label-context rows (length R) are
// spread over pixels through the region map before export.
template <typename T>
void export_attention_map(const std::vector<T>& row, std::size_t H, std::size_t W,
                          const std::string& path) {
    if (row.size() != H * W)
        fail("export_attention_map", "row length " + std::to_string(row.size()) +
                                         " does not cover " + std::to_string(H * W) + " pixels");
    write_pgm(path, W, H, normalize_to_bytes(row));
}

// heat(l) = sum_r row[r] * ahat[l,r] for a label-context attention row.
template <typename T>
std::vector<T> spread_label_row(const std::vector<T>& row, const TensorT<T>& ahat_lr) {
    const Shape& s = ahat_lr.shape();
    if (s.size() != 2 || s[1] != row.size())
        fail("spread_label_row", "region map " + shape_str(s) + " incompatible with row of " +
                                     std::to_string(row.size()));
    std::vector<T> heat(s[0], T(0));
    for (std::size_t l = 0; l < s[0]; ++l)
        for (std::size_t r = 0; r < s[1]; ++r) heat[l] += row[r] * ahat_lr.at({l, r});
    return heat;
}

}  // namespace atrc
