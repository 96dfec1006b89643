// Layer modules over the raw primitives: convolution, batch norm and the
// Conv-BatchNorm-Activation block used throughout the network. Construction
// registers parameters in a ParamStore; forward builds graph nodes.

#pragma once

#include "atrc/nn_ops.hpp"
#include "atrc/optim.hpp"
#include "atrc/params.hpp"

namespace atrc {

enum class Activation { kNone, kRelu, kSoftplus };

template <typename T>
VarT<T> apply_activation(const VarT<T>& x, Activation act) {
    switch (act) {
        case Activation::kRelu: return relu(x);
        case Activation::kSoftplus: return softplus(x);
        default: return x;
    }
}

template <typename T>
struct Conv2dT {
    VarT<T> weight;
    VarT<T> bias;  // null when the layer feeds a batch norm

    Conv2dT() = default;
    Conv2dT(ParamStoreT<T>& ps, const std::string& prefix, std::size_t in_ch, std::size_t out_ch,
            std::size_t k, std::uint64_t seed, bool with_bias) {
        const std::size_t fan_in = in_ch * k * k;
        weight = ps.add(prefix + ".w", he_uniform<T>({out_ch, in_ch, k, k}, fan_in, seed, prefix + ".w"));
        if (with_bias) bias = ps.add(prefix + ".b", TensorT<T>({out_ch}));
    }

    VarT<T> operator()(const VarT<T>& x) const { return conv2d(x, weight, bias); }
};

template <typename T>
struct BatchNorm2dT {
    VarT<T> gamma;  // null when affine is disabled
    VarT<T> beta;
    VarT<T> run_mean;
    VarT<T> run_var;
    T momentum = T(0.1);
    T eps = T(1e-5);

    BatchNorm2dT() = default;
    BatchNorm2dT(ParamStoreT<T>& ps, const std::string& prefix, std::size_t channels, bool affine) {
        if (affine) {
            gamma = ps.add(prefix + ".g", TensorT<T>::ones({channels}));
            beta = ps.add(prefix + ".bta", TensorT<T>({channels}));
        }
        run_mean = ps.add(prefix + ".rm", TensorT<T>({channels}), false);
        run_var = ps.add(prefix + ".rv", TensorT<T>::ones({channels}), false);
    }

    VarT<T> operator()(const VarT<T>& x, bool training) const {
        return batchnorm2d(x, gamma, beta, run_mean->value, run_var->value, training, momentum, eps);
    }
};

template <typename T>
struct ConvBnActT {
    Conv2dT<T> conv;
    BatchNorm2dT<T> bn;
    Activation act = Activation::kRelu;

    ConvBnActT() = default;
    ConvBnActT(ParamStoreT<T>& ps, const std::string& prefix, std::size_t in_ch, std::size_t out_ch,
               std::size_t k, std::uint64_t seed, Activation act_, bool bn_affine = true)
        : conv(ps, prefix + ".conv", in_ch, out_ch, k, seed, /*with_bias=*/false),
          bn(ps, prefix + ".bn", out_ch, bn_affine),
          act(act_) {}

    VarT<T> operator()(const VarT<T>& x, bool training) const {
        return apply_activation(bn(conv(x), training), act);
    }
};

}  // namespace atrc
