#pragma once

#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "hvdet/autodiff.hpp"
#include "hvdet/rng.hpp"
#include "hvdet/tensor.hpp"

namespace hvdet {

/// Named registry of trainable leaves. Registration order is the
/// serialization order, so it must be deterministic per config.
class ParamStore {
public:
    ad::Var add(const std::string& name, Tensor init) {
        if (index_.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
        ad::Var v = ad::leaf(std::move(init));
        index_[name] = params_.size();
        params_.push_back({name, v});
        return v;
    }

    struct Entry {
        std::string name;
        ad::Var var;
    };

    const std::vector<Entry>& entries() const { return params_; }

    ad::Var find(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
        return params_[it->second].var;
    }

    void zero_grad() {
        for (auto& e : params_) e.var->grad = Tensor();
    }

    std::size_t total_scalars() const {
        std::size_t n = 0;
        for (const auto& e : params_) n += e.var->value.numel();
        return n;
    }

private:
    std::vector<Entry> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

inline Tensor xavier_uniform(std::vector<std::size_t> shape, std::size_t fan_in,
                             std::size_t fan_out, Rng& rng) {
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-a, a);
    return t;
}

/// y = x W^T + b with weight stored [out, in].
struct Linear {
    ad::Var weight;  // [out, in]
    ad::Var bias;    // [out]

    static Linear create(ParamStore& ps, const std::string& prefix, std::size_t in,
                         std::size_t out, Rng& rng) {
        Linear l;
        l.weight = ps.add(prefix + ".weight", xavier_uniform({out, in}, in, out, rng));
        l.bias = ps.add(prefix + ".bias", Tensor({out}));
        return l;
    }

    /// Weights owned by the layer itself (test fixtures, identity projections).
    static Linear fixed(Tensor w, Tensor b) {
        Linear l;
        l.weight = ad::leaf(std::move(w));
        l.bias = ad::leaf(std::move(b));
        return l;
    }

    std::size_t in_dim() const { return weight->value.cols(); }
    std::size_t out_dim() const { return weight->value.rows(); }

    ad::Var forward(const ad::Var& x) const {
        if (x->value.cols() != in_dim())
            throw std::invalid_argument("Linear: input width " +
                                        std::to_string(x->value.cols()) + " != in_dim " +
                                        std::to_string(in_dim()));
        return ad::affine(x, weight, bias);
    }
};

/// Stack of linear layers, rectifier between layers, identity after the last.
struct Ffn {
    std::vector<Linear> layers;

    static Ffn create(ParamStore& ps, const std::string& prefix,
                      const std::vector<std::size_t>& dims, Rng& rng) {
        if (dims.size() < 2) throw std::invalid_argument("Ffn: need at least one layer");
        Ffn f;
        for (std::size_t i = 0; i + 1 < dims.size(); ++i)
            f.layers.push_back(
                Linear::create(ps, prefix + ".l" + std::to_string(i), dims[i], dims[i + 1], rng));
        return f;
    }

    ad::Var forward(const ad::Var& x) const {
        ad::Var h = x;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            h = layers[i].forward(h);
            if (i + 1 < layers.size()) h = ad::relu(h);
        }
        return h;
    }
};

struct LayerNorm {
    ad::Var gain;
    ad::Var bias;

    static LayerNorm create(ParamStore& ps, const std::string& prefix, std::size_t dim) {
        LayerNorm ln;
        ln.gain = ps.add(prefix + ".gain", Tensor({dim}, 1.0));
        ln.bias = ps.add(prefix + ".bias", Tensor({dim}));
        return ln;
    }

    ad::Var forward(const ad::Var& x) const { return ad::layer_norm_rows(x, gain, bias); }
};

struct Conv {
    ad::Var weight;  // [out, in, k, k]
    ad::Var bias;    // [out]
    std::size_t stride = 1;
    std::size_t pad = 0;

    static Conv create(ParamStore& ps, const std::string& prefix, std::size_t in,
                       std::size_t out, std::size_t k, std::size_t stride, std::size_t pad,
                       Rng& rng) {
        Conv c;
        c.weight = ps.add(prefix + ".weight",
                          xavier_uniform({out, in, k, k}, in * k * k, out * k * k, rng));
        c.bias = ps.add(prefix + ".bias", Tensor({out}));
        c.stride = stride;
        c.pad = pad;
        return c;
    }

    ad::Var forward(const ad::Var& x) const { return ad::conv2d(x, weight, bias, stride, pad); }
};

} // namespace hvdet
