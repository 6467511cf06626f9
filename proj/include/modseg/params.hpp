// Copyright (c) the modseg authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0

#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "modseg/autodiff.hpp"
#include "modseg/common.hpp"

namespace modseg {

/// Ordered collection of named parameter tensors. Order is creation order
/// and is part of the checkpoint format.
class ParamStore {
  public:
    void add(const std::string& name, ad::Tensor t) {
        if (index_.count(name)) throw ContractError("ParamStore: duplicate name " + name);
        index_[name] = items_.size();
        items_.emplace_back(name, std::move(t));
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    ad::Tensor& get(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ContractError("ParamStore: unknown name " + name);
        return items_[it->second].second;
    }

    const ad::Tensor& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ContractError("ParamStore: unknown name " + name);
        return items_[it->second].second;
    }

    const std::vector<std::pair<std::string, ad::Tensor>>& items() const { return items_; }
    std::vector<std::pair<std::string, ad::Tensor>>& items() { return items_; }
    std::size_t size() const { return items_.size(); }

  private:
    std::vector<std::pair<std::string, ad::Tensor>> items_;
    std::map<std::string, std::size_t> index_;
};

/// Binds a ParamStore to a tape, creating one leaf per parameter on first
/// use. Keeps the name -> VarId map for gradient readout.
struct GraphParams {
    ad::Tape* tape = nullptr;
    const ParamStore* store = nullptr;
    bool training = false;
    std::map<std::string, ad::VarId> vars;

    ad::VarId operator()(const std::string& name) {
        auto it = vars.find(name);
        if (it != vars.end()) return it->second;
        const ad::VarId id = tape->leaf(store->at(name), training);
        vars.emplace(name, id);
        return id;
    }
};

namespace detail {

inline void fill_uniform_fanin(ad::Tensor& t, int fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (double& v : t.data) v = rng.uniform(-bound, bound);
}

}  // namespace detail

/// Adds a linear layer (w: in x out, b: 1 x out). Residual-branch output
/// projections are zero-initialized so blocks start as the identity.
inline void add_linear(ParamStore& p, const std::string& prefix, int in, int out, Rng& rng,
                       bool zero_init = false) {
    ad::Tensor w(in, out), b(1, out, 0.0);
    if (!zero_init) detail::fill_uniform_fanin(w, in, rng);
    p.add(prefix + ".w", std::move(w));
    p.add(prefix + ".b", std::move(b));
}

inline void add_layernorm(ParamStore& p, const std::string& prefix, int dim) {
    p.add(prefix + ".g", ad::Tensor(1, dim, 1.0));
    p.add(prefix + ".b", ad::Tensor(1, dim, 0.0));
}

/// Attention parameter block: wq/wk/wv fan-in initialized, wo zeroed.
inline void add_attention(ParamStore& p, const std::string& prefix, int dim, Rng& rng) {
    for (const char* n : {"wq", "wk", "wv"}) {
        ad::Tensor w(dim, dim);
        detail::fill_uniform_fanin(w, dim, rng);
        p.add(prefix + "." + n, std::move(w));
        p.add(prefix + ".b" + std::string(1, n[1]), ad::Tensor(1, dim, 0.0));
    }
    p.add(prefix + ".wo", ad::Tensor(dim, dim, 0.0));
    p.add(prefix + ".bo", ad::Tensor(1, dim, 0.0));
}

/// Overwrites every tensor with nonzero uniform values; used by gradient
/// checks so zero-initialized projections also carry signal.
inline void randomize_params(ParamStore& p, std::uint64_t seed, double scale = 0.2) {
    Rng rng(seed);
    for (auto& [name, t] : p.items()) {
        (void)name;
        for (double& v : t.data) v = rng.uniform(-scale, scale);
    }
}

}  // namespace modseg
