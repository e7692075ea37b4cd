#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "storyflow/autodiff.hpp"
#include "storyflow/rng.hpp"
#include "storyflow/tensor.hpp"

namespace storyflow {

enum class Act { identity, tanh, softplus };

inline const char* act_name(Act a) {
    switch (a) {
        case Act::identity: return "identity";
        case Act::tanh: return "tanh";
        case Act::softplus: return "softplus";
    }
    return "identity";
}

inline Act act_from_name(const std::string& s) {
    if (s == "identity") return Act::identity;
    if (s == "tanh") return Act::tanh;
    if (s == "softplus") return Act::softplus;
    throw std::runtime_error("unknown activation: " + s);
}

inline Var apply_act(Tape& t, Var x, Act a) {
    switch (a) {
        case Act::identity: return x;
        case Act::tanh: return t.tanh_(x);
        case Act::softplus: return t.softplus_(x);
    }
    return x;
}

inline Tensor xavier_uniform(int out, int in, Rng& rng) {
    double limit = std::sqrt(6.0 / (in + out));
    Tensor w({out, in});
    for (double& x : w.data) x = rng.uniform(-limit, limit);
    return w;
}

// Named gradient accumulator; reduction happens in name insertion order so
// batched accumulation is deterministic.
class GradMap {
public:
    void add(const std::string& name, const Tensor& g) {
        auto it = index_.find(name);
        if (it == index_.end()) {
            index_.emplace(name, entries_.size());
            entries_.push_back({name, g});
        } else {
            entries_[it->second].second += g;
        }
    }

    void add_scaled(const GradMap& other, double s) {
        for (const auto& [name, g] : other.entries_) {
            auto it = index_.find(name);
            if (it == index_.end()) {
                index_.emplace(name, entries_.size());
                entries_.push_back({name, s * g});
            } else {
                axpy(entries_[it->second].second, s, g);
            }
        }
    }

    void scale(double s) {
        for (auto& [name, g] : entries_)
            for (double& x : g.data) x *= s;
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }
    const Tensor& at(const std::string& name) const { return entries_[index_.at(name)].second; }
    const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
    void clear() {
        index_.clear();
        entries_.clear();
    }

private:
    std::unordered_map<std::string, size_t> index_;
    std::vector<std::pair<std::string, Tensor>> entries_;
};

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Flat named parameter set with Adam state. Insertion order is part of the
// contract: iteration, checksums, and serialization all follow it.
class ParamStore {
public:
    Tensor& create(const std::string& name, Tensor init) {
        if (index_.count(name)) throw std::runtime_error("duplicate parameter: " + name);
        index_.emplace(name, params_.size());
        params_.push_back(Param{name, std::move(init), Tensor(), Tensor()});
        return params_.back().value;
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    Tensor& value(const std::string& name) { return params_[at(name)].value; }
    const Tensor& value(const std::string& name) const { return params_[at(name)].value; }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(params_.size());
        for (const auto& p : params_) out.push_back(p.name);
        return out;
    }

    int64_t total_size() const {
        int64_t n = 0;
        for (const auto& p : params_) n += p.value.numel();
        return n;
    }

    void adam_step(const GradMap& grads, const AdamConfig& cfg) {
        ++step_count_;
        double b1t = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_count_));
        double b2t = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_count_));
        for (auto& p : params_) {
            if (!grads.has(p.name)) continue;
            const Tensor& g = grads.at(p.name);
            if (p.m.numel() == 0) {
                p.m = Tensor::zeros(p.value.shape);
                p.v = Tensor::zeros(p.value.shape);
            }
            for (int64_t i = 0; i < g.numel(); ++i) {
                double gi = g.data[i];
                p.m.data[i] = cfg.beta1 * p.m.data[i] + (1.0 - cfg.beta1) * gi;
                p.v.data[i] = cfg.beta2 * p.v.data[i] + (1.0 - cfg.beta2) * gi * gi;
                double mhat = p.m.data[i] / b1t;
                double vhat = p.v.data[i] / b2t;
                p.value.data[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
            }
        }
    }

    void sgd_step(const GradMap& grads, double lr) {
        for (auto& p : params_) {
            if (!grads.has(p.name)) continue;
            axpy(p.value, -lr, grads.at(p.name));
        }
    }

    int64_t step_count() const { return step_count_; }

    // Order-sensitive digest of all values; frozen components must keep it.
    double checksum() const {
        double acc = 0.0;
        double k = 1.0;
        for (const auto& p : params_) {
            for (double x : p.value.data) {
                acc += x * k;
                k = k >= 7919.0 ? 1.0 : k + 1.0;
            }
        }
        return acc;
    }

    void check_finite() const {
        for (const auto& p : params_) p.value.check_finite(p.name.c_str());
    }

    nlohmann::json to_json() const {
        nlohmann::json jp = nlohmann::json::array();
        for (const auto& p : params_) {
            nlohmann::json e;
            e["name"] = p.name;
            e["shape"] = p.value.shape;
            e["data"] = p.value.data;
            if (p.m.numel() > 0) {
                e["adam_m"] = p.m.data;
                e["adam_v"] = p.v.data;
            }
            jp.push_back(std::move(e));
        }
        nlohmann::json j;
        j["format_version"] = 1;
        j["step_count"] = step_count_;
        j["params"] = std::move(jp);
        return j;
    }

    // Loads values into an already-built store; the shape chain must match.
    void load_json(const nlohmann::json& j) {
        if (!j.contains("format_version") || j.at("format_version").get<int>() != 1)
            throw std::runtime_error("parameter file: unsupported format version");
        const auto& jp = j.at("params");
        if (jp.size() != params_.size())
            throw std::runtime_error("parameter file: parameter count mismatch");
        for (size_t i = 0; i < params_.size(); ++i) {
            const auto& e = jp[i];
            Param& p = params_[i];
            if (e.at("name").get<std::string>() != p.name)
                throw std::runtime_error("parameter file: name mismatch at " + p.name);
            std::vector<int> shape = e.at("shape").get<std::vector<int>>();
            if (shape != p.value.shape)
                throw std::runtime_error("parameter file: shape mismatch at " + p.name);
            p.value.data = e.at("data").get<std::vector<double>>();
            if (static_cast<int64_t>(p.value.data.size()) != Tensor::numel_of(shape))
                throw std::runtime_error("parameter file: data size mismatch at " + p.name);
            if (e.contains("adam_m")) {
                p.m = Tensor(shape, e.at("adam_m").get<std::vector<double>>());
                p.v = Tensor(shape, e.at("adam_v").get<std::vector<double>>());
            }
        }
        step_count_ = j.value("step_count", int64_t{0});
        check_finite();
    }

private:
    struct Param {
        std::string name;
        Tensor value;
        Tensor m, v;
    };

    size_t at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::runtime_error("unknown parameter: " + name);
        return it->second;
    }

    std::vector<Param> params_;
    std::unordered_map<std::string, size_t> index_;
    int64_t step_count_ = 0;
};

// Per-tape view of a ParamStore: lazily creates one leaf per parameter and
// collects leaf gradients back into a GradMap after backward().
class TapeBinding {
public:
    TapeBinding(Tape& tape, const ParamStore& store, bool trainable = true)
        : tape_(&tape), store_(&store), trainable_(trainable) {}

    Var operator[](const std::string& name) {
        auto it = vars_.find(name);
        if (it != vars_.end()) return it->second;
        Var v = tape_->leaf(store_->value(name), trainable_);
        vars_.emplace(name, v);
        order_.push_back(name);
        return v;
    }

    void add_grads_to(GradMap& gm) const {
        if (!trainable_) return;
        for (const std::string& name : order_) gm.add(name, tape_->grad(vars_.at(name)));
    }

private:
    Tape* tape_;
    const ParamStore* store_;
    bool trainable_;
    std::unordered_map<std::string, Var> vars_;
    std::vector<std::string> order_;
};

// Fully connected stack; weights live in a ParamStore under `prefix`.
class Mlp {
public:
    Mlp() = default;

    Mlp(ParamStore& store, std::string prefix, const std::vector<int>& dims, Act hidden,
        Act output, Rng& rng)
        : prefix_(std::move(prefix)) {
        if (dims.size() < 2) throw std::invalid_argument("Mlp: need at least in and out dims");
        for (size_t l = 0; l + 1 < dims.size(); ++l) {
            int in = dims[l], out = dims[l + 1];
            bool last = l + 2 == dims.size();
            store.create(wname(l), xavier_uniform(out, in, rng));
            store.create(bname(l), Tensor::zeros({out}));
            acts_.push_back(last ? output : hidden);
            shapes_.push_back({in, out});
        }
        in_dim_ = dims.front();
        out_dim_ = dims.back();
    }

    Var forward(Tape& t, TapeBinding& p, Var x) const {
        Var h = x;
        for (size_t l = 0; l < acts_.size(); ++l) {
            h = t.linear(h, p[wname(l)], p[bname(l)]);
            h = apply_act(t, h, acts_[l]);
        }
        return h;
    }

    int in_dim() const { return in_dim_; }
    int out_dim() const { return out_dim_; }
    size_t n_layers() const { return acts_.size(); }

private:
    std::string wname(size_t l) const { return prefix_ + ".w" + std::to_string(l); }
    std::string bname(size_t l) const { return prefix_ + ".b" + std::to_string(l); }

    std::string prefix_;
    std::vector<Act> acts_;
    std::vector<std::pair<int, int>> shapes_;
    int in_dim_ = 0, out_dim_ = 0;
};

}  // namespace storyflow
