#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cashewmap/common.hpp"
#include "cashewmap/rng.hpp"
#include "cashewmap/tensor.hpp"

namespace cashewmap {

struct Param {
    Shape shape;
    std::shared_ptr<std::vector<float>> values;
    std::vector<float> m;
    std::vector<float> v;
};

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// One graph-building episode. Leaves created here share parameter storage,
// so gradients accumulate across per-item graphs until the optimizer step.
class TapeCtx;

class ParameterSet {
public:
    explicit ParameterSet(std::uint64_t seed) : seed_(seed) {}

    // Fan-in scaled uniform init, U(-sqrt(1/fan_in), sqrt(1/fan_in)).
    Param& add_weight(const std::string& name, Shape shape, int fan_in) {
        if (fan_in <= 0) throw Error("add_weight: fan_in must be positive");
        Param& p = insert(name, std::move(shape));
        Rng rng(Rng(seed_).substream("init/" + name).next_u64());
        const double bound = std::sqrt(1.0 / fan_in);
        for (auto& pv : *p.values) pv = static_cast<float>(rng.uniform(-bound, bound));
        return p;
    }

    Param& add_zeros(const std::string& name, Shape shape) {
        return insert(name, std::move(shape));
    }

    Param& add_const(const std::string& name, Shape shape, float value) {
        Param& p = insert(name, std::move(shape));
        std::fill(p.values->begin(), p.values->end(), value);
        return p;
    }

    bool has(const std::string& name) const { return params_.count(name) != 0; }

    Param& at(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw Error("unknown parameter: " + name);
        return it->second;
    }
    const Param& at(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw Error("unknown parameter: " + name);
        return it->second;
    }

    const std::map<std::string, Param>& all() const { return params_; }
    std::map<std::string, Param>& all_mutable() { return params_; }
    std::uint64_t seed() const { return seed_; }
    std::int64_t step() const { return step_; }
    nlohmann::json& meta() { return meta_; }
    const nlohmann::json& meta() const { return meta_; }

    std::size_t count_scalars() const {
        std::size_t n = 0;
        for (const auto& [name, p] : params_) n += p.values->size();
        return n;
    }

    // FNV-1a over parameter bytes in name order; used by determinism checks.
    std::uint64_t content_hash() const {
        std::uint64_t h = 14695981039346656037ull;
        auto mix = [&h](const void* data, std::size_t bytes) {
            const auto* b = static_cast<const unsigned char*>(data);
            for (std::size_t i = 0; i < bytes; ++i) {
                h ^= b[i];
                h *= 1099511628211ull;
            }
        };
        for (const auto& [name, p] : params_) {
            mix(name.data(), name.size());
            mix(p.values->data(), p.values->size() * sizeof(float));
        }
        return h;
    }

    void adam_step(TapeCtx& ctx, const AdamConfig& cfg, double grad_scale = 1.0);

    void save(const std::string& path) const {
        nlohmann::json manifest;
        manifest["magic"] = "CKPT1";
        manifest["seed"] = seed_;
        manifest["step"] = step_;
        manifest["meta"] = meta_;
        auto& plist = manifest["params"] = nlohmann::json::array();
        for (const auto& [name, p] : params_) {
            nlohmann::json e;
            e["name"] = name;
            e["shape"] = p.shape;
            plist.push_back(std::move(e));
        }
        std::ofstream out(path, std::ios::binary);
        if (!out) throw InputError("cannot write checkpoint: " + path);
        out << manifest.dump() << "\n";
        for (const auto& [name, p] : params_) {
            out.write(reinterpret_cast<const char*>(p.values->data()),
                      static_cast<std::streamsize>(p.values->size() * sizeof(float)));
            out.write(reinterpret_cast<const char*>(p.m.data()),
                      static_cast<std::streamsize>(p.m.size() * sizeof(float)));
            out.write(reinterpret_cast<const char*>(p.v.data()),
                      static_cast<std::streamsize>(p.v.size() * sizeof(float)));
        }
        if (!out) throw InputError("short write on checkpoint: " + path);
    }

    static ParameterSet load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw InputError("cannot open checkpoint: " + path);
        std::string header;
        if (!std::getline(in, header)) throw InputError("checkpoint header missing: " + path);
        nlohmann::json manifest;
        try {
            manifest = nlohmann::json::parse(header);
        } catch (const nlohmann::json::exception& e) {
            throw InputError("bad checkpoint header: " + std::string(e.what()));
        }
        if (manifest.value("magic", "") != "CKPT1")
            throw InputError("not a checkpoint file: " + path);
        ParameterSet ps(manifest.at("seed").get<std::uint64_t>());
        ps.step_ = manifest.at("step").get<std::int64_t>();
        ps.meta_ = manifest.value("meta", nlohmann::json::object());
        for (const auto& e : manifest.at("params")) {
            const std::string name = e.at("name").get<std::string>();
            Shape shape = e.at("shape").get<Shape>();
            Param& p = ps.insert(name, std::move(shape));
            auto read_block = [&in, &path](std::vector<float>& dst) {
                in.read(reinterpret_cast<char*>(dst.data()),
                        static_cast<std::streamsize>(dst.size() * sizeof(float)));
                if (in.gcount() != static_cast<std::streamsize>(dst.size() * sizeof(float)))
                    throw InputError("truncated checkpoint: " + path);
            };
            read_block(*p.values);
            read_block(p.m);
            read_block(p.v);
        }
        return ps;
    }

private:
    Param& insert(const std::string& name, Shape shape) {
        if (params_.count(name)) throw Error("duplicate parameter: " + name);
        const std::size_t n = numel(shape);
        Param p;
        p.shape = std::move(shape);
        p.values = std::make_shared<std::vector<float>>(n, 0.0f);
        p.m.assign(n, 0.0f);
        p.v.assign(n, 0.0f);
        return params_.emplace(name, std::move(p)).first->second;
    }

    std::map<std::string, Param> params_;
    std::uint64_t seed_ = 0;
    std::int64_t step_ = 0;
    nlohmann::json meta_ = nlohmann::json::object();
};

class TapeCtx {
public:
    explicit TapeCtx(ParameterSet& ps) : ps_(&ps) {}

    // Leaf tensor over the named parameter's storage; cached so gradients
    // accumulate across graphs built within this context.
    Tensor param(const std::string& name) {
        auto it = leaves_.find(name);
        if (it != leaves_.end()) return it->second;
        Param& p = ps_->at(name);
        Tensor t = Tensor::leaf(p.shape, p.values, true);
        leaves_.emplace(name, t);
        return t;
    }

    const std::map<std::string, Tensor>& leaves() const { return leaves_; }
    ParameterSet& params() { return *ps_; }

private:
    ParameterSet* ps_;
    std::map<std::string, Tensor> leaves_;
};

inline void ParameterSet::adam_step(TapeCtx& ctx, const AdamConfig& cfg, double grad_scale) {
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_));
    for (auto& [name, p] : params_) {
        const float* grad = nullptr;
        auto it = ctx.leaves().find(name);
        if (it != ctx.leaves().end() && !it->second.node()->grad.empty())
            grad = it->second.node()->grad.data();
        float* val = p.values->data();
        const std::size_t n = p.values->size();
        for (std::size_t i = 0; i < n; ++i) {
            const double g = grad ? static_cast<double>(grad[i]) * grad_scale : 0.0;
            if (!std::isfinite(g)) throw NumericError("diverged: non-finite gradient in " + name);
            double mi = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * g;
            double vi = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * g * g;
            p.m[i] = static_cast<float>(mi);
            p.v[i] = static_cast<float>(vi);
            const double update = cfg.lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg.eps);
            const double nv = static_cast<double>(val[i]) - update;
            if (!std::isfinite(nv)) throw NumericError("diverged: non-finite parameter in " + name);
            val[i] = static_cast<float>(nv);
        }
    }
}

}  // namespace cashewmap
