#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "cashewmap/lstm.hpp"
#include "cashewmap/nn_ops.hpp"
#include "cashewmap/params.hpp"
#include "cashewmap/raster_ops.hpp"
#include "cashewmap/rng.hpp"
#include "cashewmap/rstk.hpp"

namespace cashewmap {

enum class TemporalMode { MultiTemporal, MonoTemporal };

inline const char* mode_name(TemporalMode m) {
    return m == TemporalMode::MultiTemporal ? "multi_temporal" : "mono_temporal";
}

inline TemporalMode mode_from_name(const std::string& s) {
    if (s == "multi_temporal") return TemporalMode::MultiTemporal;
    if (s == "mono_temporal") return TemporalMode::MonoTemporal;
    throw ConfigError("unknown mode: " + s);
}

struct STCAConfig {
    int depth = 5;          // conv levels including the bottleneck
    int base_channels = 8;
    int timesteps = 7;
    int bands = 4;
    int classes = 4;
    double dropout_p = 0.3;
    int mc_runs = 10;
    int patch = 64;
    TemporalMode mode = TemporalMode::MultiTemporal;

    int levels() const { return depth - 1; }  // pooling levels before the bottleneck
    int channels_at(int level) const { return base_channels << level; }
    int bottleneck_channels() const { return base_channels << (depth - 1); }

    void validate() const {
        if (depth < 2) throw ConfigError("depth must be at least 2");
        if (base_channels < 1 || timesteps < 1 || bands < 1 || classes < 2 || patch < 1)
            throw ConfigError("invalid model dimensions");
        if (patch % (1 << (depth - 1)) != 0)
            throw ConfigError("patch size must be divisible by 2^(depth-1)");
        if (dropout_p < 0.0 || dropout_p >= 1.0) throw ConfigError("dropout p must be in [0,1)");
        if (mc_runs < 1) throw ConfigError("mc_runs must be at least 1");
        if (mode == TemporalMode::MonoTemporal && timesteps != 1)
            throw ConfigError("mono_temporal mode expects a single timestep");
    }

    nlohmann::json to_json() const {
        return {{"depth", depth},        {"base_channels", base_channels},
                {"timesteps", timesteps}, {"bands", bands},
                {"classes", classes},     {"dropout_p", dropout_p},
                {"mc_runs", mc_runs},     {"patch", patch},
                {"mode", mode_name(mode)}};
    }
    static STCAConfig from_json(const nlohmann::json& j) {
        STCAConfig c;
        c.depth = j.at("depth").get<int>();
        c.base_channels = j.at("base_channels").get<int>();
        c.timesteps = j.at("timesteps").get<int>();
        c.bands = j.at("bands").get<int>();
        c.classes = j.at("classes").get<int>();
        c.dropout_p = j.at("dropout_p").get<double>();
        c.mc_runs = j.at("mc_runs").get<int>();
        c.patch = j.at("patch").get<int>();
        c.mode = mode_from_name(j.at("mode").get<std::string>());
        return c;
    }
};

inline ParameterSet build_model(const STCAConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ParameterSet ps(seed);
    auto add_conv = [&ps](const std::string& name, int oc, int ic, int k) {
        ps.add_weight(name + ".w", {oc, ic, k, k}, ic * k * k);
        ps.add_zeros(name + ".b", {oc});
    };
    for (int l = 0; l < cfg.levels(); ++l) {
        const int ic = l == 0 ? cfg.bands : cfg.channels_at(l - 1);
        const int oc = cfg.channels_at(l);
        add_conv("enc" + std::to_string(l) + ".c1", oc, ic, 3);
        add_conv("enc" + std::to_string(l) + ".c2", oc, oc, 3);
    }
    const int bc = cfg.bottleneck_channels();
    add_conv("bott.c1", bc, cfg.channels_at(cfg.levels() - 1), 3);
    add_conv("bott.c2", bc, bc, 3);
    if (cfg.mode == TemporalMode::MultiTemporal) {
        ensure_lstm(ps, "blstm.fwd", bc, bc / 2);
        ensure_lstm(ps, "blstm.bwd", bc, bc / 2);
        ensure_attention(ps, "attn", bc);
    }
    for (int l = cfg.levels() - 1; l >= 0; --l) {
        const int up_in = l == cfg.levels() - 1 ? bc : cfg.channels_at(l + 1);
        const int oc = cfg.channels_at(l);
        const std::string d = "dec" + std::to_string(l);
        ps.add_weight(d + ".up.w", {up_in, oc, 2, 2}, up_in);
        ps.add_zeros(d + ".up.b", {oc});
        add_conv(d + ".c1", oc, 2 * oc, 3);
        add_conv(d + ".c2", oc, oc, 3);
    }
    add_conv("head", cfg.classes, cfg.base_channels, 1);
    ps.meta()["model"] = cfg.to_json();
    return ps;
}

struct ForwardOpts {
    DropoutMode dropout = DropoutMode::Off;
    std::uint64_t seed = 0;
};

namespace detail {

inline Tensor conv_block(TapeCtx& ctx, const std::string& name, const Tensor& x) {
    Tensor y = relu(conv2d(x, ctx.param(name + ".c1.w"), ctx.param(name + ".c1.b")));
    return relu(conv2d(y, ctx.param(name + ".c2.w"), ctx.param(name + ".c2.b")));
}

}  // namespace detail

// Class logits [classes,H,W] for one patch laid out T x B x H x W.
inline Tensor stca_logits(TapeCtx& ctx, const STCAConfig& cfg, const float* patch, int height, int width,
                          const ForwardOpts& opts) {
    cfg.validate();
    if (height % (1 << (cfg.depth - 1)) != 0 || width % (1 << (cfg.depth - 1)) != 0)
        throw InputError("patch extent not divisible by 2^(depth-1)");
    Rng drop_rng(opts.seed);
    int drop_site = 0;
    auto site_dropout = [&](const Tensor& x) {
        return dropout(x, cfg.dropout_p, opts.dropout, drop_rng.substream("site", drop_site++).next_u64());
    };

    const std::size_t plane = static_cast<std::size_t>(height) * width;
    const int levels = cfg.levels();
    std::vector<std::vector<Tensor>> skips(levels);  // [level][timestep]
    std::vector<Tensor> bottleneck_rows;             // per timestep [P, C]
    int bh = 0, bw = 0;

    for (int t = 0; t < cfg.timesteps; ++t) {
        std::vector<float> tb(patch + static_cast<std::size_t>(t) * cfg.bands * plane,
                              patch + static_cast<std::size_t>(t + 1) * cfg.bands * plane);
        Tensor x = Tensor::from_values({cfg.bands, height, width}, std::move(tb));
        for (int l = 0; l < levels; ++l) {
            x = detail::conv_block(ctx, "enc" + std::to_string(l), x);
            skips[l].push_back(x);
            x = maxpool2(x);
        }
        x = detail::conv_block(ctx, "bott", x);
        x = site_dropout(x);
        bh = x.shape()[1];
        bw = x.shape()[2];
        bottleneck_rows.push_back(chw_to_rows(x));
    }

    Tensor fused_rows;
    if (cfg.mode == TemporalMode::MultiTemporal) {
        std::vector<Tensor> hs = bilstm(ctx, "blstm", bottleneck_rows, cfg.bottleneck_channels() / 2);
        fused_rows = attention_aggregate(ctx, "attn", hs);
    } else {
        fused_rows = bottleneck_rows[0];
    }
    Tensor x = rows_to_chw(fused_rows, bh, bw);

    for (int l = levels - 1; l >= 0; --l) {
        const std::string d = "dec" + std::to_string(l);
        x = transposed_conv2(x, ctx.param(d + ".up.w"), ctx.param(d + ".up.b"));
        Tensor skip = skips[l].size() == 1 ? skips[l][0] : mean_tensors(skips[l]);
        x = detail::conv_block(ctx, d, concat_chw(x, skip));
        x = site_dropout(x);
    }
    return conv2d(x, ctx.param("head.w"), ctx.param("head.b"));
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainConfig {
    int epochs = 30;
    double lr = 1e-3;
    double val_fraction = 0.2;
    int batch = 8;
    int patience = 5;
    std::uint64_t seed = 1;
};

struct TrainResult {
    std::vector<double> loss_curve;  // deterministic end-of-epoch eval loss
    std::vector<double> train_loss;  // running training loss (dropout active)
    int best_epoch = -1;
    double best_loss = 0.0;
    std::vector<std::string> warnings;
};

namespace detail {

inline double eval_loss(ParameterSet& ps, const STCAConfig& cfg, const PatchSet& patches,
                        const std::vector<std::size_t>& idx) {
    double total = 0.0;
    for (std::size_t i : idx) {
        TapeCtx ctx(ps);
        Tensor logits =
            stca_logits(ctx, cfg, patches.patches[i].data(), patches.size, patches.size, ForwardOpts{});
        total += softmax_cross_entropy(logits, patches.labels[i]).item_f64();
    }
    return total / static_cast<double>(idx.size());
}

inline std::vector<float> snapshot(const ParameterSet& ps) {
    std::vector<float> all;
    all.reserve(ps.count_scalars());
    for (const auto& [name, p] : ps.all()) all.insert(all.end(), p.values->begin(), p.values->end());
    return all;
}

inline void restore(ParameterSet& ps, const std::vector<float>& all) {
    std::size_t off = 0;
    for (auto& [name, p] : ps.all_mutable()) {
        std::copy(all.begin() + off, all.begin() + off + p.values->size(), p.values->begin());
        off += p.values->size();
    }
}

}  // namespace detail

inline TrainResult stca_train(ParameterSet& ps, const STCAConfig& cfg, const PatchSet& patches,
                              const TrainConfig& tc) {
    cfg.validate();
    if (!patches.labeled()) throw InputError("training requires labeled patches");
    if (patches.size != cfg.patch)
        throw ConfigError("patch set size does not match model patch size");
    if (tc.epochs < 1) throw ConfigError("epochs must be at least 1");
    if (tc.val_fraction < 0.0 || tc.val_fraction >= 1.0)
        throw ConfigError("val_fraction must be in [0,1)");
    if (tc.batch < 1) throw ConfigError("batch must be at least 1");

    TrainResult res;
    {
        std::array<bool, kNumClasses> seen{};
        for (const auto& lab : patches.labels)
            for (std::uint8_t v : lab)
                if (v != kNoData) seen[v] = true;
        const int distinct = static_cast<int>(std::count(seen.begin(), seen.end(), true));
        if (distinct < 2) res.warnings.push_back("single-class dataset: training is degenerate");
    }

    Rng root(tc.seed);
    std::vector<std::size_t> order(patches.patches.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    {
        Rng split_rng(root.substream("split").next_u64());
        split_rng.shuffle(order);
    }
    const std::size_t n_val =
        std::min(order.size() - 1, static_cast<std::size_t>(std::llround(tc.val_fraction * order.size())));
    std::vector<std::size_t> val_idx(order.begin(), order.begin() + n_val);
    std::vector<std::size_t> train_idx(order.begin() + n_val, order.end());
    const std::vector<std::size_t>& eval_idx = val_idx.empty() ? train_idx : val_idx;

    std::vector<float> best;
    std::uint64_t drop_counter = 0;
    for (int epoch = 0; epoch < tc.epochs; ++epoch) {
        Rng order_rng(root.substream("order", epoch).next_u64());
        order_rng.shuffle(train_idx);
        double epoch_loss = 0.0;
        for (std::size_t ofs = 0; ofs < train_idx.size(); ofs += tc.batch) {
            const std::size_t lim = std::min(train_idx.size(), ofs + tc.batch);
            TapeCtx ctx(ps);
            for (std::size_t k = ofs; k < lim; ++k) {
                const std::size_t i = train_idx[k];
                ForwardOpts opts{DropoutMode::Train, root.substream("drop", drop_counter++).next_u64()};
                Tensor logits =
                    stca_logits(ctx, cfg, patches.patches[i].data(), patches.size, patches.size, opts);
                Tensor loss = softmax_cross_entropy(logits, patches.labels[i]);
                const double lv = loss.item_f64();
                if (!std::isfinite(lv)) throw NumericError("diverged: non-finite training loss");
                epoch_loss += lv;
                loss.backward();
            }
            ps.adam_step(ctx, AdamConfig{tc.lr}, 1.0 / static_cast<double>(lim - ofs));
        }
        res.train_loss.push_back(epoch_loss / static_cast<double>(train_idx.size()));

        const double ev = detail::eval_loss(ps, cfg, patches, eval_idx);
        if (!std::isfinite(ev)) throw NumericError("diverged: non-finite validation loss");
        res.loss_curve.push_back(ev);
        if (res.best_epoch < 0 || ev < res.best_loss) {
            res.best_epoch = epoch;
            res.best_loss = ev;
            best = detail::snapshot(ps);
        } else if (epoch - res.best_epoch > tc.patience) {
            break;
        }
    }
    if (!best.empty()) detail::restore(ps, best);
    return res;
}

// ---------------------------------------------------------------------------
// Monte Carlo dropout inference
// ---------------------------------------------------------------------------

struct McResult {
    int height = 0, width = 0, classes = 0;
    std::vector<float> mean_probs;  // [classes, H, W]
    std::vector<float> class_std;   // [classes, H, W]
    std::vector<float> unc;         // [H, W], std of the argmax class
    std::vector<std::vector<float>> run_probs;  // per run, kept on request
};

namespace detail {

inline void softmax_planes(std::vector<float>& logits, int classes, std::size_t plane) {
    for (std::size_t i = 0; i < plane; ++i) {
        float mx = logits[i];
        for (int c = 1; c < classes; ++c)
            mx = std::max(mx, logits[static_cast<std::size_t>(c) * plane + i]);
        double sum = 0.0;
        for (int c = 0; c < classes; ++c) {
            const std::size_t idx = static_cast<std::size_t>(c) * plane + i;
            logits[idx] = std::exp(logits[idx] - mx);
            sum += logits[idx];
        }
        const float inv = static_cast<float>(1.0 / sum);
        for (int c = 0; c < classes; ++c) logits[static_cast<std::size_t>(c) * plane + i] *= inv;
    }
}

// Mean in float64 over runs, cast to float32; std about the cast mean with
// divisor R. Recomputing from stored runs must match bit for bit.
inline void mc_reduce(const std::vector<std::vector<float>>& runs, int classes, std::size_t plane,
                      std::vector<float>& mean_out, std::vector<float>& std_out) {
    const std::size_t n = static_cast<std::size_t>(classes) * plane;
    const double inv_r = 1.0 / static_cast<double>(runs.size());
    mean_out.assign(n, 0.0f);
    std_out.assign(n, 0.0f);
    for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (const auto& r : runs) acc += static_cast<double>(r[i]);
        mean_out[i] = static_cast<float>(acc * inv_r);
        double sq = 0.0;
        for (const auto& r : runs) {
            const double d = static_cast<double>(r[i]) - static_cast<double>(mean_out[i]);
            sq += d * d;
        }
        std_out[i] = static_cast<float>(std::sqrt(sq * inv_r));
    }
}

}  // namespace detail

inline McResult predict_mc(ParameterSet& ps, const STCAConfig& cfg, const float* patch, int height,
                           int width, int runs, std::uint64_t seed, bool keep_runs = false) {
    cfg.validate();
    if (runs < 1) throw ConfigError("mc runs must be at least 1");
    const std::size_t plane = static_cast<std::size_t>(height) * width;
    Rng root(seed);
    std::vector<std::vector<float>> run_probs;
    run_probs.reserve(runs);
    const DropoutMode mode = cfg.dropout_p > 0.0 ? DropoutMode::Mc : DropoutMode::Off;
    for (int r = 0; r < runs; ++r) {
        TapeCtx ctx(ps);
        ForwardOpts opts{mode, root.substream("mc", r).next_u64()};
        Tensor logits = stca_logits(ctx, cfg, patch, height, width, opts);
        std::vector<float> probs(logits.data(), logits.data() + logits.size());
        detail::softmax_planes(probs, cfg.classes, plane);
        run_probs.push_back(std::move(probs));
    }

    McResult out;
    out.height = height;
    out.width = width;
    out.classes = cfg.classes;
    detail::mc_reduce(run_probs, cfg.classes, plane, out.mean_probs, out.class_std);
    out.unc.resize(plane);
    for (std::size_t i = 0; i < plane; ++i) {
        int arg = 0;
        float best = out.mean_probs[i];
        for (int c = 1; c < cfg.classes; ++c) {
            const float v = out.mean_probs[static_cast<std::size_t>(c) * plane + i];
            if (v > best) {
                best = v;
                arg = c;
            }
        }
        out.unc[i] = out.class_std[static_cast<std::size_t>(arg) * plane + i];
    }
    if (keep_runs) out.run_probs = std::move(run_probs);
    return out;
}

// ---------------------------------------------------------------------------
// Whole-scene inference
// ---------------------------------------------------------------------------

struct ProbabilityField {
    int height = 0, width = 0, classes = 0;
    std::vector<float> probs;  // [classes, H, W]
    std::vector<float> unc;    // [H, W]
    std::string model_id;
    int runs = 0;
    std::uint64_t seed = 0;

    void validate() const {
        if (height < 1 || width < 1 || classes < 2) throw InputError("empty probability field");
        if (probs.size() != static_cast<std::size_t>(classes) * height * width ||
            unc.size() != static_cast<std::size_t>(height) * width)
            throw InputError("probability field size mismatch");
    }

    std::vector<float> class_plane(int c) const {
        const std::size_t plane = static_cast<std::size_t>(height) * width;
        return {probs.begin() + static_cast<std::size_t>(c) * plane,
                probs.begin() + static_cast<std::size_t>(c + 1) * plane};
    }
};

inline ProbabilityField infer_scene(ParameterSet& ps, const STCAConfig& cfg, const RasterStack& stack,
                                    int runs, std::uint64_t seed, int stride = 0) {
    cfg.validate();
    if (stack.timesteps != cfg.timesteps || stack.bands != cfg.bands)
        throw InputError("stack dims do not match model config");
    if (stack.height < cfg.patch || stack.width < cfg.patch)
        throw InputError("stack smaller than model patch size");
    if (stride <= 0) stride = cfg.patch;
    PatchSet tiles = tile_patches(stack, nullptr, cfg.patch, stride);

    const std::size_t plane = static_cast<std::size_t>(stack.height) * stack.width;
    std::vector<double> prob_acc(static_cast<std::size_t>(cfg.classes) * plane, 0.0);
    std::vector<double> unc_acc(plane, 0.0);
    std::vector<std::uint32_t> cover(plane, 0);

    Rng root(seed);
    for (std::size_t i = 0; i < tiles.patches.size(); ++i) {
        const std::uint64_t tile_seed = root.substream("tile", i).next_u64();
        McResult mc = predict_mc(ps, cfg, tiles.patches[i].data(), cfg.patch, cfg.patch, runs, tile_seed);
        const auto [oy, ox] = tiles.origins[i];
        for (int y = 0; y < cfg.patch; ++y)
            for (int x = 0; x < cfg.patch; ++x) {
                const std::size_t dst = static_cast<std::size_t>(oy + y) * stack.width + (ox + x);
                const std::size_t src = static_cast<std::size_t>(y) * cfg.patch + x;
                for (int c = 0; c < cfg.classes; ++c)
                    prob_acc[static_cast<std::size_t>(c) * plane + dst] +=
                        mc.mean_probs[static_cast<std::size_t>(c) * cfg.patch * cfg.patch + src];
                unc_acc[dst] += mc.unc[src];
                ++cover[dst];
            }
    }

    ProbabilityField field;
    field.height = stack.height;
    field.width = stack.width;
    field.classes = cfg.classes;
    field.model_id = hex64(ps.content_hash());
    field.runs = runs;
    field.seed = seed;
    field.probs.resize(prob_acc.size());
    field.unc.resize(plane);
    for (std::size_t i = 0; i < plane; ++i) {
        if (cover[i] == 0) throw Error("tiling left a pixel uncovered");
        const double inv = 1.0 / cover[i];
        for (int c = 0; c < cfg.classes; ++c)
            field.probs[static_cast<std::size_t>(c) * plane + i] =
                static_cast<float>(prob_acc[static_cast<std::size_t>(c) * plane + i] * inv);
        field.unc[i] = static_cast<float>(unc_acc[i] * inv);
    }
    return field;
}

// Serialized as a 5-band single-timestep raster: class probabilities then the
// uncertainty plane.
inline RasterStack field_to_raster(const ProbabilityField& field) {
    field.validate();
    RasterStack rs;
    rs.timesteps = 1;
    rs.bands = field.classes + 1;
    rs.height = field.height;
    rs.width = field.width;
    rs.values.reserve(field.probs.size() + field.unc.size());
    rs.values.insert(rs.values.end(), field.probs.begin(), field.probs.end());
    rs.values.insert(rs.values.end(), field.unc.begin(), field.unc.end());
    rs.band_names = {"p_mixed_trees", "p_cashew", "p_builtup", "p_cropland", "uncertainty"};
    rs.band_names.resize(rs.bands, "band");
    return rs;
}

inline ProbabilityField field_from_raster(const RasterStack& rs) {
    if (rs.timesteps != 1 || rs.bands < 3) throw InputError("not a probability field raster");
    ProbabilityField field;
    field.height = rs.height;
    field.width = rs.width;
    field.classes = rs.bands - 1;
    const std::size_t plane = static_cast<std::size_t>(rs.height) * rs.width;
    field.probs.assign(rs.values.begin(), rs.values.begin() + static_cast<std::size_t>(field.classes) * plane);
    field.unc.assign(rs.values.begin() + static_cast<std::size_t>(field.classes) * plane, rs.values.end());
    field.validate();
    return field;
}

}  // namespace cashewmap
