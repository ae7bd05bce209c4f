#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cashewmap/lstm.hpp"
#include "cashewmap/nn_ops.hpp"
#include "cashewmap/params.hpp"
#include "cashewmap/raster_ops.hpp"
#include "cashewmap/rstk.hpp"

namespace cashewmap {

// ---------------------------------------------------------------------------
// Spatiotemporal autoencoder
// ---------------------------------------------------------------------------

struct AutoencoderConfig {
    int depth = 5;
    int base_channels = 8;
    int timesteps = 7;
    int bands = 4;
    int embed_dim = 16;
    int patch = 32;

    int levels() const { return depth - 1; }
    int channels_at(int level) const { return base_channels << level; }
    int bottleneck_channels() const { return base_channels << (depth - 1); }
    int bottleneck_extent() const { return patch >> (depth - 1); }

    void validate() const {
        if (depth < 2 || base_channels < 1 || timesteps < 1 || bands < 1 || patch < 1)
            throw ConfigError("invalid autoencoder dimensions");
        if (embed_dim < 1) throw ConfigError("embed_dim must be positive");
        if (patch % (1 << (depth - 1)) != 0)
            throw ConfigError("patch size must be divisible by 2^(depth-1)");
    }

    nlohmann::json to_json() const {
        return {{"depth", depth},         {"base_channels", base_channels},
                {"timesteps", timesteps}, {"bands", bands},
                {"embed_dim", embed_dim}, {"patch", patch}};
    }
    static AutoencoderConfig from_json(const nlohmann::json& j) {
        AutoencoderConfig c;
        c.depth = j.at("depth").get<int>();
        c.base_channels = j.at("base_channels").get<int>();
        c.timesteps = j.at("timesteps").get<int>();
        c.bands = j.at("bands").get<int>();
        c.embed_dim = j.at("embed_dim").get<int>();
        c.patch = j.at("patch").get<int>();
        return c;
    }
};

inline ParameterSet build_autoencoder(const AutoencoderConfig& cfg, std::uint64_t seed) {
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
    ensure_lstm(ps, "blstm.fwd", bc, bc / 2);
    ensure_lstm(ps, "blstm.bwd", bc, bc / 2);
    ensure_attention(ps, "attn", bc);
    ps.add_weight("emb.w", {bc, cfg.embed_dim}, bc);
    ps.add_zeros("emb.b", {cfg.embed_dim});

    const int be = cfg.bottleneck_extent();
    ensure_lstm(ps, "dlstm", cfg.embed_dim, bc);
    ps.add_weight("dproj.w", {bc, bc * be * be}, bc);
    ps.add_zeros("dproj.b", {bc * be * be});
    for (int l = cfg.levels() - 1; l >= 0; --l) {
        const int up_in = l == cfg.levels() - 1 ? bc : cfg.channels_at(l + 1);
        const int oc = cfg.channels_at(l);
        const std::string d = "adec" + std::to_string(l);
        ps.add_weight(d + ".up.w", {up_in, oc, 2, 2}, up_in);
        ps.add_zeros(d + ".up.b", {oc});
        add_conv(d + ".c1", oc, oc, 3);
        add_conv(d + ".c2", oc, oc, 3);
    }
    add_conv("recon", cfg.bands, cfg.base_channels, 1);
    ps.meta()["autoencoder"] = cfg.to_json();
    return ps;
}

namespace detail {

inline Tensor ae_conv_block(TapeCtx& ctx, const std::string& name, const Tensor& x) {
    Tensor y = relu(conv2d(x, ctx.param(name + ".c1.w"), ctx.param(name + ".c1.b")));
    return relu(conv2d(y, ctx.param(name + ".c2.w"), ctx.param(name + ".c2.b")));
}

}  // namespace detail

// Embedding graph for one patch laid out T x B x H x W; output [1, d].
inline Tensor ae_embed_graph(TapeCtx& ctx, const AutoencoderConfig& cfg, const float* patch) {
    cfg.validate();
    const std::size_t plane = static_cast<std::size_t>(cfg.patch) * cfg.patch;
    std::vector<Tensor> bottleneck_rows;
    for (int t = 0; t < cfg.timesteps; ++t) {
        std::vector<float> tb(patch + static_cast<std::size_t>(t) * cfg.bands * plane,
                              patch + static_cast<std::size_t>(t + 1) * cfg.bands * plane);
        Tensor x = Tensor::from_values({cfg.bands, cfg.patch, cfg.patch}, std::move(tb));
        for (int l = 0; l < cfg.levels(); ++l) {
            x = detail::ae_conv_block(ctx, "enc" + std::to_string(l), x);
            x = maxpool2(x);
        }
        x = detail::ae_conv_block(ctx, "bott", x);
        bottleneck_rows.push_back(chw_to_rows(x));
    }
    std::vector<Tensor> hs = bilstm(ctx, "blstm", bottleneck_rows, cfg.bottleneck_channels() / 2);
    Tensor fused = attention_aggregate(ctx, "attn", hs);
    const int be = cfg.bottleneck_extent();
    Tensor pooled = spatial_mean(rows_to_chw(fused, be, be));  // [1, bc]
    return add_bias_rows(matmul(pooled, ctx.param("emb.w")), ctx.param("emb.b"));
}

// Reconstruction from an embedding: LSTM unrolled T steps on the embedding,
// each hidden state projected to the bottleneck grid and convolved back up.
inline std::vector<Tensor> ae_decode_graph(TapeCtx& ctx, const AutoencoderConfig& cfg, const Tensor& emb) {
    const int bc = cfg.bottleneck_channels();
    const int be = cfg.bottleneck_extent();
    LstmWeights dec = lstm_weights(ctx, "dlstm", cfg.embed_dim, bc);
    std::vector<Tensor> steps(cfg.timesteps, emb);
    std::vector<Tensor> hs = lstm_sequence(dec, steps);
    std::vector<Tensor> recon;
    recon.reserve(cfg.timesteps);
    for (const auto& h : hs) {
        Tensor x = reshape(add_bias_rows(matmul(h, ctx.param("dproj.w")), ctx.param("dproj.b")),
                           {bc, be, be});
        for (int l = cfg.levels() - 1; l >= 0; --l) {
            const std::string d = "adec" + std::to_string(l);
            x = transposed_conv2(x, ctx.param(d + ".up.w"), ctx.param(d + ".up.b"));
            x = detail::ae_conv_block(ctx, d, x);
        }
        recon.push_back(conv2d(x, ctx.param("recon.w"), ctx.param("recon.b")));
    }
    return recon;
}

// Mean squared reconstruction error across all timesteps of one patch.
inline Tensor ae_loss_graph(TapeCtx& ctx, const AutoencoderConfig& cfg, const float* patch) {
    Tensor emb = ae_embed_graph(ctx, cfg, patch);
    std::vector<Tensor> recon = ae_decode_graph(ctx, cfg, emb);
    const std::size_t tb = static_cast<std::size_t>(cfg.bands) * cfg.patch * cfg.patch;
    Tensor total;
    for (int t = 0; t < cfg.timesteps; ++t) {
        std::vector<float> target(patch + t * tb, patch + (t + 1) * tb);
        Tensor l = mse_loss(recon[t], target);
        total = t == 0 ? l : add(total, l);
    }
    return scale(total, 1.0f / static_cast<float>(cfg.timesteps));
}

struct PretrainResult {
    std::vector<double> loss_curve;
};

inline PretrainResult pretrain_autoencoder(ParameterSet& ps, const AutoencoderConfig& cfg,
                                           const PatchSet& patches, int epochs, double lr,
                                           std::uint64_t seed, int batch = 8) {
    cfg.validate();
    if (patches.size != cfg.patch) throw ConfigError("patch set size does not match autoencoder");
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    Rng root(seed);
    std::vector<std::size_t> order(patches.patches.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    PretrainResult res;
    for (int epoch = 0; epoch < epochs; ++epoch) {
        Rng order_rng(root.substream("order", epoch).next_u64());
        order_rng.shuffle(order);
        double epoch_loss = 0.0;
        for (std::size_t ofs = 0; ofs < order.size(); ofs += batch) {
            const std::size_t lim = std::min(order.size(), ofs + static_cast<std::size_t>(batch));
            TapeCtx ctx(ps);
            for (std::size_t k = ofs; k < lim; ++k) {
                Tensor loss = ae_loss_graph(ctx, cfg, patches.patches[order[k]].data());
                const double lv = loss.item();
                if (!std::isfinite(lv)) throw NumericError("diverged: non-finite reconstruction loss");
                epoch_loss += lv;
                loss.backward();
            }
            ps.adam_step(ctx, AdamConfig{lr}, 1.0 / static_cast<double>(lim - ofs));
        }
        res.loss_curve.push_back(epoch_loss / static_cast<double>(order.size()));
    }
    return res;
}

inline std::vector<float> embed(ParameterSet& ps, const AutoencoderConfig& cfg, const float* patch) {
    TapeCtx ctx(ps);
    Tensor e = ae_embed_graph(ctx, cfg, patch);
    return {e.data(), e.data() + e.size()};
}

// Row-major [n, d] embedding matrix for a whole patch set.
inline std::vector<float> embed_all(ParameterSet& ps, const AutoencoderConfig& cfg,
                                    const PatchSet& patches) {
    std::vector<float> out;
    out.reserve(patches.patches.size() * cfg.embed_dim);
    for (const auto& p : patches.patches) {
        std::vector<float> e = embed(ps, cfg, p.data());
        out.insert(out.end(), e.begin(), e.end());
    }
    return out;
}

// ---------------------------------------------------------------------------
// K-means (k-means++ seeding, Lloyd iterations to an assignment fixpoint)
// ---------------------------------------------------------------------------

struct KMeansResult {
    std::vector<float> centroids;  // [k, d]
    std::vector<int> assignment;   // [n]
    int iterations = 0;
};

namespace detail {

inline double sqdist(const float* a, const float* b, int d) {
    double acc = 0.0;
    for (int m = 0; m < d; ++m) {
        const double diff = static_cast<double>(a[m]) - b[m];
        acc += diff * diff;
    }
    return acc;
}

}  // namespace detail

inline KMeansResult kmeans(const std::vector<float>& points, std::size_t n, int d, int k,
                           std::uint64_t seed, int max_iters = 1000) {
    if (k < 1) throw ConfigError("kmeans: k must be positive");
    if (points.size() != n * static_cast<std::size_t>(d)) throw InputError("kmeans: size mismatch");
    {
        std::set<std::vector<float>> distinct;
        for (std::size_t i = 0; i < n && distinct.size() < static_cast<std::size_t>(k); ++i)
            distinct.insert({points.begin() + i * d, points.begin() + (i + 1) * d});
        if (distinct.size() < static_cast<std::size_t>(k))
            throw InputError("kmeans: fewer than K distinct points");
    }

    Rng rng(seed);
    std::vector<float> cent(static_cast<std::size_t>(k) * d);
    std::vector<double> best_d2(n, std::numeric_limits<double>::infinity());
    {
        const std::size_t first = rng.below(n);
        std::copy(points.begin() + first * d, points.begin() + (first + 1) * d, cent.begin());
        for (int c = 1; c < k; ++c) {
            double total = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const double d2 = detail::sqdist(points.data() + i * d, cent.data() + (c - 1) * d, d);
                best_d2[i] = std::min(best_d2[i], d2);
                total += best_d2[i];
            }
            double target = rng.uniform() * total;
            std::size_t pick = n - 1;
            for (std::size_t i = 0; i < n; ++i) {
                target -= best_d2[i];
                if (target <= 0.0) {
                    pick = i;
                    break;
                }
            }
            std::copy(points.begin() + pick * d, points.begin() + (pick + 1) * d,
                      cent.begin() + static_cast<std::size_t>(c) * d);
        }
    }

    KMeansResult res;
    res.assignment.assign(n, -1);
    for (int it = 0; it < max_iters; ++it) {
        bool changed = false;
        for (std::size_t i = 0; i < n; ++i) {
            int arg = 0;
            double best = detail::sqdist(points.data() + i * d, cent.data(), d);
            for (int c = 1; c < k; ++c) {
                const double d2 = detail::sqdist(points.data() + i * d,
                                                 cent.data() + static_cast<std::size_t>(c) * d, d);
                if (d2 < best) {
                    best = d2;
                    arg = c;
                }
            }
            if (res.assignment[i] != arg) {
                res.assignment[i] = arg;
                changed = true;
            }
        }
        res.iterations = it + 1;
        if (!changed) break;

        std::vector<double> sums(static_cast<std::size_t>(k) * d, 0.0);
        std::vector<std::size_t> counts(k, 0);
        for (std::size_t i = 0; i < n; ++i) {
            const int c = res.assignment[i];
            ++counts[c];
            for (int m = 0; m < d; ++m)
                sums[static_cast<std::size_t>(c) * d + m] += points[i * d + m];
        }
        for (int c = 0; c < k; ++c) {
            if (counts[c] == 0) {
                // revive an empty cluster at the point farthest from its centroid
                std::size_t far = 0;
                double far_d2 = -1.0;
                for (std::size_t i = 0; i < n; ++i) {
                    const double d2 = detail::sqdist(
                        points.data() + i * d,
                        cent.data() + static_cast<std::size_t>(res.assignment[i]) * d, d);
                    if (d2 > far_d2) {
                        far_d2 = d2;
                        far = i;
                    }
                }
                std::copy(points.begin() + far * d, points.begin() + (far + 1) * d,
                          cent.begin() + static_cast<std::size_t>(c) * d);
                continue;
            }
            for (int m = 0; m < d; ++m)
                cent[static_cast<std::size_t>(c) * d + m] =
                    static_cast<float>(sums[static_cast<std::size_t>(c) * d + m] / counts[c]);
        }
    }
    res.centroids = std::move(cent);
    return res;
}

// ---------------------------------------------------------------------------
// Cluster model and deep embedded clustering
// ---------------------------------------------------------------------------

struct ClusterModel {
    int k = 10;
    double alpha = 1.0;
    int embed_dim = 16;
    std::vector<float> centroids;  // [k, d]
    std::vector<int> labels;       // per cluster: 1 high density, 0 low, -1 unlabeled

    void validate() const {
        if (k < 1 || embed_dim < 1 || alpha <= 0.0) throw ConfigError("invalid cluster model");
        if (centroids.size() != static_cast<std::size_t>(k) * embed_dim)
            throw InputError("cluster model: centroid size mismatch");
        for (float c : centroids)
            if (!std::isfinite(c)) throw NumericError("cluster model: non-finite centroid");
        for (int a = 0; a < k; ++a)
            for (int b = a + 1; b < k; ++b)
                if (std::equal(centroids.begin() + static_cast<std::size_t>(a) * embed_dim,
                               centroids.begin() + static_cast<std::size_t>(a + 1) * embed_dim,
                               centroids.begin() + static_cast<std::size_t>(b) * embed_dim))
                    throw InputError("cluster model: duplicate centroids");
    }

    bool fully_labeled() const {
        return !labels.empty() &&
               std::none_of(labels.begin(), labels.end(), [](int v) { return v < 0; });
    }

    void save(const std::string& json_path) const {
        namespace fs = std::filesystem;
        const std::string blob_name = fs::path(json_path).filename().string() + ".f32le";
        nlohmann::json j;
        j["magic"] = "CASTC1";
        j["k"] = k;
        j["alpha"] = alpha;
        j["embed_dim"] = embed_dim;
        j["labels"] = labels.empty() ? std::vector<int>(k, -1) : labels;
        j["centroids_file"] = blob_name;
        std::ofstream out(json_path);
        if (!out) throw InputError("cannot write cluster model: " + json_path);
        out << j.dump(2) << "\n";
        const fs::path blob_path = fs::path(json_path).parent_path() / blob_name;
        std::ofstream blob(blob_path, std::ios::binary);
        if (!blob) throw InputError("cannot write centroid blob: " + blob_path.string());
        blob.write(reinterpret_cast<const char*>(centroids.data()),
                   static_cast<std::streamsize>(centroids.size() * sizeof(float)));
    }

    static ClusterModel load(const std::string& json_path) {
        namespace fs = std::filesystem;
        std::ifstream in(json_path);
        if (!in) throw InputError("cannot open cluster model: " + json_path);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw InputError("bad cluster model json: " + std::string(e.what()));
        }
        if (j.value("magic", "") != "CASTC1") throw InputError("not a cluster model: " + json_path);
        ClusterModel m;
        m.k = j.at("k").get<int>();
        m.alpha = j.at("alpha").get<double>();
        m.embed_dim = j.at("embed_dim").get<int>();
        m.labels = j.at("labels").get<std::vector<int>>();
        const fs::path blob_path =
            fs::path(json_path).parent_path() / j.at("centroids_file").get<std::string>();
        std::ifstream blob(blob_path, std::ios::binary);
        if (!blob) throw InputError("cannot open centroid blob: " + blob_path.string());
        m.centroids.resize(static_cast<std::size_t>(m.k) * m.embed_dim);
        blob.read(reinterpret_cast<char*>(m.centroids.data()),
                  static_cast<std::streamsize>(m.centroids.size() * sizeof(float)));
        if (blob.gcount() != static_cast<std::streamsize>(m.centroids.size() * sizeof(float)))
            throw InputError("truncated centroid blob: " + blob_path.string());
        m.validate();
        return m;
    }
};

// Student-t soft assignment; rows sum to 1.
inline std::vector<double> soft_assign(const std::vector<float>& emb, std::size_t n,
                                       const ClusterModel& model) {
    const int d = model.embed_dim, k = model.k;
    if (emb.size() != n * static_cast<std::size_t>(d)) throw InputError("soft_assign: size mismatch");
    const double expo = -(model.alpha + 1.0) / 2.0;
    std::vector<double> q(n * static_cast<std::size_t>(k));
    for (std::size_t i = 0; i < n; ++i) {
        double sum = 0.0;
        for (int j = 0; j < k; ++j) {
            const double d2 = detail::sqdist(emb.data() + i * d,
                                             model.centroids.data() + static_cast<std::size_t>(j) * d, d);
            const double u = std::pow(1.0 + d2 / model.alpha, expo);
            q[i * k + j] = u;
            sum += u;
        }
        for (int j = 0; j < k; ++j) q[i * k + j] /= sum;
    }
    return q;
}

// Sharpened target: p_ij = (q_ij^2 / f_j) / sum_j' (q_ij'^2 / f_j').
inline std::vector<double> target_distribution(const std::vector<double>& q, std::size_t n, int k) {
    if (q.size() != n * static_cast<std::size_t>(k)) throw InputError("target_distribution: size mismatch");
    std::vector<double> f(k, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (int j = 0; j < k; ++j) f[j] += q[i * k + j];
    for (int j = 0; j < k; ++j)
        if (f[j] == 0.0) throw NumericError("collapsed cluster");
    std::vector<double> p(q.size());
    for (std::size_t i = 0; i < n; ++i) {
        double sum = 0.0;
        for (int j = 0; j < k; ++j) {
            p[i * k + j] = q[i * k + j] * q[i * k + j] / f[j];
            sum += p[i * k + j];
        }
        for (int j = 0; j < k; ++j) p[i * k + j] /= sum;
    }
    return p;
}

inline double kl_divergence(const std::vector<double>& p, const std::vector<double>& q, std::size_t n,
                            int k) {
    if (p.size() != q.size() || p.size() != n * static_cast<std::size_t>(k))
        throw InputError("kl_divergence: size mismatch");
    double kl = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i)
        if (p[i] > 0.0) kl += p[i] * std::log(p[i] / q[i]);
    return kl / static_cast<double>(n);
}

// KL(P||Q) between the fixed target rows and the Student-t soft assignment of
// emb [N,d] against centroids [K,d], scaled by row_weight; differentiable in
// both tensors.
inline Tensor dec_kl_loss(const Tensor& emb, const Tensor& centroids, const std::vector<double>& p,
                          double alpha, double row_weight) {
    if (emb.shape().size() != 2 || centroids.shape().size() != 2 ||
        emb.shape()[1] != centroids.shape()[1])
        throw Error("dec_kl_loss: shape mismatch");
    const int n = emb.shape()[0], d = emb.shape()[1], k = centroids.shape()[0];
    if (p.size() != static_cast<std::size_t>(n) * k) throw Error("dec_kl_loss: target size mismatch");
    if (alpha <= 0.0) throw ConfigError("dec_kl_loss: alpha must be positive");

    auto tval = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n) * k);
    auto qval = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n) * k);
    auto srow = std::make_shared<std::vector<double>>(n);
    const double expo = -(alpha + 1.0) / 2.0;
    const float* pe = emb.data();
    const float* pc = centroids.data();
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
        double sum = 0.0;
        for (int j = 0; j < k; ++j) {
            const double d2 = detail::sqdist(pe + static_cast<std::size_t>(i) * d,
                                             pc + static_cast<std::size_t>(j) * d, d);
            const double t = 1.0 + d2 / alpha;
            const double u = std::pow(t, expo);
            (*tval)[static_cast<std::size_t>(i) * k + j] = t;
            (*qval)[static_cast<std::size_t>(i) * k + j] = u;
            sum += u;
        }
        (*srow)[i] = sum;
        for (int j = 0; j < k; ++j) {
            const std::size_t idx = static_cast<std::size_t>(i) * k + j;
            (*qval)[idx] /= sum;
            if (p[idx] > 0.0) loss += p[idx] * std::log(p[idx] / (*qval)[idx]);
        }
    }
    loss *= row_weight;

    auto target = std::make_shared<std::vector<double>>(p);
    Tensor out = detail::make_op(
        {1}, {emb, centroids},
        [emb, centroids, tval, qval, srow, target, alpha, row_weight, n, d, k](TensorNode& self) {
            const double g = static_cast<double>(self.grad[0]) * row_weight;
            const double coef = -(alpha + 1.0) / (2.0 * alpha);
            const float* pe = emb.data();
            const float* pc = centroids.data();
            float* ge = nullptr;
            float* gc = nullptr;
            if (emb.requires_grad()) {
                emb.node()->ensure_grad();
                ge = emb.node()->grad.data();
            }
            if (centroids.requires_grad()) {
                centroids.node()->ensure_grad();
                gc = centroids.node()->grad.data();
            }
            if (!ge && !gc) return;
            for (int i = 0; i < n; ++i) {
                for (int j = 0; j < k; ++j) {
                    const std::size_t idx = static_cast<std::size_t>(i) * k + j;
                    const double q = (*qval)[idx];
                    // d(loss)/d(u_ij) through row normalization; rows of P sum to 1
                    const double du = g * (1.0 - (*target)[idx] / q) / (*srow)[i];
                    const double u_unnorm = q * (*srow)[i];
                    const double dd2 = du * coef * u_unnorm / (*tval)[idx];
                    for (int m = 0; m < d; ++m) {
                        const double diff = static_cast<double>(pe[static_cast<std::size_t>(i) * d + m]) -
                                            pc[static_cast<std::size_t>(j) * d + m];
                        if (ge) ge[static_cast<std::size_t>(i) * d + m] +=
                            static_cast<float>(dd2 * 2.0 * diff);
                        if (gc) gc[static_cast<std::size_t>(j) * d + m] -=
                            static_cast<float>(dd2 * 2.0 * diff);
                    }
                }
            }
        });
    out.data()[0] = static_cast<float>(loss);
    out.node()->has_scalar64 = true;
    out.node()->scalar64 = loss;
    return out;
}

struct RefineResult {
    std::vector<double> kl_curve;  // epochs + 1 entries, last is post-update
};

// Centroid-only refinement over fixed embeddings.
inline RefineResult refine_centroids(const std::vector<float>& emb, std::size_t n, ClusterModel& model,
                                     int epochs, double lr) {
    model.validate();
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    ParameterSet ps(0);
    Param& cp = ps.add_zeros("centroids", {model.k, model.embed_dim});
    std::copy(model.centroids.begin(), model.centroids.end(), cp.values->begin());

    RefineResult res;
    Tensor embT = Tensor::from_values({static_cast<int>(n), model.embed_dim},
                                      std::vector<float>(emb.begin(), emb.end()));
    for (int epoch = 0; epoch <= epochs; ++epoch) {
        std::copy(cp.values->begin(), cp.values->end(), model.centroids.begin());
        std::vector<double> q = soft_assign(emb, n, model);
        std::vector<double> p = target_distribution(q, n, model.k);
        res.kl_curve.push_back(kl_divergence(p, q, n, model.k));
        if (epoch == epochs) break;
        TapeCtx ctx(ps);
        Tensor loss = dec_kl_loss(embT, ctx.param("centroids"), p, model.alpha,
                                  1.0 / static_cast<double>(n));
        loss.backward();
        ps.adam_step(ctx, AdamConfig{lr});
    }
    return res;
}

// Joint refinement of encoder weights and centroids on patch data.
inline RefineResult refine(ParameterSet& ps, const AutoencoderConfig& cfg, ClusterModel& model,
                           const PatchSet& patches, int epochs, double lr) {
    cfg.validate();
    model.validate();
    if (model.embed_dim != cfg.embed_dim) throw ConfigError("refine: embedding dim mismatch");
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    const std::size_t n = patches.patches.size();
    if (n == 0) throw InputError("refine: empty patch set");
    if (!ps.has("dec.centroids")) ps.add_zeros("dec.centroids", {model.k, model.embed_dim});
    std::copy(model.centroids.begin(), model.centroids.end(),
              ps.at("dec.centroids").values->begin());

    RefineResult res;
    for (int epoch = 0; epoch <= epochs; ++epoch) {
        std::copy(ps.at("dec.centroids").values->begin(), ps.at("dec.centroids").values->end(),
                  model.centroids.begin());
        std::vector<float> emb = embed_all(ps, cfg, patches);
        std::vector<double> q = soft_assign(emb, n, model);
        std::vector<double> p = target_distribution(q, n, model.k);
        res.kl_curve.push_back(kl_divergence(p, q, n, model.k));
        if (epoch == epochs) break;

        TapeCtx ctx(ps);
        Tensor cent = ctx.param("dec.centroids");
        for (std::size_t i = 0; i < n; ++i) {
            Tensor e = ae_embed_graph(ctx, cfg, patches.patches[i].data());
            std::vector<double> prow(p.begin() + i * model.k, p.begin() + (i + 1) * model.k);
            Tensor loss = dec_kl_loss(e, cent, prow, model.alpha, 1.0 / static_cast<double>(n));
            loss.backward();
        }
        ps.adam_step(ctx, AdamConfig{lr});
    }
    return res;
}

// ---------------------------------------------------------------------------
// Cluster labeling and per-plantation density scoring
// ---------------------------------------------------------------------------

inline void label_clusters(ClusterModel& model, const std::vector<int>& explicit_labels) {
    if (static_cast<int>(explicit_labels.size()) != model.k)
        throw InputError("unlabeled cluster: mapping must cover all clusters");
    for (int v : explicit_labels)
        if (v != 0 && v != 1) throw InputError("unlabeled cluster: labels must be high (1) or low (0)");
    model.labels = explicit_labels;
}

// Majority vote of per-cell truth (1 high, 0 low, -1 ignored) per cluster.
inline void label_clusters_by_truth(ClusterModel& model, const std::vector<int>& cell_cluster,
                                    const std::vector<int>& cell_truth) {
    if (cell_cluster.size() != cell_truth.size())
        throw InputError("label_clusters_by_truth: size mismatch");
    std::vector<long long> high(model.k, 0), low(model.k, 0);
    for (std::size_t i = 0; i < cell_cluster.size(); ++i) {
        const int c = cell_cluster[i];
        if (c < 0 || c >= model.k) throw InputError("label_clusters_by_truth: cluster out of range");
        if (cell_truth[i] == 1) ++high[c];
        else if (cell_truth[i] == 0) ++low[c];
    }
    model.labels.assign(model.k, -1);
    for (int c = 0; c < model.k; ++c) {
        if (high[c] + low[c] == 0) throw InputError("unlabeled cluster: no cells in cluster " + std::to_string(c));
        model.labels[c] = high[c] >= low[c] ? 1 : 0;
    }
}

struct ComponentScore {
    int component = -1;
    long long n_high = 0;
    long long n_all = 0;
    double score = 0.0;
    bool high = false;
};

struct DensityScoreMap {
    int height = 0, width = 0;
    int cell = 32;
    std::vector<float> score;        // per pixel; nodata where not cashew
    std::vector<std::uint8_t> grade; // 1 high, 0 low, 255 not cashew
    std::vector<ComponentScore> components;
    float nodata = -9999.0f;
};

// Per-component Eq.-style fraction of high-density grid cells. A cell counts
// toward a component when at least a quarter of the cell's pixels belong to
// it; score >= 0.5 grades the component high (threshold closed).
inline DensityScoreMap density_score(const LabelMask& map, const std::vector<std::uint8_t>& cell_high,
                                     int cell = 32) {
    map.validate();
    if (cell < 1) throw ConfigError("density_score: cell must be positive");
    const int h = map.height, w = map.width;
    const int gh = (h + cell - 1) / cell, gw = (w + cell - 1) / cell;
    if (cell_high.size() != static_cast<std::size_t>(gh) * gw)
        throw InputError("density_score: cell grid size mismatch");

    ComponentLabels comps = connected_components(h, w, 8, [&](int y, int x) {
        return map.codes[static_cast<std::size_t>(y) * w + x] == kCashew;
    });

    std::vector<long long> cell_pixels(static_cast<std::size_t>(gh) * gw, 0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) ++cell_pixels[static_cast<std::size_t>(y / cell) * gw + x / cell];

    // overlap pixel counts per (component, cell)
    std::vector<std::map<int, long long>> overlap(comps.count);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int c = comps.label[static_cast<std::size_t>(y) * w + x];
            if (c < 0) continue;
            ++overlap[c][(y / cell) * gw + x / cell];
        }

    DensityScoreMap out;
    out.height = h;
    out.width = w;
    out.cell = cell;
    out.score.assign(static_cast<std::size_t>(h) * w, out.nodata);
    out.grade.assign(static_cast<std::size_t>(h) * w, kNoData);
    out.components.reserve(comps.count);
    for (int c = 0; c < comps.count; ++c) {
        ComponentScore cs;
        cs.component = c;
        for (const auto& [cellIdx, cnt] : overlap[c]) {
            if (4 * cnt < cell_pixels[cellIdx]) continue;
            ++cs.n_all;
            if (cell_high[cellIdx]) ++cs.n_high;
        }
        if (cs.n_all == 0)
            throw InputError("density_score: component with zero counted patches");
        cs.score = static_cast<double>(cs.n_high) / static_cast<double>(cs.n_all);
        cs.high = 2 * cs.n_high >= cs.n_all;
        out.components.push_back(cs);
    }
    for (std::size_t i = 0; i < out.score.size(); ++i) {
        const int c = comps.label[i];
        if (c < 0) continue;
        out.score[i] = static_cast<float>(out.components[c].score);
        out.grade[i] = out.components[c].high ? 1 : 0;
    }
    return out;
}

inline RasterStack density_to_raster(const DensityScoreMap& dm) {
    RasterStack rs;
    rs.timesteps = 1;
    rs.bands = 2;
    rs.height = dm.height;
    rs.width = dm.width;
    rs.nodata = dm.nodata;
    rs.values.reserve(2 * dm.score.size());
    rs.values.insert(rs.values.end(), dm.score.begin(), dm.score.end());
    for (std::uint8_t g : dm.grade)
        rs.values.push_back(g == kNoData ? dm.nodata : static_cast<float>(g));
    rs.band_names = {"density_score", "density_grade"};
    return rs;
}

}  // namespace cashewmap
