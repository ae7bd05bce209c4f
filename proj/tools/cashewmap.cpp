// Command-line front end binding the pipeline stages end to end.
//
// Every subcommand is a pure function of (input files, config, seed): outputs
// are byte-identical across reruns, and each artifact gets a provenance
// sidecar recording the command, config hash, seed, and input hashes.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cashewmap/core.hpp"

namespace fs = std::filesystem;
using namespace cashewmap;

namespace {

// Shared state resolved after parsing: optional config file plus global seed.
struct App {
    std::string config_path;
    std::uint64_t seed = 1;
    bool seed_set = false;
    Config cfg;

    void resolve() {
        if (!config_path.empty()) {
            if (!fs::exists(config_path)) throw InputError("missing input: " + config_path);
            cfg = Config::parse_file(config_path);
        }
        if (!seed_set) seed = static_cast<std::uint64_t>(cfg.get_int("seed", 1));
    }

    // Per-stage seed so each stage is independently reproducible.
    std::uint64_t stage_seed(std::string_view stage) const {
        return Rng(seed).substream(stage).next_u64();
    }
};

void require_file(const std::string& path) {
    if (!fs::exists(path)) throw InputError("missing input: " + path);
}

void ensure_parent(const std::string& path) {
    const fs::path parent = fs::path(path).parent_path();
    if (!parent.empty()) fs::create_directories(parent);
}

Provenance make_provenance(const App& app, const std::string& command,
                           const std::vector<std::string>& inputs) {
    Provenance prov(command, app.seed);
    prov.set_config(app.cfg);
    for (const auto& p : inputs) prov.add_input(p);
    return prov;
}

void write_curve_csv(const std::string& path, const std::vector<double>& values) {
    ensure_parent(path);
    std::ofstream out(path);
    if (!out) throw InputError("cannot write curve: " + path);
    out << "epoch,value\n";
    char buf[64];
    for (std::size_t i = 0; i < values.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%.17g", values[i]);
        out << i << ',' << buf << '\n';
    }
    if (!out) throw InputError("short write on curve: " + path);
}

void write_json(const std::string& path, const nlohmann::json& j) {
    ensure_parent(path);
    std::ofstream out(path);
    if (!out) throw InputError("cannot write: " + path);
    out << j.dump(2) << "\n";
    if (!out) throw InputError("short write: " + path);
}

// Config lookup with CLI override: a flag that was typed wins, then the
// config file, then the built-in default already stored in `value`.
template <typename T>
T resolved(const CLI::Option* opt, T flag_value, const Config& cfg, const std::string& key) {
    if (opt->count() > 0) return flag_value;
    if constexpr (std::is_same_v<T, std::string>) {
        return cfg.get(key, flag_value);
    } else if constexpr (std::is_floating_point_v<T>) {
        return static_cast<T>(cfg.get_f64(key, static_cast<double>(flag_value)));
    } else {
        return static_cast<T>(cfg.get_int(key, static_cast<long long>(flag_value)));
    }
}

std::vector<int> parse_int_list(const std::string& text, const std::string& what) {
    std::vector<int> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t pos = 0;
            out.push_back(std::stoi(item, &pos));
            if (pos != item.size()) throw std::invalid_argument("trailing");
        } catch (const std::exception&) {
            throw ConfigError(what + ": not an integer list: " + text);
        }
    }
    if (out.empty()) throw ConfigError(what + ": empty list");
    return out;
}

// ---------------------------------------------------------------------------
// synth: deterministic synthetic scene (image + labels + density truth)
// ---------------------------------------------------------------------------

struct SynthArgs {
    std::string out;
    int height = 256, width = 256, timesteps = 7;
    double w_mixed = 0.25, w_cashew = 0.35, w_builtup = 0.10, w_cropland = 0.30;
    double density_high_fraction = 0.5;
    CLI::Option *o_h = nullptr, *o_w = nullptr, *o_t = nullptr;
    CLI::Option *o_wm = nullptr, *o_wc = nullptr, *o_wb = nullptr, *o_wo = nullptr, *o_df = nullptr;
};

int cmd_synth(App& app, const SynthArgs& a) {
    SynthConfig sc;
    sc.height = resolved(a.o_h, a.height, app.cfg, "synth.height");
    sc.width = resolved(a.o_w, a.width, app.cfg, "synth.width");
    sc.timesteps = resolved(a.o_t, a.timesteps, app.cfg, "synth.timesteps");
    sc.w_mixed = resolved(a.o_wm, a.w_mixed, app.cfg, "synth.w_mixed");
    sc.w_cashew = resolved(a.o_wc, a.w_cashew, app.cfg, "synth.w_cashew");
    sc.w_builtup = resolved(a.o_wb, a.w_builtup, app.cfg, "synth.w_builtup");
    sc.w_cropland = resolved(a.o_wo, a.w_cropland, app.cfg, "synth.w_cropland");
    sc.density_high_fraction = resolved(a.o_df, a.density_high_fraction, app.cfg, "synth.density_high_fraction");
    sc.crown_spacing_high = app.cfg.get_f64("synth.crown_spacing_high", sc.crown_spacing_high);
    sc.crown_spacing_low = app.cfg.get_f64("synth.crown_spacing_low", sc.crown_spacing_low);
    sc.noise_sd = app.cfg.get_f64("synth.noise_sd", sc.noise_sd);
    sc.field_bumps = static_cast<int>(app.cfg.get_int("synth.field_bumps", sc.field_bumps));

    const std::uint64_t seed = app.stage_seed("synth");
    SynthScene scene = synth_scene(sc, seed);
    fs::create_directories(a.out);

    const std::string image = (fs::path(a.out) / "image.rstk").string();
    const std::string labels = (fs::path(a.out) / "labels.rstk").string();
    const std::string density = (fs::path(a.out) / "density.rstk").string();
    write_rstk(image, scene.stack);
    write_rstk(labels, scene.labels);
    write_rstk(density, scene.density_truth);

    Provenance prov = make_provenance(app, "synth", {});
    prov.add_note("stage_seed", seed);
    prov.add_note("scene", {{"height", sc.height},
                            {"width", sc.width},
                            {"timesteps", sc.timesteps},
                            {"crowns", scene.crown_centers.size()}});
    prov.write(image);
    prov.write(labels);
    prov.write(density);
    std::cout << "wrote " << image << ", " << labels << ", " << density << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// normalize: per-band percentile stretch of a raster stack
// ---------------------------------------------------------------------------

struct NormalizeArgs {
    std::string image, out, params;
};

int cmd_normalize(App& app, const NormalizeArgs& a) {
    require_file(a.image);
    RasterStack stack = read_rstk(a.image);
    NormalizationParams params = compute_normalization(stack, fs::path(a.image).stem().string());
    RasterStack norm = normalize(stack, params);
    ensure_parent(a.out);
    write_rstk(a.out, norm);

    const std::string params_path = a.params.empty() ? a.out + ".norm.json" : a.params;
    write_json(params_path, params.to_json());

    Provenance prov = make_provenance(app, "normalize", {a.image});
    prov.add_note("normalization", params.to_json());
    prov.write(a.out);
    prov.write(params_path);
    std::cout << "wrote " << a.out << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// train-stca: supervised segmentation training
// ---------------------------------------------------------------------------

struct TrainStcaArgs {
    std::string image, labels, out, curve;
    std::string mode = "multi_temporal";
    int depth = 5, base_channels = 8, patch = 64, stride = 0, epochs = 30, batch = 8, patience = 5;
    double dropout = 0.3, lr = 1e-3, val_fraction = 0.2;
    CLI::Option *o_mode = nullptr, *o_depth = nullptr, *o_bc = nullptr, *o_patch = nullptr,
                *o_stride = nullptr, *o_epochs = nullptr, *o_batch = nullptr, *o_patience = nullptr,
                *o_dropout = nullptr, *o_lr = nullptr, *o_val = nullptr;
};

int cmd_train_stca(App& app, const TrainStcaArgs& a) {
    require_file(a.image);
    require_file(a.labels);
    RasterStack stack = read_rstk(a.image);
    LabelMask labels = read_rstk_mask(a.labels);

    STCAConfig cfg;
    cfg.mode = mode_from_name(resolved(a.o_mode, a.mode, app.cfg, "stca.mode"));
    cfg.depth = resolved(a.o_depth, a.depth, app.cfg, "stca.depth");
    cfg.base_channels = resolved(a.o_bc, a.base_channels, app.cfg, "stca.base_channels");
    cfg.patch = resolved(a.o_patch, a.patch, app.cfg, "stca.patch");
    cfg.dropout_p = resolved(a.o_dropout, a.dropout, app.cfg, "stca.dropout");
    cfg.timesteps = stack.timesteps;
    cfg.bands = stack.bands;
    cfg.mc_runs = static_cast<int>(app.cfg.get_int("stca.mc_runs", cfg.mc_runs));

    TrainConfig tc;
    tc.epochs = resolved(a.o_epochs, a.epochs, app.cfg, "stca.epochs");
    tc.batch = resolved(a.o_batch, a.batch, app.cfg, "stca.batch");
    tc.patience = resolved(a.o_patience, a.patience, app.cfg, "stca.patience");
    tc.lr = resolved(a.o_lr, a.lr, app.cfg, "stca.lr");
    tc.val_fraction = resolved(a.o_val, a.val_fraction, app.cfg, "stca.val_fraction");
    tc.seed = app.stage_seed("train-stca");

    int stride = resolved(a.o_stride, a.stride, app.cfg, "stca.stride");
    if (stride <= 0) stride = cfg.patch;
    PatchSet patches = tile_patches(stack, &labels, cfg.patch, stride);

    ParameterSet ps = build_model(cfg, app.stage_seed("stca-init"));
    TrainResult res = stca_train(ps, cfg, patches, tc);
    for (const auto& w : res.warnings) std::cerr << "warning: " << w << "\n";

    ensure_parent(a.out);
    ps.save(a.out);
    const std::string curve = a.curve.empty() ? a.out + ".loss.csv" : a.curve;
    write_curve_csv(curve, res.loss_curve);

    Provenance prov = make_provenance(app, "train-stca", {a.image, a.labels});
    prov.add_note("model", cfg.to_json());
    prov.add_note("training", {{"epochs", tc.epochs},
                               {"lr", tc.lr},
                               {"batch", tc.batch},
                               {"patches", patches.patches.size()},
                               {"best_epoch", res.best_epoch},
                               {"best_loss", res.best_loss}});
    prov.add_note("model_id", hex64(ps.content_hash()));
    prov.write(a.out);
    prov.write(curve);
    std::cout << "wrote " << a.out << " (best epoch " << res.best_epoch << ", eval loss "
              << res.best_loss << ")\n";
    return 0;
}

// ---------------------------------------------------------------------------
// infer: tiled Monte Carlo inference producing a probability field raster
// ---------------------------------------------------------------------------

struct InferArgs {
    std::string image, model, out;
    int runs = 10, stride = 0;
    CLI::Option *o_runs = nullptr, *o_stride = nullptr;
};

int cmd_infer(App& app, const InferArgs& a) {
    require_file(a.image);
    require_file(a.model);
    RasterStack stack = read_rstk(a.image);
    ParameterSet ps = ParameterSet::load(a.model);
    if (!ps.meta().contains("model")) throw InputError("checkpoint has no model config: " + a.model);
    STCAConfig cfg = STCAConfig::from_json(ps.meta()["model"]);

    const int runs = resolved(a.o_runs, a.runs, app.cfg, "infer.runs");
    const int stride = resolved(a.o_stride, a.stride, app.cfg, "infer.stride");
    const std::uint64_t seed = app.stage_seed("infer");

    ProbabilityField field = infer_scene(ps, cfg, stack, runs, seed, stride);
    ensure_parent(a.out);
    write_rstk(a.out, field_to_raster(field));

    Provenance prov = make_provenance(app, "infer", {a.image, a.model});
    prov.add_note("model_id", field.model_id);
    prov.add_note("runs", runs);
    prov.add_note("stage_seed", seed);
    prov.write(a.out);
    std::cout << "wrote " << a.out << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// grow: region growing + class assembly + optional masks and filters
// ---------------------------------------------------------------------------

struct GrowArgs {
    std::string probs, out, builtup;
    double seed_threshold = 0.8, neighbor_low = 0.4, unc_threshold = -1.0;
    int connectivity = 8;
    CLI::Option *o_seed = nullptr, *o_low = nullptr, *o_conn = nullptr, *o_unc = nullptr;
};

int cmd_grow(App& app, const GrowArgs& a) {
    require_file(a.probs);
    ProbabilityField field = field_from_raster(read_rstk(a.probs));

    GrowThresholds th;
    th.seed_threshold = resolved(a.o_seed, a.seed_threshold, app.cfg, "grow.seed_threshold");
    th.neighbor_low = resolved(a.o_low, a.neighbor_low, app.cfg, "grow.neighbor_low");
    th.connectivity = resolved(a.o_conn, a.connectivity, app.cfg, "grow.connectivity");
    const double unc_threshold = resolved(a.o_unc, a.unc_threshold, app.cfg, "grow.unc_threshold");

    ClassMap map = assemble_classmap(field, th);
    if (!a.builtup.empty()) {
        require_file(a.builtup);
        map = apply_external_mask(map, read_rstk_mask(a.builtup));
    }
    if (unc_threshold >= 0.0) map = uncertainty_filter(map, field.unc, unc_threshold);

    ensure_parent(a.out);
    write_rstk(a.out, map.mask);

    std::vector<std::string> inputs = {a.probs};
    if (!a.builtup.empty()) inputs.push_back(a.builtup);
    Provenance prov = make_provenance(app, "grow", inputs);
    prov.add_note("operations", map.provenance);
    prov.write(a.out);
    std::cout << "wrote " << a.out << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// train-castc: autoencoder pretraining + K-means + cluster refinement
// ---------------------------------------------------------------------------

// Grid cells share the density-score convention: a cell participates when at
// least a quarter of its pixels are cashew. Patches anchor at the cell origin,
// shifted inward at the borders so every patch is full size.
struct CellPatches {
    int cell = 32, grid_h = 0, grid_w = 0;
    std::vector<int> cell_index;  // grid index per selected cell
    PatchSet patches;
};

CellPatches collect_cashew_cells(const RasterStack& stack, const LabelMask& map, int cell) {
    if (map.height != stack.height || map.width != stack.width)
        throw InputError("class map extent does not match image");
    if (stack.height < cell || stack.width < cell)
        throw InputError("image smaller than density cell size");
    CellPatches out;
    out.cell = cell;
    out.grid_h = (stack.height + cell - 1) / cell;
    out.grid_w = (stack.width + cell - 1) / cell;
    out.patches.size = cell;
    out.patches.stride = cell;
    out.patches.timesteps = stack.timesteps;
    out.patches.bands = stack.bands;

    for (int gy = 0; gy < out.grid_h; ++gy)
        for (int gx = 0; gx < out.grid_w; ++gx) {
            const int y1 = std::min(stack.height, (gy + 1) * cell);
            const int x1 = std::min(stack.width, (gx + 1) * cell);
            long long cashew = 0, pixels = 0;
            for (int y = gy * cell; y < y1; ++y)
                for (int x = gx * cell; x < x1; ++x) {
                    ++pixels;
                    if (map.at(y, x) == kCashew) ++cashew;
                }
            if (4 * cashew < pixels) continue;
            const int oy = std::min(gy * cell, stack.height - cell);
            const int ox = std::min(gx * cell, stack.width - cell);
            std::vector<float> patch(static_cast<std::size_t>(stack.timesteps) * stack.bands * cell * cell);
            std::size_t k = 0;
            for (int t = 0; t < stack.timesteps; ++t)
                for (int b = 0; b < stack.bands; ++b)
                    for (int y = 0; y < cell; ++y) {
                        const float* src = &stack.values[stack.index(t, b, oy + y, ox)];
                        std::copy(src, src + cell, patch.begin() + static_cast<std::ptrdiff_t>(k));
                        k += static_cast<std::size_t>(cell);
                    }
            out.cell_index.push_back(gy * out.grid_w + gx);
            out.patches.origins.emplace_back(oy, ox);
            out.patches.patches.push_back(std::move(patch));
        }
    return out;
}

struct TrainCastcArgs {
    std::string image, map, truth, out, ckpt;
    int k = 10, embed_dim = 16, cell = 32, depth = 5, base_channels = 8;
    int pre_epochs = 5, epochs = 10, batch = 8;
    double alpha = 1.0, lr = 1e-3;
    std::string labels;  // explicit per-cluster 0/1 list
    CLI::Option *o_k = nullptr, *o_dim = nullptr, *o_cell = nullptr, *o_depth = nullptr,
                *o_bc = nullptr, *o_pre = nullptr, *o_epochs = nullptr, *o_batch = nullptr,
                *o_alpha = nullptr, *o_lr = nullptr;
};

int cmd_train_castc(App& app, const TrainCastcArgs& a) {
    require_file(a.image);
    require_file(a.map);
    RasterStack stack = read_rstk(a.image);
    LabelMask map = read_rstk_mask(a.map);

    AutoencoderConfig cfg;
    cfg.depth = resolved(a.o_depth, a.depth, app.cfg, "castc.depth");
    cfg.base_channels = resolved(a.o_bc, a.base_channels, app.cfg, "castc.base_channels");
    cfg.embed_dim = resolved(a.o_dim, a.embed_dim, app.cfg, "castc.embed_dim");
    cfg.patch = resolved(a.o_cell, a.cell, app.cfg, "castc.cell");
    cfg.timesteps = stack.timesteps;
    cfg.bands = stack.bands;

    const int k = resolved(a.o_k, a.k, app.cfg, "castc.k");
    const double alpha = resolved(a.o_alpha, a.alpha, app.cfg, "castc.alpha");
    const double lr = resolved(a.o_lr, a.lr, app.cfg, "castc.lr");
    const int pre_epochs = resolved(a.o_pre, a.pre_epochs, app.cfg, "castc.pre_epochs");
    const int epochs = resolved(a.o_epochs, a.epochs, app.cfg, "castc.epochs");
    const int batch = resolved(a.o_batch, a.batch, app.cfg, "castc.batch");

    CellPatches cells = collect_cashew_cells(stack, map, cfg.patch);
    const std::size_t n = cells.patches.patches.size();
    if (n == 0) throw InputError("train-castc: no cashew cells in map");

    ParameterSet ps = build_autoencoder(cfg, app.stage_seed("castc-init"));
    PretrainResult pre;
    if (pre_epochs > 0)
        pre = pretrain_autoencoder(ps, cfg, cells.patches, pre_epochs, lr,
                                   app.stage_seed("castc-pretrain"), batch);

    std::vector<float> emb = embed_all(ps, cfg, cells.patches);
    KMeansResult km = kmeans(emb, n, cfg.embed_dim, k, app.stage_seed("castc-kmeans"));

    ClusterModel model;
    model.k = k;
    model.alpha = alpha;
    model.embed_dim = cfg.embed_dim;
    model.centroids = km.centroids;
    model.validate();

    RefineResult ref;
    if (epochs > 0) ref = refine(ps, cfg, model, cells.patches, epochs, lr);

    // Hard assignments after refinement drive the cluster labeling.
    emb = embed_all(ps, cfg, cells.patches);
    std::vector<double> q = soft_assign(emb, n, model);
    std::vector<int> cell_cluster(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        int arg = 0;
        for (int j = 1; j < k; ++j)
            if (q[i * k + j] > q[i * k + arg]) arg = j;
        cell_cluster[i] = arg;
    }

    const std::string labels_text = a.labels.empty() ? app.cfg.get("castc.labels", "") : a.labels;
    if (!a.truth.empty()) {
        require_file(a.truth);
        LabelMask truth = read_rstk_mask(a.truth);
        if (truth.height != map.height || truth.width != map.width)
            throw InputError("density truth extent does not match map");
        // Majority of in-cell truth pixels (1 high, 0 low); cells without
        // truth stay ignored.
        std::vector<int> cell_truth(n, -1);
        for (std::size_t i = 0; i < n; ++i) {
            const int gy = cells.cell_index[i] / cells.grid_w;
            const int gx = cells.cell_index[i] % cells.grid_w;
            const int y1 = std::min(truth.height, (gy + 1) * cells.cell);
            const int x1 = std::min(truth.width, (gx + 1) * cells.cell);
            long long high = 0, low = 0;
            for (int y = gy * cells.cell; y < y1; ++y)
                for (int x = gx * cells.cell; x < x1; ++x) {
                    if (truth.at(y, x) == 1) ++high;
                    else if (truth.at(y, x) == 0) ++low;
                }
            if (high + low > 0) cell_truth[i] = high >= low ? 1 : 0;
        }
        label_clusters_by_truth(model, cell_cluster, cell_truth);
    } else if (!labels_text.empty()) {
        label_clusters(model, parse_int_list(labels_text, "castc.labels"));
    }

    ensure_parent(a.out);
    model.save(a.out);
    const std::string ckpt = a.ckpt.empty() ? a.out + ".ckpt" : a.ckpt;
    ps.save(ckpt);
    const std::string kl_csv = a.out + ".kl.csv";
    write_curve_csv(kl_csv, ref.kl_curve);
    const std::string ae_csv = a.out + ".ae.csv";
    write_curve_csv(ae_csv, pre.loss_curve);

    std::vector<std::string> inputs = {a.image, a.map};
    if (!a.truth.empty()) inputs.push_back(a.truth);
    Provenance prov = make_provenance(app, "train-castc", inputs);
    prov.add_note("autoencoder", cfg.to_json());
    prov.add_note("clusters", {{"k", k},
                               {"alpha", alpha},
                               {"cells", n},
                               {"kmeans_iterations", km.iterations},
                               {"labels", model.labels}});
    prov.add_note("model_id", hex64(ps.content_hash()));
    prov.write(a.out);
    prov.write(ckpt);
    prov.write(kl_csv);
    prov.write(ae_csv);
    std::cout << "wrote " << a.out << " (" << n << " cells, k=" << k << ")\n";
    return 0;
}

// ---------------------------------------------------------------------------
// density: per-plantation density scoring from a labeled cluster model
// ---------------------------------------------------------------------------

struct DensityArgs {
    std::string image, map, model, ckpt, out;
};

int cmd_density(App& app, const DensityArgs& a) {
    require_file(a.image);
    require_file(a.map);
    require_file(a.model);
    require_file(a.ckpt);
    RasterStack stack = read_rstk(a.image);
    LabelMask map = read_rstk_mask(a.map);
    ClusterModel model = ClusterModel::load(a.model);
    if (!model.fully_labeled())
        throw InputError("unlabeled cluster model: " + a.model);
    ParameterSet ps = ParameterSet::load(a.ckpt);
    if (!ps.meta().contains("autoencoder"))
        throw InputError("checkpoint has no autoencoder config: " + a.ckpt);
    AutoencoderConfig cfg = AutoencoderConfig::from_json(ps.meta()["autoencoder"]);
    if (cfg.embed_dim != model.embed_dim)
        throw InputError("cluster model embedding dim does not match checkpoint");

    CellPatches cells = collect_cashew_cells(stack, map, cfg.patch);
    const std::size_t n = cells.patches.patches.size();
    std::vector<std::uint8_t> cell_high(static_cast<std::size_t>(cells.grid_h) * cells.grid_w, 0);
    if (n > 0) {
        std::vector<float> emb = embed_all(ps, cfg, cells.patches);
        std::vector<double> q = soft_assign(emb, n, model);
        for (std::size_t i = 0; i < n; ++i) {
            int arg = 0;
            for (int j = 1; j < model.k; ++j)
                if (q[i * static_cast<std::size_t>(model.k) + j] >
                    q[i * static_cast<std::size_t>(model.k) + arg])
                    arg = j;
            cell_high[static_cast<std::size_t>(cells.cell_index[i])] =
                model.labels[arg] == 1 ? 1 : 0;
        }
    }

    DensityScoreMap dm = density_score(map, cell_high, cfg.patch);
    ensure_parent(a.out);
    write_rstk(a.out, density_to_raster(dm));

    nlohmann::json comps = nlohmann::json::array();
    for (const auto& c : dm.components)
        comps.push_back({{"component", c.component},
                         {"n_high", c.n_high},
                         {"n_all", c.n_all},
                         {"score", c.score},
                         {"high", c.high}});
    Provenance prov = make_provenance(app, "density", {a.image, a.map, a.model, a.ckpt});
    prov.add_note("cell", cfg.patch);
    prov.add_note("components", comps);
    prov.write(a.out);
    std::cout << "wrote " << a.out << " (" << dm.components.size() << " components)\n";
    return 0;
}

// ---------------------------------------------------------------------------
// sample: two-phase stratified design over a pair of epoch maps
// ---------------------------------------------------------------------------

struct SampleArgs {
    std::string map_early, map_late, truth, out, design;
    int clusters = 120, cluster_grid = 32;
    std::string allocation;
    CLI::Option *o_clusters = nullptr, *o_grid = nullptr, *o_alloc = nullptr;
};

int cmd_sample(App& app, const SampleArgs& a) {
    require_file(a.map_early);
    require_file(a.map_late);
    LabelMask early = read_rstk_mask(a.map_early);
    LabelMask late = read_rstk_mask(a.map_late);

    StratifiedDesign design;
    design.n_clusters = resolved(a.o_clusters, a.clusters, app.cfg, "sample.clusters");
    design.cluster_grid = resolved(a.o_grid, a.cluster_grid, app.cfg, "sample.cluster_grid");
    const std::string alloc = resolved(a.o_alloc, a.allocation, app.cfg, "sample.allocation");
    if (!alloc.empty()) {
        design.allocation = parse_int_list(alloc, "sample.allocation");
        if (design.allocation.size() != design.strata.size())
            throw ConfigError("sample.allocation: expected " + std::to_string(design.strata.size()) +
                              " entries");
    }

    const std::uint64_t seed = app.stage_seed("sample");
    std::vector<SamplePoint> points = draw_design(early, late, design, seed);

    for (auto& p : points) p.predicted = late.at(p.row, p.col);
    if (!a.truth.empty()) {
        require_file(a.truth);
        LabelMask truth = read_rstk_mask(a.truth);
        if (truth.height != late.height || truth.width != late.width)
            throw InputError("truth extent does not match maps");
        for (auto& p : points) p.reference = truth.at(p.row, p.col);
    }

    ensure_parent(a.out);
    write_sample_csv(a.out, points);

    nlohmann::json dj;
    dj["magic"] = "DESIGN1";
    dj["cluster_grid"] = design.cluster_grid;
    dj["n_clusters"] = design.n_clusters;
    dj["seed"] = design.seed;
    auto& strata = dj["strata"] = nlohmann::json::array();
    for (std::size_t s = 0; s < design.strata.size(); ++s)
        strata.push_back({{"from", design.strata[s].from},
                          {"to", design.strata[s].to},
                          {"name", design.strata[s].name},
                          {"allocation", design.allocation[s]},
                          {"pixels", design.stratum_pixels[s]}});
    const std::string design_path = a.design.empty() ? a.out + ".design.json" : a.design;
    write_json(design_path, dj);

    std::vector<std::string> inputs = {a.map_early, a.map_late};
    if (!a.truth.empty()) inputs.push_back(a.truth);
    Provenance prov = make_provenance(app, "sample", inputs);
    prov.add_note("stage_seed", seed);
    prov.add_note("points", points.size());
    prov.write(a.out);
    prov.write(design_path);
    std::cout << "wrote " << a.out << " (" << points.size() << " points)\n";
    return 0;
}

// ---------------------------------------------------------------------------
// evaluate: stratified accuracy and area estimation from a sample file
// ---------------------------------------------------------------------------

struct EvaluateArgs {
    std::string samples, design, out;
    double unit_area = 1.0;
    CLI::Option* o_unit = nullptr;
};

int cmd_evaluate(App& app, const EvaluateArgs& a) {
    require_file(a.samples);
    require_file(a.design);
    std::vector<SamplePoint> points = read_sample_csv(a.samples);

    std::ifstream din(a.design);
    nlohmann::json dj = nlohmann::json::parse(din, nullptr, false);
    if (dj.is_discarded() || dj.value("magic", "") != "DESIGN1")
        throw InputError("not a sampling design: " + a.design);
    std::vector<StratumDef> strata;
    std::vector<long long> stratum_pixels;
    for (const auto& s : dj.at("strata")) {
        strata.push_back({static_cast<std::uint8_t>(s.at("from").get<int>()),
                          static_cast<std::uint8_t>(s.at("to").get<int>()),
                          s.at("name").get<std::string>()});
        stratum_pixels.push_back(s.at("pixels").get<long long>());
    }

    const double unit_area = resolved(a.o_unit, a.unit_area, app.cfg, "evaluate.unit_area");
    ConfusionMatrix cm = confusion(points, strata, stratum_pixels);
    AreaEstimate est = stratified_estimates(cm, unit_area);

    nlohmann::json report = estimate_to_json(est);
    auto& f1 = report["f1"] = nlohmann::json::object();
    for (const auto& [c, v] : f1_scores(cm)) f1[std::to_string(c)] = v;
    report["samples"] = points.size();
    auto pooled = cm.pooled();
    auto& matrix = report["pooled_confusion"] = nlohmann::json::array();
    for (int p = 0; p < kNumClasses; ++p) {
        nlohmann::json row = nlohmann::json::array();
        for (int r = 0; r < kNumClasses; ++r) row.push_back(pooled[p][r]);
        matrix.push_back(std::move(row));
    }

    write_json(a.out, report);
    Provenance prov = make_provenance(app, "evaluate", {a.samples, a.design});
    prov.write(a.out);
    std::cout << "wrote " << a.out << " (OA "
              << (est.oa.defined ? std::to_string(est.oa.value) : std::string("n/a")) << ")\n";
    return 0;
}

// ---------------------------------------------------------------------------
// report: aggregate stage reports; optional multi-year consistency
// ---------------------------------------------------------------------------

struct ReportArgs {
    std::vector<std::string> inputs;
    std::vector<std::string> maps;
    std::string points;
    std::string out;
};

int cmd_report(App& app, const ReportArgs& a) {
    nlohmann::json summary;
    auto& reports = summary["reports"] = nlohmann::json::object();
    for (const auto& path : a.inputs) {
        require_file(path);
        std::ifstream in(path);
        nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
        if (j.is_discarded()) throw InputError("not a json report: " + path);
        reports[fs::path(path).stem().string()] = std::move(j);
    }

    if (!a.maps.empty()) {
        if (a.maps.size() < 2) throw ConfigError("report: consistency needs at least two maps");
        std::vector<LabelMask> maps;
        for (const auto& m : a.maps) {
            require_file(m);
            maps.push_back(read_rstk_mask(m));
        }
        std::vector<std::pair<int, int>> pts;
        if (!a.points.empty()) {
            require_file(a.points);
            for (const auto& p : read_sample_csv(a.points)) pts.emplace_back(p.row, p.col);
        } else {
            // Default to every pixel the first map calls cashew.
            for (int y = 0; y < maps[0].height; ++y)
                for (int x = 0; x < maps[0].width; ++x)
                    if (maps[0].at(y, x) == kCashew) pts.emplace_back(y, x);
        }
        summary["temporal_consistency"] = temporal_consistency(maps, pts);
        summary["consistency_points"] = pts.size();
    }

    write_json(a.out, summary);
    std::vector<std::string> inputs = a.inputs;
    inputs.insert(inputs.end(), a.maps.begin(), a.maps.end());
    if (!a.points.empty()) inputs.push_back(a.points);
    Provenance prov = make_provenance(app, "report", inputs);
    prov.write(a.out);
    std::cout << "wrote " << a.out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app_cli{"cashew plantation mapping pipeline"};
    app_cli.require_subcommand(1);

    App app;
    app_cli.add_option("--config", app.config_path, "key=value config file");
    auto* o_seed = app_cli.add_option("--seed", app.seed, "global seed; stages derive substreams");

    SynthArgs sa;
    auto* synth = app_cli.add_subcommand("synth", "generate a synthetic scene");
    synth->add_option("--out", sa.out, "output directory")->required();
    sa.o_h = synth->add_option("--height", sa.height, "scene height");
    sa.o_w = synth->add_option("--width", sa.width, "scene width");
    sa.o_t = synth->add_option("--timesteps", sa.timesteps, "timesteps");
    sa.o_wm = synth->add_option("--w-mixed", sa.w_mixed, "mixed trees weight");
    sa.o_wc = synth->add_option("--w-cashew", sa.w_cashew, "cashew weight");
    sa.o_wb = synth->add_option("--w-builtup", sa.w_builtup, "built-up weight");
    sa.o_wo = synth->add_option("--w-cropland", sa.w_cropland, "cropland weight");
    sa.o_df = synth->add_option("--density-high-fraction", sa.density_high_fraction,
                                "fraction of cashew in the high-density regime");

    NormalizeArgs na;
    auto* norm = app_cli.add_subcommand("normalize", "percentile-normalize a raster stack");
    norm->add_option("--image", na.image, "input raster stack")->required();
    norm->add_option("--out", na.out, "output raster stack")->required();
    norm->add_option("--params", na.params, "normalization parameter json");

    TrainStcaArgs ta;
    auto* tstca = app_cli.add_subcommand("train-stca", "train the segmentation model");
    tstca->add_option("--image", ta.image, "normalized raster stack")->required();
    tstca->add_option("--labels", ta.labels, "label mask raster")->required();
    tstca->add_option("--out", ta.out, "checkpoint path")->required();
    tstca->add_option("--curve", ta.curve, "loss curve csv");
    ta.o_mode = tstca->add_option("--mode", ta.mode, "multi_temporal or mono_temporal");
    ta.o_depth = tstca->add_option("--depth", ta.depth, "encoder depth");
    ta.o_bc = tstca->add_option("--base-channels", ta.base_channels, "channels at full resolution");
    ta.o_patch = tstca->add_option("--patch", ta.patch, "training patch size");
    ta.o_stride = tstca->add_option("--stride", ta.stride, "tiling stride (default patch)");
    ta.o_epochs = tstca->add_option("--epochs", ta.epochs, "training epochs");
    ta.o_batch = tstca->add_option("--batch", ta.batch, "batch size");
    ta.o_patience = tstca->add_option("--patience", ta.patience, "early stopping patience");
    ta.o_dropout = tstca->add_option("--dropout", ta.dropout, "dropout probability");
    ta.o_lr = tstca->add_option("--lr", ta.lr, "learning rate");
    ta.o_val = tstca->add_option("--val-fraction", ta.val_fraction, "validation fraction");

    InferArgs ia;
    auto* infer = app_cli.add_subcommand("infer", "Monte Carlo inference over a scene");
    infer->add_option("--image", ia.image, "normalized raster stack")->required();
    infer->add_option("--model", ia.model, "checkpoint path")->required();
    infer->add_option("--out", ia.out, "probability field raster")->required();
    ia.o_runs = infer->add_option("--runs", ia.runs, "Monte Carlo runs");
    ia.o_stride = infer->add_option("--stride", ia.stride, "tiling stride (default patch)");

    GrowArgs ga;
    auto* grow = app_cli.add_subcommand("grow", "region growing and class assembly");
    grow->add_option("--probs", ga.probs, "probability field raster")->required();
    grow->add_option("--out", ga.out, "class map raster")->required();
    grow->add_option("--builtup", ga.builtup, "external built-up mask raster");
    ga.o_seed = grow->add_option("--seed-threshold", ga.seed_threshold, "seed probability");
    ga.o_low = grow->add_option("--neighbor-low", ga.neighbor_low, "neighbor lower bound");
    ga.o_conn = grow->add_option("--connectivity", ga.connectivity, "4 or 8");
    ga.o_unc = grow->add_option("--unc-threshold", ga.unc_threshold,
                                "mask pixels above this uncertainty (negative disables)");

    TrainCastcArgs ca;
    auto* tcastc = app_cli.add_subcommand("train-castc", "train the density clustering model");
    tcastc->add_option("--image", ca.image, "normalized raster stack")->required();
    tcastc->add_option("--map", ca.map, "class map raster")->required();
    tcastc->add_option("--truth", ca.truth, "density truth raster for cluster labeling");
    tcastc->add_option("--out", ca.out, "cluster model json")->required();
    tcastc->add_option("--ckpt", ca.ckpt, "autoencoder checkpoint (default <out>.ckpt)");
    tcastc->add_option("--labels", ca.labels, "explicit per-cluster 0/1 labels");
    ca.o_k = tcastc->add_option("--k", ca.k, "cluster count");
    ca.o_dim = tcastc->add_option("--embed-dim", ca.embed_dim, "embedding dimension");
    ca.o_cell = tcastc->add_option("--cell", ca.cell, "density grid cell size");
    ca.o_depth = tcastc->add_option("--depth", ca.depth, "autoencoder depth");
    ca.o_bc = tcastc->add_option("--base-channels", ca.base_channels, "autoencoder channels");
    ca.o_pre = tcastc->add_option("--pre-epochs", ca.pre_epochs, "autoencoder pretraining epochs");
    ca.o_epochs = tcastc->add_option("--epochs", ca.epochs, "cluster refinement epochs");
    ca.o_batch = tcastc->add_option("--batch", ca.batch, "pretraining batch size");
    ca.o_alpha = tcastc->add_option("--alpha", ca.alpha, "Student-t degrees of freedom");
    ca.o_lr = tcastc->add_option("--lr", ca.lr, "learning rate");

    DensityArgs da;
    auto* density = app_cli.add_subcommand("density", "score plantation density");
    density->add_option("--image", da.image, "normalized raster stack")->required();
    density->add_option("--map", da.map, "class map raster")->required();
    density->add_option("--model", da.model, "cluster model json")->required();
    density->add_option("--ckpt", da.ckpt, "autoencoder checkpoint")->required();
    density->add_option("--out", da.out, "density raster")->required();

    SampleArgs pa;
    auto* sample = app_cli.add_subcommand("sample", "draw a stratified sample");
    sample->add_option("--map-early", pa.map_early, "earlier epoch class map")->required();
    sample->add_option("--map-late", pa.map_late, "later epoch class map")->required();
    sample->add_option("--truth", pa.truth, "reference label raster");
    sample->add_option("--out", pa.out, "sample csv")->required();
    sample->add_option("--design", pa.design, "design json (default <out>.design.json)");
    pa.o_clusters = sample->add_option("--clusters", pa.clusters, "first-phase cluster count");
    pa.o_grid = sample->add_option("--cluster-grid", pa.cluster_grid, "cluster cell size");
    pa.o_alloc = sample->add_option("--allocation", pa.allocation, "per-stratum sample counts");

    EvaluateArgs ea;
    auto* evaluate = app_cli.add_subcommand("evaluate", "stratified accuracy and area estimates");
    evaluate->add_option("--samples", ea.samples, "sample csv with reference labels")->required();
    evaluate->add_option("--design", ea.design, "design json from sample")->required();
    evaluate->add_option("--out", ea.out, "report json")->required();
    ea.o_unit = evaluate->add_option("--unit-area", ea.unit_area, "area of one pixel");

    ReportArgs ra;
    auto* report = app_cli.add_subcommand("report", "aggregate stage reports");
    report->add_option("inputs", ra.inputs, "json reports to merge");
    report->add_option("--map", ra.maps, "class map rasters for temporal consistency");
    report->add_option("--points", ra.points, "sample csv restricting consistency points");
    report->add_option("--out", ra.out, "summary json")->required();

    try {
        app_cli.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app_cli.exit(e);
    } catch (const CLI::ParseError& e) {
        app_cli.exit(e);
        return 2;
    }

    try {
        app.seed_set = o_seed->count() > 0;
        app.resolve();
        if (synth->parsed()) return cmd_synth(app, sa);
        if (norm->parsed()) return cmd_normalize(app, na);
        if (tstca->parsed()) return cmd_train_stca(app, ta);
        if (infer->parsed()) return cmd_infer(app, ia);
        if (grow->parsed()) return cmd_grow(app, ga);
        if (tcastc->parsed()) return cmd_train_castc(app, ca);
        if (density->parsed()) return cmd_density(app, da);
        if (sample->parsed()) return cmd_sample(app, pa);
        if (evaluate->parsed()) return cmd_evaluate(app, ea);
        if (report->parsed()) return cmd_report(app, ra);
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const InputError& e) {
        std::cerr << "input error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
