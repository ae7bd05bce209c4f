#pragma once

#include <string>
#include <utility>
#include <vector>

#include "cashewmap/nn_ops.hpp"
#include "cashewmap/params.hpp"

namespace cashewmap {

// Gate layout in the fused weight matrices: [input, forget, cell, output].
struct LstmWeights {
    Tensor wx;  // [in, 4*hidden]
    Tensor wh;  // [hidden, 4*hidden]
    Tensor b;   // [4*hidden]
    int hidden = 0;
};

inline void ensure_lstm(ParameterSet& ps, const std::string& prefix, int input_dim, int hidden) {
    if (ps.has(prefix + ".wx")) return;
    ps.add_weight(prefix + ".wx", {input_dim, 4 * hidden}, input_dim);
    ps.add_weight(prefix + ".wh", {hidden, 4 * hidden}, hidden);
    Param& b = ps.add_zeros(prefix + ".b", {4 * hidden});
    // forget gate bias starts at 1 so early training does not flush state
    std::fill(b.values->begin() + hidden, b.values->begin() + 2 * hidden, 1.0f);
}

inline void ensure_attention(ParameterSet& ps, const std::string& prefix, int d) {
    if (ps.has(prefix + ".w")) return;
    ps.add_weight(prefix + ".w", {d, d}, d);
    ps.add_zeros(prefix + ".b", {d});
    ps.add_weight(prefix + ".v", {d, 1}, d);
}

inline LstmWeights lstm_weights(TapeCtx& ctx, const std::string& prefix, int input_dim, int hidden) {
    ensure_lstm(ctx.params(), prefix, input_dim, hidden);
    LstmWeights w;
    w.wx = ctx.param(prefix + ".wx");
    w.wh = ctx.param(prefix + ".wh");
    w.b = ctx.param(prefix + ".b");
    w.hidden = hidden;
    return w;
}

// One step over a batch of rows: x [P,in], h and c [P,hidden].
inline std::pair<Tensor, Tensor> lstm_cell(const LstmWeights& w, const Tensor& x, const Tensor& h,
                                           const Tensor& c) {
    const int hid = w.hidden;
    Tensor z = add_bias_rows(add(matmul(x, w.wx), matmul(h, w.wh)), w.b);
    Tensor gi = sigmoid(slice_cols(z, 0, hid));
    Tensor gf = sigmoid(slice_cols(z, hid, 2 * hid));
    Tensor gg = tanh_op(slice_cols(z, 2 * hid, 3 * hid));
    Tensor go = sigmoid(slice_cols(z, 3 * hid, 4 * hid));
    Tensor cn = add(mul(gf, c), mul(gi, gg));
    Tensor hn = mul(go, tanh_op(cn));
    return {hn, cn};
}

// Hidden states for every timestep, zero initial state.
inline std::vector<Tensor> lstm_sequence(const LstmWeights& w, const std::vector<Tensor>& xs) {
    if (xs.empty()) throw Error("lstm_sequence: empty input");
    const int p = xs[0].shape()[0];
    Tensor h = Tensor::zeros({p, w.hidden});
    Tensor c = Tensor::zeros({p, w.hidden});
    std::vector<Tensor> out;
    out.reserve(xs.size());
    for (const auto& x : xs) {
        auto [hn, cn] = lstm_cell(w, x, h, c);
        h = hn;
        c = cn;
        out.push_back(h);
    }
    return out;
}

// Forward and reversed passes concatenated per timestep: [P, 2*hidden].
inline std::vector<Tensor> bilstm(TapeCtx& ctx, const std::string& prefix, const std::vector<Tensor>& xs,
                                  int hidden) {
    if (xs.empty()) throw Error("bilstm: empty input");
    const int in = xs[0].shape()[1];
    LstmWeights wf = lstm_weights(ctx, prefix + ".fwd", in, hidden);
    LstmWeights wb = lstm_weights(ctx, prefix + ".bwd", in, hidden);
    std::vector<Tensor> fwd = lstm_sequence(wf, xs);
    std::vector<Tensor> rev(xs.rbegin(), xs.rend());
    std::vector<Tensor> bwd = lstm_sequence(wb, rev);
    std::vector<Tensor> out;
    out.reserve(xs.size());
    for (std::size_t t = 0; t < xs.size(); ++t)
        out.push_back(concat_cols(fwd[t], bwd[xs.size() - 1 - t]));
    return out;
}

// Additive attention over timesteps: score_t = tanh(h_t W + b) v, weights
// softmaxed over t per row, context = sum_t w_t * h_t.
inline Tensor attention_aggregate(TapeCtx& ctx, const std::string& prefix, const std::vector<Tensor>& hs) {
    if (hs.empty()) throw Error("attention_aggregate: empty input");
    const int d = hs[0].shape()[1];
    ensure_attention(ctx.params(), prefix, d);
    Tensor w = ctx.param(prefix + ".w");
    Tensor b = ctx.param(prefix + ".b");
    Tensor v = ctx.param(prefix + ".v");

    std::vector<Tensor> scores;
    scores.reserve(hs.size());
    for (const auto& h : hs)
        scores.push_back(matmul(tanh_op(add_bias_rows(matmul(h, w), b)), v));  // [P,1]
    Tensor score_mat = scores[0];
    for (std::size_t t = 1; t < scores.size(); ++t) score_mat = concat_cols(score_mat, scores[t]);
    Tensor weights = softmax_rows(score_mat);  // [P,T]

    Tensor ctx_vec;
    for (std::size_t t = 0; t < hs.size(); ++t) {
        Tensor term = mul_colvec(hs[t], slice_cols(weights, static_cast<int>(t), static_cast<int>(t) + 1));
        ctx_vec = t == 0 ? term : add(ctx_vec, term);
    }
    return ctx_vec;
}

}  // namespace cashewmap
