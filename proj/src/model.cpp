#include "fold2seq/model.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

#include <json.hpp>

#include "fold2seq/structio.hpp"

namespace fold2seq::model {

using nlohmann::json;
using tc::Graph;
using tc::Tensor;
using tc::Var;

namespace {

constexpr double kMaskFill = -1e30;
constexpr int kNumBlocks = 6;
constexpr int kBlockStrides[kNumBlocks] = {1, 2, 1, 2, 1, 1};

struct BlockSpec {
    int cin, cout, stride;
    bool proj;  // 1x1x1 projection shortcut (shape changes)
};

std::vector<BlockSpec> block_specs(int d) {
    const int cin[kNumBlocks] = {voxel::kChannels, d / 4, d / 2, d, d, d};
    const int cout[kNumBlocks] = {d / 4, d / 2, d, d, d, d};
    std::vector<BlockSpec> specs;
    for (int i = 0; i < kNumBlocks; ++i) {
        const int s = kBlockStrides[i];
        specs.push_back({cin[i], cout[i], s, s != 1 || cin[i] != cout[i]});
    }
    return specs;
}

std::string block_prefix(int i) { return "fold_enc.block" + std::to_string(i + 1); }

const std::vector<std::string>& encoder_layer_suffixes() {
    static const std::vector<std::string> s = {
        "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo",
        "ln1.gamma", "ln1.beta", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2", "ln2.gamma", "ln2.beta"};
    return s;
}

void check_tokens(const char* where, const std::vector<int>& tokens) {
    if (tokens.empty()) throw DataError(std::string(where) + ": empty token list");
    for (int t : tokens)
        if (t < 0 || t >= kVocab)
            throw DataError(std::string(where) + ": token id " + std::to_string(t) +
                            " out of vocabulary (0.." + std::to_string(kVocab - 1) + ")");
}

Var linear(Binder& b, Var x, const std::string& w, const std::string& bias) {
    Graph& g = b.graph();
    return g.add_rowvec(g.matmul(x, b(w)), b(bias));
}

// mask: full (rows(q) x rows(kv)) blocked-position mask, or empty for none.
Var attention(Binder& b, const std::string& p, Var q_in, Var kv_in,
              const std::vector<uint8_t>& mask, int n_heads) {
    Graph& g = b.graph();
    Var q = linear(b, q_in, p + ".wq", p + ".bq");
    Var k = linear(b, kv_in, p + ".wk", p + ".bk");
    Var v = linear(b, kv_in, p + ".wv", p + ".bv");
    const int d = g.value(q).cols(), dh = d / n_heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Var> heads;
    heads.reserve(n_heads);
    for (int h = 0; h < n_heads; ++h) {
        Var qh = g.slice_cols(q, h * dh, (h + 1) * dh);
        Var kh = g.slice_cols(k, h * dh, (h + 1) * dh);
        Var vh = g.slice_cols(v, h * dh, (h + 1) * dh);
        Var scores = g.scale(g.matmul_nt(qh, kh), inv_sqrt);
        if (!mask.empty()) scores = g.masked_fill(scores, mask, kMaskFill);
        heads.push_back(g.matmul(g.softmax_rows(scores), vh));
    }
    Var o = n_heads == 1 ? heads[0] : g.concat_cols(heads);
    return linear(b, o, p + ".wo", p + ".bo");
}

Var ffn_sublayer(Binder& b, const std::string& p, Var x) {
    Graph& g = b.graph();
    return linear(b, g.relu(linear(b, x, p + ".ffn.w1", p + ".ffn.b1")), p + ".ffn.w2",
                  p + ".ffn.b2");
}

// Post-LN encoder layer: x = LN(x + Attn(x)); x = LN(x + FFN(x)).
Var encoder_layer(Binder& b, const std::string& p, Var x, const std::vector<uint8_t>& attn_mask,
                  int n_heads) {
    Graph& g = b.graph();
    Var a = attention(b, p + ".attn", x, x, attn_mask, n_heads);
    x = g.layer_norm(g.add(x, a), b(p + ".ln1.gamma"), b(p + ".ln1.beta"));
    Var f = ffn_sublayer(b, p, x);
    return g.layer_norm(g.add(x, f), b(p + ".ln2.gamma"), b(p + ".ln2.beta"));
}

// Keys at pad positions are blocked for every query row.
std::vector<uint8_t> key_pad_to_mask(const std::vector<uint8_t>& pad, int l_q) {
    bool any = false;
    for (uint8_t m : pad) any = any || m != 0;
    if (!any) return {};
    const int l_k = static_cast<int>(pad.size());
    std::vector<uint8_t> mask(static_cast<size_t>(l_q) * l_k, 0);
    for (int q = 0; q < l_q; ++q)
        for (int k = 0; k < l_k; ++k) mask[static_cast<size_t>(q) * l_k + k] = pad[k];
    return mask;
}

Var dec_embed_tokens(Binder& b, const std::vector<int>& tokens) {
    Graph& g = b.graph();
    const int d = b.params().cfg.d;
    Var e = g.scale(g.embedding(b("dec.embed"), tokens), std::sqrt(static_cast<double>(d)));
    return g.add(e, g.constant(pe1d_table(static_cast<int>(tokens.size()), d)));
}

}  // namespace

std::vector<int> encode_sequence(const std::string& seq) {
    std::vector<int> out;
    out.reserve(seq.size());
    for (char c : seq) {
        const char* p = (c != '\0') ? std::strchr(io::kAminoAlphabet, c) : nullptr;
        if (p == nullptr)
            throw DataError(std::string("encode_sequence: non-natural amino acid '") + c + "'");
        out.push_back(static_cast<int>(p - io::kAminoAlphabet));
    }
    return out;
}

std::string decode_tokens(const std::vector<int>& tokens) {
    std::string out;
    out.reserve(tokens.size());
    for (int t : tokens) {
        if (t < 0 || t >= kVocab)
            throw DataError("decode_tokens: token id " + std::to_string(t) + " out of vocabulary");
        out.push_back(t < kPad ? io::kAminoAlphabet[t] : '#');
    }
    return out;
}

void ModelConfig::validate() const {
    if (d < 4 || d % 4 != 0)
        throw DataError("model config: d must be a positive multiple of 4, got " +
                        std::to_string(d));
    if (n_heads < 1 || d % n_heads != 0)
        throw DataError("model config: n_heads (" + std::to_string(n_heads) + ") must divide d (" +
                        std::to_string(d) + ")");
    if (n_layers < 1)
        throw DataError("model config: n_layers must be >= 1, got " + std::to_string(n_layers));
    if (n_s < 1) throw DataError("model config: n_s must be >= 1, got " + std::to_string(n_s));
    if (n_folds < 1)
        throw DataError("model config: n_folds must be >= 1, got " + std::to_string(n_folds));
    int edge = voxel::kGridN;
    for (int s : kBlockStrides) edge = (edge + 2 - 3) / s + 1;
    if (edge * edge * edge != l_f)
        throw DataError("model config: conv stride schedule maps " + std::to_string(voxel::kGridN) +
                        "^3 to " + std::to_string(edge) + "^3, expected 5^3");
}

std::string ModelConfig::to_json_string() const {
    json j{{"d", d}, {"n_layers", n_layers}, {"n_heads", n_heads}, {"n_s", n_s},
           {"n_folds", n_folds}};
    return j.dump();
}

ModelConfig ModelConfig::from_json_string(const std::string& s) {
    ModelConfig cfg;
    try {
        const json j = json::parse(s);
        cfg.d = j.at("d").get<int>();
        cfg.n_layers = j.at("n_layers").get<int>();
        cfg.n_heads = j.at("n_heads").get<int>();
        cfg.n_s = j.at("n_s").get<int>();
        cfg.n_folds = j.at("n_folds").get<int>();
    } catch (const json::exception& e) {
        throw DataError(std::string("model config: bad JSON: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

double positional_encoding_3d(int x, int y, int z, int dim, int h) {
    const int pair = dim / 2;
    const double denom = std::pow(10000.0, 2.0 * pair / h);
    if (dim % 2 == 0)
        return std::sin(x / denom) + std::sin(y / denom) + std::sin(z / denom);
    return std::cos(x / denom) + std::cos(y / denom) + std::cos(z / denom);
}

double positional_encoding_1d(int pos, int dim, int d) {
    const int pair = dim / 2;
    const double denom = std::pow(10000.0, 2.0 * pair / d);
    return dim % 2 == 0 ? std::sin(pos / denom) : std::cos(pos / denom);
}

Tensor pe3d_table(int d) {
    Tensor t({ModelConfig::l_f, d});
    for (int x = 0; x < 5; ++x)
        for (int y = 0; y < 5; ++y)
            for (int z = 0; z < 5; ++z) {
                const int row = (x * 5 + y) * 5 + z;
                for (int dim = 0; dim < d; ++dim)
                    t.at(row, dim) = positional_encoding_3d(x, y, z, dim, d);
            }
    return t;
}

Tensor pe1d_table(int len, int d) {
    Tensor t({len, d});
    for (int pos = 0; pos < len; ++pos)
        for (int dim = 0; dim < d; ++dim) t.at(pos, dim) = positional_encoding_1d(pos, dim, d);
    return t;
}

ModelParams ModelParams::init(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    ModelParams mp;
    mp.cfg = cfg;
    tc::ParamStore& st = mp.store;
    const int d = cfg.d, ff = cfg.d_ff();

    auto xavier = [&rng](std::vector<int> shape, int fan_in, int fan_out) {
        Tensor t(std::move(shape));
        const double a = std::sqrt(6.0 / (fan_in + fan_out));
        for (double& v : t.v) v = rng.uniform(-a, a);
        return t;
    };
    auto matrix = [&](const std::string& name, int rows, int cols) {
        st.add(name, xavier({rows, cols}, rows, cols));
    };
    auto bias = [&](const std::string& name, int cols) { st.add(name, Tensor({1, cols})); };
    auto norm_pair = [&](const std::string& prefix, int c) {
        st.add(prefix + ".gamma", Tensor({1, c}, 1.0));
        st.add(prefix + ".beta", Tensor({1, c}));
    };
    auto embed = [&](const std::string& name) {
        Tensor t({kVocab, d});
        const double s = 1.0 / std::sqrt(static_cast<double>(d));
        for (double& v : t.v) v = rng.normal() * s;
        st.add(name, t);
    };
    auto encoder_stack = [&](const std::string& stack) {
        for (int l = 0; l < cfg.n_layers; ++l) {
            const std::string p = stack + ".tx" + std::to_string(l);
            for (const char* a : {".attn.wq", ".attn.wk", ".attn.wv", ".attn.wo"})
                matrix(p + a, d, d);
            for (const char* a : {".attn.bq", ".attn.bk", ".attn.bv", ".attn.bo"}) bias(p + a, d);
            norm_pair(p + ".ln1", d);
            matrix(p + ".ffn.w1", d, ff);
            bias(p + ".ffn.b1", ff);
            matrix(p + ".ffn.w2", ff, d);
            bias(p + ".ffn.b2", d);
            norm_pair(p + ".ln2", d);
        }
    };

    const auto specs = block_specs(d);
    for (int i = 0; i < kNumBlocks; ++i) {
        const BlockSpec& bs = specs[i];
        const std::string p = block_prefix(i);
        st.add(p + ".conv1.w", xavier({bs.cout, bs.cin * 27}, bs.cin * 27, bs.cout * 27));
        bias(p + ".conv1.b", bs.cout);
        norm_pair(p + ".bn1", bs.cout);
        st.add(p + ".bn1.running_mean", Tensor({1, bs.cout}), false);
        st.add(p + ".bn1.running_var", Tensor({1, bs.cout}, 1.0), false);
        st.add(p + ".conv2.w", xavier({bs.cout, bs.cout * 27}, bs.cout * 27, bs.cout * 27));
        bias(p + ".conv2.b", bs.cout);
        norm_pair(p + ".bn2", bs.cout);
        st.add(p + ".bn2.running_mean", Tensor({1, bs.cout}), false);
        st.add(p + ".bn2.running_var", Tensor({1, bs.cout}, 1.0), false);
        if (bs.proj) {
            st.add(p + ".proj.w", xavier({bs.cout, bs.cin}, bs.cin, bs.cout));
            bias(p + ".proj.b", bs.cout);
        }
    }
    encoder_stack("fold_enc");

    embed("seq_enc.embed");
    encoder_stack("seq_enc");

    embed("dec.embed");
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "dec.tx" + std::to_string(l);
        for (const char* who : {".self", ".cross"}) {
            for (const char* a : {".wq", ".wk", ".wv", ".wo"}) matrix(p + who + a, d, d);
            for (const char* a : {".bq", ".bk", ".bv", ".bo"}) bias(p + who + a, d);
        }
        norm_pair(p + ".ln1", d);
        norm_pair(p + ".ln2", d);
        matrix(p + ".ffn.w1", d, ff);
        bias(p + ".ffn.b1", ff);
        matrix(p + ".ffn.w2", ff, d);
        bias(p + ".ffn.b2", d);
        norm_pair(p + ".ln3", d);
    }
    matrix("dec.out.w", d, kVocab);
    bias("dec.out.b", kVocab);

    matrix("cls.w1", d, d);
    bias("cls.b1", d);
    matrix("cls.w2", d, cfg.n_folds);
    bias("cls.b2", cfg.n_folds);
    return mp;
}

Var Binder::operator()(const std::string& name) {
    auto it = cache_.find(name);
    if (it != cache_.end()) return it->second;
    Var v = g_.param(params_.store.at(name));
    cache_.emplace(name, v);
    return v;
}

Var fold_encode(Binder& b, const voxel::VoxelGrid& grid, bool training) {
    Graph& g = b.graph();
    const ModelConfig& cfg = b.params().cfg;
    const int n = voxel::kGridN;

    Tensor x0({voxel::kChannels, n, n, n});
    for (int c = 0; c < voxel::kChannels; ++c)
        for (int x = 0; x < n; ++x)
            for (int y = 0; y < n; ++y)
                for (int z = 0; z < n; ++z)
                    x0.v[((static_cast<size_t>(c) * n + x) * n + y) * n + z] = grid.at(x, y, z, c);

    Var h = g.constant(std::move(x0));
    int edge = n;
    const auto specs = block_specs(cfg.d);
    for (int i = 0; i < kNumBlocks; ++i) {
        const BlockSpec& bs = specs[i];
        const std::string p = block_prefix(i);
        const int out_edge = (edge + 2 - 3) / bs.stride + 1;
        const int spatial = out_edge * out_edge * out_edge;
        tc::ParamStore& st = b.params().store;

        Var c1 = g.conv3d(h, b(p + ".conv1.w"), b(p + ".conv1.b"), bs.stride, 1);
        Var m = g.reshape(c1, {bs.cout, spatial});
        m = g.batch_norm(m, b(p + ".bn1.gamma"), b(p + ".bn1.beta"),
                         st.at(p + ".bn1.running_mean").value, st.at(p + ".bn1.running_var").value,
                         training);
        m = g.relu(m);
        Var c2 = g.conv3d(g.reshape(m, {bs.cout, out_edge, out_edge, out_edge}),
                          b(p + ".conv2.w"), b(p + ".conv2.b"), 1, 1);
        Var main = g.batch_norm(g.reshape(c2, {bs.cout, spatial}), b(p + ".bn2.gamma"),
                                b(p + ".bn2.beta"), st.at(p + ".bn2.running_mean").value,
                                st.at(p + ".bn2.running_var").value, training);
        Var shortcut;
        if (bs.proj) {
            Var pc = g.conv3d(h, b(p + ".proj.w"), b(p + ".proj.b"), bs.stride, 0, 1);
            shortcut = g.reshape(pc, {bs.cout, spatial});
        } else {
            shortcut = g.reshape(h, {bs.cout, spatial});
        }
        Var y = g.relu(g.add(main, shortcut));
        h = g.reshape(y, {bs.cout, out_edge, out_edge, out_edge});
        edge = out_edge;
    }

    Var flat = g.transpose(g.reshape(h, {cfg.d, edge * edge * edge}));  // (125, d)
    Var x = g.add(flat, g.constant(pe3d_table(cfg.d)));
    for (int l = 0; l < cfg.n_layers; ++l)
        x = encoder_layer(b, "fold_enc.tx" + std::to_string(l), x, {}, cfg.n_heads);
    return x;
}

Var seq_embed_tokens(Binder& b, const std::vector<int>& tokens) {
    check_tokens("seq_encode", tokens);
    Graph& g = b.graph();
    const int d = b.params().cfg.d;
    Var e = g.scale(g.embedding(b("seq_enc.embed"), tokens), std::sqrt(static_cast<double>(d)));
    return g.add(e, g.constant(pe1d_table(static_cast<int>(tokens.size()), d)));
}

Var seq_embed_soft(Binder& b, Var one_hot_rows) {
    Graph& g = b.graph();
    const ModelConfig& cfg = b.params().cfg;
    const Tensor& t = g.value(one_hot_rows);
    if (t.cols() != kVocab)
        throw DataError("seq_embed_soft: expected " + std::to_string(kVocab) + " columns, got " +
                        t.shape_str());
    Var e = g.scale(g.matmul(one_hot_rows, b("seq_enc.embed")),
                    std::sqrt(static_cast<double>(cfg.d)));
    return g.add(e, g.constant(pe1d_table(t.rows(), cfg.d)));
}

SeqLatent seq_encode_embedded(Binder& b, Var embedded, std::vector<uint8_t> pad_mask) {
    Graph& g = b.graph();
    const ModelConfig& cfg = b.params().cfg;
    const int l = g.value(embedded).rows();
    if (l > cfg.n_s)
        throw DataError("seq_encode: length " + std::to_string(l) + " exceeds n_s = " +
                        std::to_string(cfg.n_s));
    if (!pad_mask.empty() && static_cast<int>(pad_mask.size()) != l)
        throw DataError("seq_encode: pad mask size mismatch");
    const std::vector<uint8_t> mask = key_pad_to_mask(pad_mask, l);
    Var x = embedded;
    for (int layer = 0; layer < cfg.n_layers; ++layer)
        x = encoder_layer(b, "seq_enc.tx" + std::to_string(layer), x, mask, cfg.n_heads);
    return {x, std::move(pad_mask)};
}

SeqLatent seq_encode(Binder& b, const std::vector<int>& tokens) {
    std::vector<uint8_t> pad(tokens.size(), 0);
    for (size_t i = 0; i < tokens.size(); ++i) pad[i] = tokens[i] == kPad ? 1 : 0;
    return seq_encode_embedded(b, seq_embed_tokens(b, tokens), std::move(pad));
}

Var decode_logits(Binder& b, Var memory, const std::vector<uint8_t>& memory_pad_mask,
                  const std::vector<int>& prefix) {
    check_tokens("decode_logits", prefix);
    Graph& g = b.graph();
    const ModelConfig& cfg = b.params().cfg;
    const int l = static_cast<int>(prefix.size());
    if (l > cfg.n_s + 1)
        throw DataError("decode_logits: prefix length " + std::to_string(l) + " exceeds n_s + 1");
    const int l_m = g.value(memory).rows();
    if (!memory_pad_mask.empty() && static_cast<int>(memory_pad_mask.size()) != l_m)
        throw DataError("decode_logits: memory pad mask size mismatch");

    std::vector<uint8_t> causal(static_cast<size_t>(l) * l, 0);
    for (int q = 0; q < l; ++q)
        for (int k = q + 1; k < l; ++k) causal[static_cast<size_t>(q) * l + k] = 1;
    const std::vector<uint8_t> cross = key_pad_to_mask(memory_pad_mask, l);

    Var x = dec_embed_tokens(b, prefix);
    for (int layer = 0; layer < cfg.n_layers; ++layer) {
        const std::string p = "dec.tx" + std::to_string(layer);
        Var a = attention(b, p + ".self", x, x, causal, cfg.n_heads);
        x = g.layer_norm(g.add(x, a), b(p + ".ln1.gamma"), b(p + ".ln1.beta"));
        Var c = attention(b, p + ".cross", x, memory, cross, cfg.n_heads);
        x = g.layer_norm(g.add(x, c), b(p + ".ln2.gamma"), b(p + ".ln2.beta"));
        Var f = ffn_sublayer(b, p, x);
        x = g.layer_norm(g.add(x, f), b(p + ".ln3.gamma"), b(p + ".ln3.beta"));
    }
    return linear(b, x, "dec.out.w", "dec.out.b");  // (l, vocab)
}

Var classify_logits(Binder& b, Var latent, const std::vector<uint8_t>& pad_mask) {
    Graph& g = b.graph();
    const Tensor& t = g.value(latent);
    const int l = t.rows();
    if (!pad_mask.empty() && static_cast<int>(pad_mask.size()) != l)
        throw DataError("classify_fold: pad mask size mismatch");
    int kept = 0;
    for (int i = 0; i < l; ++i) kept += (pad_mask.empty() || pad_mask[i] == 0) ? 1 : 0;
    if (kept == 0) throw DataError("classify_fold: all positions padded");
    Tensor w({1, l});
    for (int i = 0; i < l; ++i)
        w.v[i] = (pad_mask.empty() || pad_mask[i] == 0) ? 1.0 / kept : 0.0;
    Var pooled = g.matmul(g.constant(std::move(w)), latent);  // (1, d)
    Var hidden = g.relu(linear(b, pooled, "cls.w1", "cls.b1"));
    return linear(b, hidden, "cls.w2", "cls.b2");  // (1, n_folds)
}

std::vector<double> classify_fold(ModelParams& params, const Tensor& latent,
                                  const std::vector<uint8_t>& pad_mask) {
    Graph g;
    Binder b(g, params);
    Var probs = g.softmax_rows(classify_logits(b, g.constant(latent), pad_mask));
    const Tensor& t = g.value(probs);
    return {t.v.begin(), t.v.end()};
}

double sequence_loglik(ModelParams& params, const Tensor& memory,
                       const std::vector<int>& tokens) {
    if (tokens.empty()) throw DataError("sequence_loglik: empty sequence");
    Graph g;
    Binder b(g, params);
    std::vector<int> prefix = {kBos};
    prefix.insert(prefix.end(), tokens.begin(), tokens.end());
    const Tensor logits = g.value(decode_logits(b, g.constant(memory), {}, prefix));

    double total = 0.0;
    for (size_t t = 0; t < tokens.size(); ++t) {
        const int r = static_cast<int>(t);
        double mx = logits.at(r, 0);
        for (int c = 1; c < kVocab; ++c) mx = std::max(mx, logits.at(r, c));
        double z = 0.0;
        for (int c = 0; c < kVocab; ++c) z += std::exp(logits.at(r, c) - mx);
        total += logits.at(r, tokens[t]) - mx - std::log(z);
    }
    return total;
}

std::vector<std::string> sequence_encoder_param_names(const ModelConfig& cfg) {
    std::vector<std::string> names{"seq_enc.embed"};
    for (int l = 0; l < cfg.n_layers; ++l)
        for (const std::string& s : encoder_layer_suffixes())
            names.push_back("seq_enc.tx" + std::to_string(l) + "." + s);
    return names;
}

}  // namespace fold2seq::model
