#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "spnmt/data.hpp"
#include "spnmt/graph.hpp"
#include "spnmt/instrument.hpp"

namespace spnmt {

struct ModelConfig {
    int vocab_src = 67;
    int vocab_tgt = 67;
    int d_model = 64;
    int n_heads = 4;
    int n_layers = 2;
    int d_ffn = 128;
    Real dropout_keep = 0.7;
    int max_len = 64;

    void validate() const {
        if (vocab_src < 1 || vocab_tgt < 1 || d_model < 1 || n_heads < 1 || n_layers < 1 ||
            d_ffn < 1 || max_len < 1)
            throw ConfigError("model dimensions must be positive");
        if (d_model % n_heads != 0)
            throw ConfigError("d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
                              std::to_string(n_heads) + ")");
        if (!(dropout_keep > 0) || dropout_keep > 1)
            throw ConfigError("dropout_keep must be in (0,1]");
    }

    int head_dim() const { return d_model / n_heads; }
};

// All weights of the encoder-decoder, addressable by name.
struct ModelParams {
    ModelConfig cfg;
    std::vector<Parameter> params;
    std::unordered_map<std::string, std::size_t> index;

    Parameter& get(const std::string& name) {
        auto it = index.find(name);
        if (it == index.end()) throw InputError("unknown parameter: " + name);
        return params[it->second];
    }

    void zero_grad() {
        for (auto& p : params) p.zero_grad();
    }

    long param_count() const {
        long n = 0;
        for (const auto& p : params) n += p.value.numel();
        return n;
    }

    static ModelParams init(const ModelConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        ModelParams mp;
        mp.cfg = cfg;
        std::mt19937_64 rng(derive_seed(seed, "param-init"));

        auto weight = [&](const std::string& name, int fan_in, std::vector<int> shape) {
            Tensor t(std::move(shape));
            const Real a = Real(1) / std::sqrt(static_cast<Real>(fan_in));
            std::uniform_real_distribution<Real> d(-a, a);
            for (Real& x : t.v) x = d(rng);
            mp.add(name, std::move(t));
        };
        auto vec = [&](const std::string& name, int n, Real fill) {
            Tensor t({n});
            std::fill(t.v.begin(), t.v.end(), fill);
            mp.add(name, std::move(t));
        };
        auto attention = [&](const std::string& prefix) {
            for (const char* w : {"wq", "wk", "wv", "wo"})
                weight(prefix + "." + w, cfg.d_model, {cfg.d_model, cfg.d_model});
            for (const char* b : {"bq", "bk", "bv", "bo"}) vec(prefix + "." + b, cfg.d_model, 0);
        };
        auto norm = [&](const std::string& prefix) {
            vec(prefix + ".g", cfg.d_model, 1);
            vec(prefix + ".b", cfg.d_model, 0);
        };
        auto ffn = [&](const std::string& prefix) {
            weight(prefix + ".w1", cfg.d_model, {cfg.d_model, cfg.d_ffn});
            vec(prefix + ".b1", cfg.d_ffn, 0);
            weight(prefix + ".w2", cfg.d_ffn, {cfg.d_ffn, cfg.d_model});
            vec(prefix + ".b2", cfg.d_model, 0);
        };

        weight("src_embed", cfg.d_model, {cfg.vocab_src, cfg.d_model});
        weight("tgt_embed", cfg.d_model, {cfg.vocab_tgt, cfg.d_model});
        for (int l = 0; l < cfg.n_layers; ++l) {
            const std::string e = "enc" + std::to_string(l);
            norm(e + ".ln1");
            attention(e + ".attn");
            norm(e + ".ln2");
            ffn(e + ".ffn");
        }
        norm("enc.ln_final");
        for (int l = 0; l < cfg.n_layers; ++l) {
            const std::string d = "dec" + std::to_string(l);
            norm(d + ".ln1");
            attention(d + ".self");
            norm(d + ".ln2");
            attention(d + ".cross");
            norm(d + ".ln3");
            ffn(d + ".ffn");
        }
        norm("dec.ln_final");
        weight("out_proj.w", cfg.d_model, {cfg.d_model, cfg.vocab_tgt});
        vec("out_proj.b", cfg.vocab_tgt, 0);
        return mp;
    }

  private:
    void add(const std::string& name, Tensor t) {
        index[name] = params.size();
        params.emplace_back(name, std::move(t));
    }
};

// Deterministic runs apply no dropout; stochastic runs derive every dropout
// mask from the pass seed and a per-site counter.
struct ForwardMode {
    bool stochastic = false;
    std::uint64_t seed = 0;

    static ForwardMode deterministic() { return {}; }
    static ForwardMode with_dropout(std::uint64_t seed) { return {true, seed}; }
};

namespace detail {

inline const Tensor& positional_encoding(int max_len, int d_model) {
    thread_local std::unordered_map<long, Tensor> cache;
    const long key = static_cast<long>(max_len) * 100000 + d_model;
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;
    Tensor pe({max_len, d_model});
    for (int pos = 0; pos < max_len; ++pos)
        for (int i = 0; i < d_model; i += 2) {
            const Real angle = pos * std::exp(-std::log(Real(10000)) * i / d_model);
            pe.v[static_cast<std::size_t>(pos * d_model + i)] = std::sin(angle);
            if (i + 1 < d_model) pe.v[static_cast<std::size_t>(pos * d_model + i + 1)] = std::cos(angle);
        }
    return cache.emplace(key, std::move(pe)).first->second;
}

struct DropoutCtx {
    bool training = false;
    Real keep = 1;
    std::uint64_t pass_seed = 0;
    int site = 0;

    Graph::NodeId apply(Graph& g, Graph::NodeId x) {
        const std::uint64_t s = hash_combine(pass_seed, static_cast<std::uint64_t>(site++));
        return g.dropout(x, keep, s, training);
    }
};

// Multi-head attention. q_in: [N*Jq, d]; kv_in: [N*Jk, d]; mask has one entry
// per (n, head, jq, jk).
inline Graph::NodeId mha(Graph& g, ModelParams& P, const std::string& prefix, Graph::NodeId q_in,
                         Graph::NodeId kv_in, const std::vector<std::uint8_t>& mask, int n, int jq,
                         int jk, DropoutCtx& drop) {
    const int d = P.cfg.d_model, h = P.cfg.n_heads, hd = P.cfg.head_dim();
    auto split = [&](Graph::NodeId x, int rows_j) {
        // [N*J, d] -> [N*h, J, hd]
        auto r = g.reshape(x, {n, rows_j, h, hd});
        return g.reshape(g.transpose_0213(r), {n * h, rows_j, hd});
    };
    auto q = split(g.linear(q_in, g.param(P.get(prefix + ".wq")), g.param(P.get(prefix + ".bq"))), jq);
    auto k = split(g.linear(kv_in, g.param(P.get(prefix + ".wk")), g.param(P.get(prefix + ".bk"))), jk);
    auto v = split(g.linear(kv_in, g.param(P.get(prefix + ".wv")), g.param(P.get(prefix + ".bv"))), jk);

    auto scores = g.scale(g.bmm(q, k, /*transpose_b=*/true), Real(1) / std::sqrt(static_cast<Real>(hd)));
    auto probs = drop.apply(g, g.masked_softmax(scores, mask));
    auto ctx = g.bmm(probs, v);  // [N*h, Jq, hd]
    auto merged = g.reshape(g.transpose_0213(g.reshape(ctx, {n, h, jq, hd})), {n * jq, d});
    return g.linear(merged, g.param(P.get(prefix + ".wo")), g.param(P.get(prefix + ".bo")));
}

inline Graph::NodeId ffn_block(Graph& g, ModelParams& P, const std::string& prefix, Graph::NodeId x,
                               DropoutCtx& drop) {
    auto h = g.gelu(g.linear(x, g.param(P.get(prefix + ".w1")), g.param(P.get(prefix + ".b1"))));
    h = drop.apply(g, h);
    return g.linear(h, g.param(P.get(prefix + ".w2")), g.param(P.get(prefix + ".b2")));
}

inline Graph::NodeId embed(Graph& g, ModelParams& P, const std::string& table,
                           const std::vector<int>& ids, int n, int j) {
    auto x = g.scale(g.embedding(ids, g.param(P.get(table))), std::sqrt(static_cast<Real>(P.cfg.d_model)));
    const Tensor& pe = positional_encoding(P.cfg.max_len, P.cfg.d_model);
    Tensor tiled({n * j, P.cfg.d_model});
    for (int r = 0; r < n; ++r)
        std::copy_n(pe.v.data(), static_cast<long>(j) * P.cfg.d_model,
                    tiled.v.data() + static_cast<long>(r) * j * P.cfg.d_model);
    return g.add(x, g.constant(std::move(tiled)));
}

// mask builders -------------------------------------------------------------

inline std::vector<std::uint8_t> encoder_self_mask(const Batch& b, int heads) {
    std::vector<std::uint8_t> m(static_cast<std::size_t>(b.n) * heads * b.src_max * b.src_max, 0);
    std::size_t at = 0;
    for (int n = 0; n < b.n; ++n)
        for (int h = 0; h < heads; ++h)
            for (int q = 0; q < b.src_max; ++q)
                for (int k = 0; k < b.src_max; ++k)
                    m[at++] = k < b.src_lens[static_cast<std::size_t>(n)] ? 1 : 0;
    return m;
}

// Causal-only: real queries can never reach padded keys because padding sits
// after the true length.
inline std::vector<std::uint8_t> decoder_self_mask(int n, int heads, int jt) {
    std::vector<std::uint8_t> m(static_cast<std::size_t>(n) * heads * jt * jt, 0);
    std::size_t at = 0;
    for (int i = 0; i < n * heads; ++i)
        for (int q = 0; q < jt; ++q)
            for (int k = 0; k < jt; ++k) m[at++] = k <= q ? 1 : 0;
    return m;
}

inline std::vector<std::uint8_t> cross_mask(const Batch& b, int heads, int jt) {
    std::vector<std::uint8_t> m(static_cast<std::size_t>(b.n) * heads * jt * b.src_max, 0);
    std::size_t at = 0;
    for (int n = 0; n < b.n; ++n)
        for (int h = 0; h < heads; ++h)
            for (int q = 0; q < jt; ++q)
                for (int k = 0; k < b.src_max; ++k)
                    m[at++] = k < b.src_lens[static_cast<std::size_t>(n)] ? 1 : 0;
    return m;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Encoder over padded sources. Returns [N*Js, d]. Pre-norm residual blocks
// with a closing layer norm.
inline Graph::NodeId encode(Graph& g, ModelParams& P, const Batch& b, detail::DropoutCtx& drop) {
    if (b.src_max > P.cfg.max_len)
        throw InputError("source length " + std::to_string(b.src_max) + " exceeds max_len " +
                         std::to_string(P.cfg.max_len));
    auto x = detail::embed(g, P, "src_embed", b.src, b.n, b.src_max);
    const auto mask = detail::encoder_self_mask(b, P.cfg.n_heads);
    for (int l = 0; l < P.cfg.n_layers; ++l) {
        const std::string e = "enc" + std::to_string(l);
        auto normed = g.layer_norm(x, g.param(P.get(e + ".ln1.g")), g.param(P.get(e + ".ln1.b")));
        auto a = detail::mha(g, P, e + ".attn", normed, normed, mask, b.n, b.src_max, b.src_max, drop);
        x = g.add(x, drop.apply(g, a));
        auto f = detail::ffn_block(g, P, e + ".ffn",
                                   g.layer_norm(x, g.param(P.get(e + ".ln2.g")), g.param(P.get(e + ".ln2.b"))),
                                   drop);
        x = g.add(x, drop.apply(g, f));
    }
    return g.layer_norm(x, g.param(P.get("enc.ln_final.g")), g.param(P.get("enc.ln_final.b")));
}

// Decoder over teacher-forcing inputs against a (possibly constant) encoder
// output node. Returns log-probabilities [N*Jt, V_tgt].
inline Graph::NodeId decode_logprobs(Graph& g, ModelParams& P, Graph::NodeId enc_out, const Batch& b,
                                     const std::vector<int>& tgt_in, int jt,
                                     detail::DropoutCtx& drop) {
    if (jt > P.cfg.max_len)
        throw InputError("target length " + std::to_string(jt) + " exceeds max_len " +
                         std::to_string(P.cfg.max_len));
    auto y = detail::embed(g, P, "tgt_embed", tgt_in, b.n, jt);
    const auto self_mask = detail::decoder_self_mask(b.n, P.cfg.n_heads, jt);
    const auto x_mask = detail::cross_mask(b, P.cfg.n_heads, jt);
    for (int l = 0; l < P.cfg.n_layers; ++l) {
        const std::string d = "dec" + std::to_string(l);
        auto normed = g.layer_norm(y, g.param(P.get(d + ".ln1.g")), g.param(P.get(d + ".ln1.b")));
        auto a = detail::mha(g, P, d + ".self", normed, normed, self_mask, b.n, jt, jt, drop);
        y = g.add(y, drop.apply(g, a));
        auto c = detail::mha(g, P, d + ".cross",
                             g.layer_norm(y, g.param(P.get(d + ".ln2.g")), g.param(P.get(d + ".ln2.b"))),
                             enc_out, x_mask, b.n, jt, b.src_max, drop);
        y = g.add(y, drop.apply(g, c));
        auto f = detail::ffn_block(g, P, d + ".ffn",
                                   g.layer_norm(y, g.param(P.get(d + ".ln3.g")), g.param(P.get(d + ".ln3.b"))),
                                   drop);
        y = g.add(y, drop.apply(g, f));
    }
    y = g.layer_norm(y, g.param(P.get("dec.ln_final.g")), g.param(P.get("dec.ln_final.b")));
    auto logits = g.linear(y, g.param(P.get("out_proj.w")), g.param(P.get("out_proj.b")));
    return g.log_softmax(logits);
}

// Full teacher-forced pass. Output rows are per (sentence, position)
// log-distributions over the target vocabulary.
inline Graph::NodeId forward_logprobs(Graph& g, ModelParams& P, const Batch& b, ForwardMode mode) {
    detail::DropoutCtx drop{mode.stochastic && P.cfg.dropout_keep < 1, P.cfg.dropout_keep, mode.seed, 0};
    auto enc = encode(g, P, b, drop);
    auto lp = decode_logprobs(g, P, enc, b, b.tgt_in, b.tgt_max, drop);
    instrument::counters().forwards.fetch_add(1, std::memory_order_relaxed);
    return lp;
}

// ---------------------------------------------------------------------------
// Off-graph NLL views over a computed log-probability tensor.

// [N*Jt] per-token NLL; padded positions are exactly 0.
inline std::vector<Real> token_nll(const Tensor& logprobs, const Batch& b) {
    const long v = logprobs.cols();
    std::vector<Real> out(static_cast<std::size_t>(b.n) * b.tgt_max, 0);
    for (long i = 0; i < static_cast<long>(out.size()); ++i) {
        if (!b.tgt_pad[static_cast<std::size_t>(i)]) continue;
        out[static_cast<std::size_t>(i)] =
            -logprobs.v[static_cast<std::size_t>(i * v + b.tgt_out[static_cast<std::size_t>(i)])];
    }
    return out;
}

inline std::vector<Real> sentence_nll(const Tensor& logprobs, const Batch& b) {
    const std::vector<Real> tok = token_nll(logprobs, b);
    std::vector<Real> out(static_cast<std::size_t>(b.n), 0);
    for (int n = 0; n < b.n; ++n) {
        Real s = 0;
        for (int j = 0; j < b.tgt_max; ++j) s += tok[static_cast<std::size_t>(n) * b.tgt_max + static_cast<std::size_t>(j)];
        out[static_cast<std::size_t>(n)] = s;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Greedy decoding. The encoder runs once; each step re-runs the decoder on
// the grown prefix with the encoder output as a constant.
inline std::vector<std::vector<int>> greedy_decode_batch(ModelParams& P,
                                                         const std::vector<std::vector<int>>& srcs) {
    if (srcs.empty()) return {};
    Corpus tmp;
    for (const auto& s : srcs) tmp.push_back({s, {kPadId}});  // placeholder target
    std::vector<int> idx(srcs.size());
    std::iota(idx.begin(), idx.end(), 0);
    Batch b = make_batch(tmp, idx);

    detail::DropoutCtx nodrop{};
    Tensor enc_val;
    {
        Graph g(false);
        enc_val = g.value(encode(g, P, b, nodrop));
    }
    const int n = b.n;
    std::vector<std::vector<int>> out(static_cast<std::size_t>(n));
    std::vector<int> done(static_cast<std::size_t>(n), 0);
    std::vector<int> prefix(static_cast<std::size_t>(n), kBosId);  // row-major [n, cur]
    int cur = 1;
    const int limit = P.cfg.max_len;
    while (cur <= limit) {
        Graph g(false);
        auto lp = decode_logprobs(g, P, g.constant(enc_val), b, prefix, cur, nodrop);
        const Tensor& t = g.value(lp);
        const long v = t.cols();
        bool all_done = true;
        std::vector<int> nxt(static_cast<std::size_t>(n));
        for (int r = 0; r < n; ++r) {
            const Real* row = t.v.data() + (static_cast<long>(r) * cur + (cur - 1)) * v;
            int best = 0;
            for (long c = 1; c < v; ++c)
                if (row[c] > row[best]) best = static_cast<int>(c);
            nxt[static_cast<std::size_t>(r)] = best;
            if (!done[static_cast<std::size_t>(r)]) {
                if (best == kEosId) {
                    done[static_cast<std::size_t>(r)] = 1;
                } else {
                    out[static_cast<std::size_t>(r)].push_back(best);
                    if (cur == limit) done[static_cast<std::size_t>(r)] = 1;
                }
            }
            all_done = all_done && done[static_cast<std::size_t>(r)];
        }
        if (all_done) break;
        // grow prefixes
        std::vector<int> grown(static_cast<std::size_t>(n) * (cur + 1));
        for (int r = 0; r < n; ++r) {
            std::copy_n(prefix.data() + static_cast<long>(r) * cur, cur,
                        grown.data() + static_cast<long>(r) * (cur + 1));
            grown[static_cast<std::size_t>(r) * (cur + 1) + static_cast<std::size_t>(cur)] =
                done[static_cast<std::size_t>(r)] ? kPadId : nxt[static_cast<std::size_t>(r)];
        }
        prefix = std::move(grown);
        ++cur;
    }
    instrument::counters().decodes.fetch_add(1, std::memory_order_relaxed);
    return out;
}

inline std::vector<int> greedy_decode(ModelParams& P, const std::vector<int>& src) {
    return greedy_decode_batch(P, {src}).front();
}

// ---------------------------------------------------------------------------
// Checkpoints: a plain text container with the config and hex-encoded double
// bits, so round-trips are exact.

inline void save_checkpoint(std::ostream& os, const ModelParams& mp) {
    const ModelConfig& c = mp.cfg;
    os << "spnmt-checkpoint v1\n";
    os << "config " << c.vocab_src << ' ' << c.vocab_tgt << ' ' << c.d_model << ' ' << c.n_heads
       << ' ' << c.n_layers << ' ' << c.d_ffn << ' ' << c.max_len << ' ';
    os << std::hex << std::bit_cast<std::uint64_t>(c.dropout_keep) << std::dec << '\n';
    for (const auto& p : mp.params) {
        os << "tensor " << p.name << ' ' << p.value.rank();
        for (int d : p.value.shape) os << ' ' << d;
        os << '\n' << std::hex;
        for (std::size_t i = 0; i < p.value.v.size(); ++i)
            os << std::bit_cast<std::uint64_t>(p.value.v[i]) << (i + 1 == p.value.v.size() ? '\n' : ' ');
        os << std::dec;
    }
    os << "end\n";
}

inline void save_checkpoint(const std::string& path, const ModelParams& mp) {
    std::ofstream f(path);
    if (!f) throw ConfigError("cannot open checkpoint for writing: " + path);
    save_checkpoint(f, mp);
}

inline ModelParams load_checkpoint(std::istream& is) {
    std::string line;
    if (!std::getline(is, line) || line != "spnmt-checkpoint v1")
        throw InputError("not a spnmt checkpoint (bad header)");
    ModelConfig c;
    {
        std::getline(is, line);
        std::istringstream ss(line);
        std::string tag;
        std::uint64_t keep_bits = 0;
        ss >> tag >> c.vocab_src >> c.vocab_tgt >> c.d_model >> c.n_heads >> c.n_layers >> c.d_ffn >>
            c.max_len >> std::hex >> keep_bits;
        if (tag != "config" || !ss) throw InputError("malformed checkpoint config line");
        c.dropout_keep = std::bit_cast<Real>(keep_bits);
    }
    ModelParams mp = ModelParams::init(c, 0);
    while (std::getline(is, line)) {
        if (line == "end") return mp;
        std::istringstream ss(line);
        std::string tag, name;
        int rank = 0;
        ss >> tag >> name >> rank;
        if (tag != "tensor" || !ss) throw InputError("malformed checkpoint tensor line: " + line);
        std::vector<int> shape(static_cast<std::size_t>(rank));
        for (int& d : shape) ss >> d;
        Parameter& p = mp.get(name);
        if (p.value.shape != shape)
            throw InputError("checkpoint shape mismatch for " + name);
        if (!std::getline(is, line)) throw InputError("truncated checkpoint data for " + name);
        std::istringstream data(line);
        data >> std::hex;
        for (Real& x : p.value.v) {
            std::uint64_t bits = 0;
            if (!(data >> bits)) throw InputError("truncated checkpoint values for " + name);
            x = std::bit_cast<Real>(bits);
        }
    }
    throw InputError("checkpoint missing end marker");
}

inline ModelParams load_checkpoint(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open checkpoint file: " + path);
    return load_checkpoint(f);
}

}  // namespace spnmt
