#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "spnmt/common.hpp"

namespace spnmt {

// Token id layout shared by every task: three reserved ids followed by the
// task's content alphabet.
constexpr int kPadId = 0;
constexpr int kBosId = 1;
constexpr int kEosId = 2;
constexpr int kFirstContentId = 3;

enum class TaskKind { copy, reverse, dict_map };

inline std::string to_string(TaskKind k) {
    switch (k) {
        case TaskKind::copy: return "copy";
        case TaskKind::reverse: return "reverse";
        case TaskKind::dict_map: return "dict_map";
    }
    return "?";
}

inline TaskKind task_kind_from(const std::string& s) {
    if (s == "copy") return TaskKind::copy;
    if (s == "reverse") return TaskKind::reverse;
    if (s == "dict_map") return TaskKind::dict_map;
    throw ConfigError("unknown task kind '" + s + "' (copy|reverse|dict_map)");
}

// Deterministic synthetic translation task. vocab_size counts content tokens;
// the model vocabulary additionally holds PAD/BOS/EOS.
struct SyntheticTask {
    TaskKind kind = TaskKind::dict_map;
    int vocab_size = 64;
    int len_min = 3;
    int len_max = 20;
    Real noise_prob = 0;
    int corpus_size = 20000;
    std::uint64_t seed = 1;

    int model_vocab() const { return vocab_size + kFirstContentId; }

    void validate() const {
        if (vocab_size < 2) throw ConfigError("task vocab_size must be at least 2");
        if (len_min < 1 || len_max < len_min)
            throw ConfigError("task length range must satisfy 1 <= len_min <= len_max");
        if (noise_prob < 0 || noise_prob >= 1)
            throw ConfigError("task noise_prob must lie in [0,1)");
        if (corpus_size < 1) throw ConfigError("task corpus_size must be positive");
    }
};

struct SentencePair {
    std::vector<int> src;
    std::vector<int> tgt;
};

using Corpus = std::vector<SentencePair>;

// The seeded source-to-target bijection used by dict_map.
inline std::vector<int> dict_permutation(const SyntheticTask& t) {
    std::vector<int> perm(static_cast<std::size_t>(t.vocab_size));
    std::iota(perm.begin(), perm.end(), 0);
    std::mt19937_64 rng(derive_seed(t.seed, "dict-permutation"));
    std::shuffle(perm.begin(), perm.end(), rng);
    return perm;
}

inline Corpus generate_corpus(const SyntheticTask& t, int size = -1,
                              std::uint64_t seed_override = 0, bool use_override = false) {
    t.validate();
    const int n = size < 0 ? t.corpus_size : size;
    const std::uint64_t seed = use_override ? seed_override : t.seed;
    std::mt19937_64 rng(derive_seed(seed, "corpus"));
    std::uniform_int_distribution<int> len_d(t.len_min, t.len_max);
    std::uniform_int_distribution<int> tok_d(0, t.vocab_size - 1);
    std::uniform_real_distribution<Real> coin(0, 1);
    const std::vector<int> perm = dict_permutation(t);

    Corpus corpus;
    corpus.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        SentencePair p;
        const int len = len_d(rng);
        p.src.resize(static_cast<std::size_t>(len));
        for (int& s : p.src) s = kFirstContentId + tok_d(rng);
        switch (t.kind) {
            case TaskKind::copy: p.tgt = p.src; break;
            case TaskKind::reverse:
                p.tgt.assign(p.src.rbegin(), p.src.rend());
                break;
            case TaskKind::dict_map:
                p.tgt.resize(p.src.size());
                for (std::size_t j = 0; j < p.src.size(); ++j)
                    p.tgt[j] = kFirstContentId + perm[static_cast<std::size_t>(p.src[j] - kFirstContentId)];
                break;
        }
        if (t.noise_prob > 0)
            for (int& y : p.tgt)
                if (coin(rng) < t.noise_prob) y = kFirstContentId + tok_d(rng);
        corpus.push_back(std::move(p));
    }
    return corpus;
}

// ---------------------------------------------------------------------------
// Padded mini-batch. Target rows are teacher-forcing pairs: tgt_in starts
// with BOS, tgt_out ends with EOS, both of length tgt_lens[n] = |tgt| + 1.
struct Batch {
    int n = 0;
    int src_max = 0;
    int tgt_max = 0;
    std::vector<int> src;        // [n, src_max]
    std::vector<int> tgt_in;     // [n, tgt_max]
    std::vector<int> tgt_out;    // [n, tgt_max]
    std::vector<int> src_lens;   // [n]
    std::vector<int> tgt_lens;   // [n], counts content + EOS
    std::vector<std::uint8_t> tgt_pad;  // [n, tgt_max], 1 = real position
    std::vector<int> example_ids;

    long total_tgt_tokens() const {
        long s = 0;
        for (int l : tgt_lens) s += l;
        return s;
    }
};

inline Batch make_batch(const Corpus& corpus, const std::vector<int>& idx) {
    if (idx.empty()) throw InputError("make_batch: empty index list");
    Batch b;
    b.n = static_cast<int>(idx.size());
    for (int i : idx) {
        const auto& p = corpus[static_cast<std::size_t>(i)];
        if (p.tgt.empty()) throw InputError("make_batch: sentence with empty target");
        b.src_max = std::max(b.src_max, static_cast<int>(p.src.size()));
        b.tgt_max = std::max(b.tgt_max, static_cast<int>(p.tgt.size()) + 1);
    }
    b.src.assign(static_cast<std::size_t>(b.n) * b.src_max, kPadId);
    b.tgt_in.assign(static_cast<std::size_t>(b.n) * b.tgt_max, kPadId);
    b.tgt_out.assign(static_cast<std::size_t>(b.n) * b.tgt_max, kPadId);
    b.tgt_pad.assign(static_cast<std::size_t>(b.n) * b.tgt_max, 0);
    b.src_lens.resize(static_cast<std::size_t>(b.n));
    b.tgt_lens.resize(static_cast<std::size_t>(b.n));
    b.example_ids.assign(idx.begin(), idx.end());
    for (int r = 0; r < b.n; ++r) {
        const auto& p = corpus[static_cast<std::size_t>(idx[static_cast<std::size_t>(r)])];
        b.src_lens[static_cast<std::size_t>(r)] = static_cast<int>(p.src.size());
        b.tgt_lens[static_cast<std::size_t>(r)] = static_cast<int>(p.tgt.size()) + 1;
        for (std::size_t j = 0; j < p.src.size(); ++j)
            b.src[static_cast<std::size_t>(r) * b.src_max + j] = p.src[j];
        b.tgt_in[static_cast<std::size_t>(r) * b.tgt_max] = kBosId;
        for (std::size_t j = 0; j < p.tgt.size(); ++j) {
            b.tgt_in[static_cast<std::size_t>(r) * b.tgt_max + j + 1] = p.tgt[j];
            b.tgt_out[static_cast<std::size_t>(r) * b.tgt_max + j] = p.tgt[j];
        }
        b.tgt_out[static_cast<std::size_t>(r) * b.tgt_max + p.tgt.size()] = kEosId;
        for (int j = 0; j < b.tgt_lens[static_cast<std::size_t>(r)]; ++j)
            b.tgt_pad[static_cast<std::size_t>(r) * b.tgt_max + static_cast<std::size_t>(j)] = 1;
    }
    return b;
}

// ---------------------------------------------------------------------------
// Equal-population length bucketing over target lengths. When the requested
// bucket count exceeds the number of distinct lengths the surplus collapses.
struct BucketPlan {
    int requested = 1;
    int effective = 1;
    std::vector<int> upper;                 // ascending inclusive cutoffs, one per bucket
    std::vector<int> bucket_of;             // example -> bucket index
    std::vector<std::vector<int>> members;  // bucket -> example ids

    int bucket_for_length(int len) const {
        auto it = std::lower_bound(upper.begin(), upper.end(), len);
        return static_cast<int>(it == upper.end() ? upper.size() - 1 : static_cast<std::size_t>(it - upper.begin()));
    }
};

inline BucketPlan make_bucket_plan(const Corpus& corpus, int num_buckets, bool quiet = false) {
    if (corpus.empty()) throw InputError("make_bucket_plan: empty corpus");
    if (num_buckets < 1) throw ConfigError("bucket count must be positive");
    std::vector<int> lens;
    lens.reserve(corpus.size());
    for (const auto& p : corpus) lens.push_back(static_cast<int>(p.tgt.size()) + 1);
    std::vector<int> sorted = lens;
    std::sort(sorted.begin(), sorted.end());

    BucketPlan plan;
    plan.requested = num_buckets;
    const long n = static_cast<long>(sorted.size());
    for (int b = 1; b <= num_buckets; ++b) {
        const long pos = std::min(n - 1, n * b / num_buckets - (n * b % num_buckets == 0 ? 1 : 0));
        plan.upper.push_back(sorted[static_cast<std::size_t>(std::max(0L, pos))]);
    }
    plan.upper.back() = sorted.back();
    plan.upper.erase(std::unique(plan.upper.begin(), plan.upper.end()), plan.upper.end());
    plan.effective = static_cast<int>(plan.upper.size());
    if (plan.effective < plan.requested && !quiet)
        std::cerr << "[spnmt] note: " << plan.requested << " buckets requested but only "
                  << plan.effective << " distinct quantile cutoffs exist; buckets collapsed\n";

    plan.members.resize(static_cast<std::size_t>(plan.effective));
    plan.bucket_of.resize(corpus.size());
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        const int b = plan.bucket_for_length(lens[i]);
        plan.bucket_of[i] = b;
        plan.members[static_cast<std::size_t>(b)].push_back(static_cast<int>(i));
    }
    return plan;
}

// ---------------------------------------------------------------------------
// Epoch-shuffled bucket batching under a target-token budget. Each epoch
// shuffles every bucket, chunks it greedily, then shuffles the chunk order,
// so every example appears exactly once per epoch and batches never mix
// buckets.
class BatchIterator {
  public:
    BatchIterator(const Corpus& corpus, const BucketPlan& plan, long batch_tokens,
                  std::uint64_t seed)
        : corpus_(&corpus), plan_(&plan), batch_tokens_(batch_tokens),
          rng_(derive_seed(seed, "batch-iterator")) {
        int longest = 0;
        for (const auto& p : corpus) longest = std::max(longest, static_cast<int>(p.tgt.size()) + 1);
        if (batch_tokens_ < longest)
            throw ConfigError("batch_tokens " + std::to_string(batch_tokens_) +
                              " is smaller than the longest target sentence (" +
                              std::to_string(longest) + ")");
    }

    Batch next() {
        if (cursor_ >= epoch_.size()) build_epoch();
        return make_batch(*corpus_, epoch_[cursor_++]);
    }

    // One full epoch of index batches, for coverage tests.
    std::vector<std::vector<int>> peek_epoch() {
        build_epoch();
        std::vector<std::vector<int>> out = epoch_;
        cursor_ = epoch_.size();  // force a fresh epoch on the next call
        return out;
    }

  private:
    void build_epoch() {
        epoch_.clear();
        cursor_ = 0;
        for (const auto& bucket : plan_->members) {
            std::vector<int> ids = bucket;
            std::shuffle(ids.begin(), ids.end(), rng_);
            std::vector<int> cur;
            long tokens = 0;
            for (int id : ids) {
                const long need = static_cast<long>(corpus_->at(static_cast<std::size_t>(id)).tgt.size()) + 1;
                if (!cur.empty() && tokens + need > batch_tokens_) {
                    epoch_.push_back(std::move(cur));
                    cur = {};
                    tokens = 0;
                }
                cur.push_back(id);
                tokens += need;
            }
            if (!cur.empty()) epoch_.push_back(std::move(cur));
        }
        std::shuffle(epoch_.begin(), epoch_.end(), rng_);
    }

    const Corpus* corpus_;
    const BucketPlan* plan_;
    long batch_tokens_;
    std::mt19937_64 rng_;
    std::vector<std::vector<int>> epoch_;
    std::size_t cursor_ = 0;
};

// ---------------------------------------------------------------------------
// Corpus files: a commented header with the generating configuration, then
// one pair per line as space-delimited ids separated by a tab.

inline void save_corpus(std::ostream& os, const Corpus& corpus, const SyntheticTask& t) {
    os << "# spnmt-corpus v1\n";
    os << "# kind=" << to_string(t.kind) << " vocab_size=" << t.vocab_size
       << " len_min=" << t.len_min << " len_max=" << t.len_max << " noise_prob=" << t.noise_prob
       << " corpus_size=" << t.corpus_size << " seed=" << t.seed << "\n";
    os << "# format: src token ids <TAB> tgt token ids\n";
    for (const auto& p : corpus) {
        for (std::size_t i = 0; i < p.src.size(); ++i) os << (i ? " " : "") << p.src[i];
        os << '\t';
        for (std::size_t i = 0; i < p.tgt.size(); ++i) os << (i ? " " : "") << p.tgt[i];
        os << '\n';
    }
}

inline void save_corpus(const std::string& path, const Corpus& corpus, const SyntheticTask& t) {
    std::ofstream f(path);
    if (!f) throw ConfigError("cannot open corpus file for writing: " + path);
    save_corpus(f, corpus, t);
}

inline Corpus load_corpus(std::istream& is) {
    Corpus corpus;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos)
            throw InputError("corpus line without tab separator: " + line);
        SentencePair p;
        std::istringstream src(line.substr(0, tab)), tgt(line.substr(tab + 1));
        for (int v; src >> v;) p.src.push_back(v);
        for (int v; tgt >> v;) p.tgt.push_back(v);
        if (p.src.empty() || p.tgt.empty())
            throw InputError("corpus line with empty side: " + line);
        corpus.push_back(std::move(p));
    }
    return corpus;
}

inline Corpus load_corpus(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open corpus file: " + path);
    return load_corpus(f);
}

}  // namespace spnmt
