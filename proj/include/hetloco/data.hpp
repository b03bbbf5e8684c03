// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The hetloco Authors

#pragma once

#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "hetloco/error.hpp"
#include "hetloco/rng.hpp"
#include "hetloco/sparseloco.hpp"

namespace hetloco {

/// Byte-level token stream with a held-out tail.
struct Corpus {
    std::vector<std::int32_t> train;
    std::vector<std::int32_t> eval;
};

inline std::vector<std::int32_t> bytes_to_tokens(std::string_view text) {
    std::vector<std::int32_t> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) {
        ids.push_back(static_cast<std::int32_t>(c));
    }
    return ids;
}

/// The last `eval_fraction` of the stream becomes the eval split.
inline Corpus split_corpus(std::vector<std::int32_t> tokens, double eval_fraction) {
    if (!(eval_fraction > 0.0 && eval_fraction < 1.0)) {
        throw ConfigError("eval fraction must be in (0, 1)", "data.eval_fraction");
    }
    const auto n_eval = static_cast<std::size_t>(static_cast<double>(tokens.size()) * eval_fraction);
    Corpus c;
    c.eval.assign(tokens.end() - static_cast<std::ptrdiff_t>(n_eval), tokens.end());
    tokens.resize(tokens.size() - n_eval);
    c.train = std::move(tokens);
    return c;
}

inline Corpus load_corpus(const std::string& path, double eval_fraction) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw CorpusError("cannot open corpus " + path);
    }
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (text.empty()) {
        throw CorpusError("corpus " + path + " is empty");
    }
    return split_corpus(bytes_to_tokens(text), eval_fraction);
}

/// A contiguous block of the training stream.
struct Shard {
    std::size_t offset = 0;
    std::span<const std::int32_t> tokens;
};

/// Splits `tokens` into M contiguous, disjoint blocks covering the whole stream. Each block must
/// hold at least `min_len` tokens.
inline std::vector<Shard> shard_data(std::span<const std::int32_t> tokens, std::size_t m, std::size_t min_len) {
    if (m == 0) {
        throw ConfigError("replica count must be positive", "cluster.replicas");
    }
    const std::size_t base = tokens.size() / m;
    if (base < min_len) {
        throw CorpusError("corpus too small: " + std::to_string(tokens.size()) + " training tokens for " +
                          std::to_string(m) + " shards of at least " + std::to_string(min_len));
    }
    std::vector<Shard> shards(m);
    std::size_t off = 0;
    for (std::size_t i = 0; i < m; ++i) {
        const std::size_t len = i + 1 == m ? tokens.size() - off : base;
        shards[i] = {off, tokens.subspan(off, len)};
        off += len;
    }
    return shards;
}

/// Draws `batch` random windows of seq+1 tokens from a shard.
class BatchSampler {
public:
    BatchSampler(Shard shard, std::size_t batch, std::size_t seq, std::uint64_t seed, std::uint64_t stream)
        : shard_(shard), batch_(batch), seq_(seq), rng_(seed, stream) {
        if (shard_.tokens.size() < seq_ + 1) {
            throw CorpusError("shard shorter than one training window");
        }
    }

    Batch next() {
        Batch b;
        b.batch = batch_;
        b.seq = seq_;
        b.inputs.reserve(batch_ * seq_);
        b.targets.reserve(batch_ * seq_);
        const std::size_t starts = shard_.tokens.size() - seq_;
        for (std::size_t i = 0; i < batch_; ++i) {
            const std::size_t s = static_cast<std::size_t>(rng_.below(starts));
            for (std::size_t t = 0; t < seq_; ++t) {
                b.inputs.push_back(shard_.tokens[s + t]);
                b.targets.push_back(shard_.tokens[s + t + 1]);
            }
        }
        return b;
    }

private:
    Shard shard_;
    std::size_t batch_;
    std::size_t seq_;
    RngStream rng_;
};

/// Fixed eval batches of evenly spaced windows.
inline std::vector<Batch> eval_batches(std::span<const std::int32_t> tokens, std::size_t n_batches, std::size_t batch,
                                       std::size_t seq) {
    if (tokens.size() < seq + 1) {
        throw CorpusError("eval split shorter than one window");
    }
    const std::size_t windows = n_batches * batch;
    const std::size_t span = tokens.size() - seq - 1;
    std::vector<Batch> out(n_batches);
    for (std::size_t i = 0; i < windows; ++i) {
        const std::size_t s = windows > 1 ? span * i / (windows - 1) : 0;
        auto& b = out[i / batch];
        b.batch = batch;
        b.seq = seq;
        for (std::size_t t = 0; t < seq; ++t) {
            b.inputs.push_back(tokens[s + t]);
            b.targets.push_back(tokens[s + t + 1]);
        }
    }
    return out;
}

}  // namespace hetloco
