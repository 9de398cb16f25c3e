#pragma once

// Greedy and beam-search decoding over a trained Seq2SeqTransformer. The
// decoder is re-run over the whole hypothesis at every step.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "dpt/data.hpp"
#include "dpt/model.hpp"

namespace dpt {

struct Hypothesis {
  std::vector<int> tokens;  // generated tokens, EOS included when emitted
  double log_prob = 0.0;
  bool finished = false;

  double normalized() const { return tokens.empty() ? 0.0 : log_prob / static_cast<double>(tokens.size()); }
  // Tokens with the trailing EOS removed.
  std::vector<int> output() const {
    std::vector<int> out = tokens;
    if (!out.empty() && out.back() == kEos) out.pop_back();
    return out;
  }
};

namespace detail {

inline std::vector<double> log_softmax_row(std::span<const double> row) {
  const double top = *std::max_element(row.begin(), row.end());
  double z = 0.0;
  for (double v : row) z += std::exp(v - top);
  const double lz = std::log(z) + top;
  std::vector<double> out(row.size());
  for (std::size_t i = 0; i < row.size(); ++i) out[i] = row[i] - lz;
  return out;
}

// Encoded memory of one example repeated `copies` times.
inline Seq2SeqTransformer::Encoded replicate(const Seq2SeqTransformer::Encoded& enc, std::size_t copies) {
  Seq2SeqTransformer::Encoded out;
  out.memory = copies == 1 ? enc.memory : concat_rows(std::vector<Tensor>(copies, enc.memory));
  out.lengths.assign(copies, enc.lengths.front());
  return out;
}

// Next-token log-probabilities for each prefix, given one example's memory.
inline std::vector<std::vector<double>> next_log_probs(const Seq2SeqTransformer& model,
                                                       const Seq2SeqTransformer::Encoded& enc,
                                                       const std::vector<std::vector<int>>& prefixes,
                                                       const AttentionPlan& plan, const ForwardContext& ctx) {
  std::vector<std::vector<int>> inputs;
  inputs.reserve(prefixes.size());
  for (const auto& p : prefixes) {
    std::vector<int> in{kBos};
    in.insert(in.end(), p.begin(), p.end());
    inputs.push_back(std::move(in));
  }
  Tensor logits = model.decode(replicate(enc, prefixes.size()), inputs, plan, ctx);
  const std::size_t v = logits.cols();
  std::vector<std::vector<double>> out;
  std::size_t row = 0;
  for (const auto& in : inputs) {
    row += in.size();
    out.push_back(log_softmax_row(logits.data().subspan((row - 1) * v, v)));
  }
  return out;
}

inline void check_decode_args(const Seq2SeqTransformer& model, std::size_t max_len) {
  if (max_len == 0) throw ConfigError("decoding needs max_len >= 1");
  if (max_len + 1 > static_cast<std::size_t>(model.config().max_seq_len))
    throw ConfigError("decode max_len exceeds the model's max_seq_len");
}

}  // namespace detail

inline Hypothesis greedy_decode(const Seq2SeqTransformer& model, const SequencePair& src, const AttentionPlan& plan,
                                std::size_t max_len) {
  detail::check_decode_args(model, max_len);
  NoGradScope no_grad;
  ForwardContext ctx;
  const auto enc = model.encode({src}, plan, ctx);
  Hypothesis h;
  while (h.tokens.size() < max_len) {
    const auto lp = detail::next_log_probs(model, enc, {h.tokens}, plan, ctx).front();
    const auto best = static_cast<int>(std::max_element(lp.begin(), lp.end()) - lp.begin());
    h.tokens.push_back(best);
    h.log_prob += lp[static_cast<std::size_t>(best)];
    if (best == kEos) {
      h.finished = true;
      break;
    }
  }
  return h;
}

// Beam search ranked by cumulative log-probability during expansion; the
// returned hypothesis maximizes log-probability divided by length among
// finished hypotheses and those cut off at max_len.
inline Hypothesis beam_decode(const Seq2SeqTransformer& model, const SequencePair& src, const AttentionPlan& plan,
                              std::size_t beam, std::size_t max_len) {
  if (beam == 0) throw ConfigError("beam size must be >= 1");
  detail::check_decode_args(model, max_len);
  NoGradScope no_grad;
  ForwardContext ctx;
  const auto enc = model.encode({src}, plan, ctx);
  std::vector<Hypothesis> alive{Hypothesis{}};
  std::vector<Hypothesis> done;
  for (std::size_t step = 0; step < max_len && !alive.empty() && done.size() < beam; ++step) {
    std::vector<std::vector<int>> prefixes;
    for (const auto& h : alive) prefixes.push_back(h.tokens);
    const auto lps = detail::next_log_probs(model, enc, prefixes, plan, ctx);
    struct Candidate {
      double score;
      std::size_t parent;
      int token;
    };
    std::vector<Candidate> cands;
    for (std::size_t i = 0; i < alive.size(); ++i)
      for (std::size_t t = 0; t < lps[i].size(); ++t) cands.push_back({alive[i].log_prob + lps[i][t], i, static_cast<int>(t)});
    // Stable order: score descending, then parent, then token id.
    std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
    std::vector<Hypothesis> next;
    for (const auto& c : cands) {
      if (next.size() + done.size() >= beam) break;
      Hypothesis h = alive[c.parent];
      h.tokens.push_back(c.token);
      h.log_prob = c.score;
      if (c.token == kEos) {
        h.finished = true;
        done.push_back(std::move(h));
      } else {
        next.push_back(std::move(h));
      }
    }
    alive = std::move(next);
  }
  for (auto& h : alive) done.push_back(std::move(h));
  return *std::max_element(done.begin(), done.end(), [](const Hypothesis& a, const Hypothesis& b) {
    return a.normalized() < b.normalized();
  });
}

inline Hypothesis decode_sequence(const Seq2SeqTransformer& model, const SequencePair& src, const AttentionPlan& plan,
                                  std::size_t beam, std::size_t max_len) {
  return beam == 1 ? greedy_decode(model, src, plan, max_len) : beam_decode(model, src, plan, beam, max_len);
}

// Total log-probability of `tokens` (EOS included if present) under teacher
// forcing.
inline double sequence_log_prob(const Seq2SeqTransformer& model, const SequencePair& src, const std::vector<int>& tokens,
                                const AttentionPlan& plan) {
  if (tokens.empty()) return 0.0;
  NoGradScope no_grad;
  ForwardContext ctx;
  SequencePair pair = src;
  pair.decoder_input = {kBos};
  pair.decoder_input.insert(pair.decoder_input.end(), tokens.begin(), tokens.end() - 1);
  Tensor logits = model.forward({pair}, plan, ctx);
  const std::size_t v = logits.cols();
  double total = 0.0;
  for (std::size_t i = 0; i < tokens.size(); ++i)
    total += detail::log_softmax_row(logits.data().subspan(i * v, v))[static_cast<std::size_t>(tokens[i])];
  return total;
}

}  // namespace dpt
