#include "deeppseudo/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <unordered_map>
#include <unordered_set>

#include "deeppseudo/tensor.hpp"

namespace deeppseudo {

namespace {

using Counts = std::unordered_map<std::string, std::int64_t>;

// n-gram key: tokens joined on an unprintable separator.
std::string gram_key(const std::vector<std::string>& toks, std::size_t start, int n) {
  std::string key;
  for (int i = 0; i < n; ++i) {
    if (i) key.push_back('\x1f');
    key += toks[start + static_cast<std::size_t>(i)];
  }
  return key;
}

Counts ngram_counts(const std::vector<std::string>& toks, int n) {
  Counts c;
  if (static_cast<int>(toks.size()) >= n) {
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= toks.size(); ++i)
      ++c[gram_key(toks, i, n)];
  }
  return c;
}

void require_nonempty(const std::vector<EvalPair>& pairs, const char* what) {
  if (pairs.empty()) throw DataError(std::string(what) + ": empty evaluation corpus");
  for (const auto& p : pairs) {
    if (p.references.empty()) throw DataError(std::string(what) + ": pair without references");
  }
}

// Suffix stripper for the stem fallback pass; longest suffix first.
std::string stem(const std::string& w) {
  static const std::vector<std::string> suffixes = {"ation", "tion", "ment", "ness", "ing",
                                                    "ers",   "ies",  "ed",   "es",   "ly",
                                                    "er",    "s"};
  for (const auto& suf : suffixes) {
    if (w.size() > suf.size() + 2 && w.compare(w.size() - suf.size(), suf.size(), suf) == 0) {
      return w.substr(0, w.size() - suf.size());
    }
  }
  return w;
}

struct MeteorSentence {
  double score = 0.0;
};

double meteor_sentence(const std::vector<std::string>& cand,
                       const std::vector<std::string>& ref, double alpha, double gamma,
                       double beta) {
  const auto c = static_cast<double>(cand.size());
  const auto r = static_cast<double>(ref.size());
  if (cand.empty() || ref.empty()) return 0.0;

  // match[i] = reference position aligned to candidate position i, or -1.
  std::vector<int> match(cand.size(), -1);
  std::vector<bool> used(ref.size(), false);
  for (std::size_t i = 0; i < cand.size(); ++i) {  // exact pass
    for (std::size_t j = 0; j < ref.size(); ++j) {
      if (!used[j] && cand[i] == ref[j]) {
        match[i] = static_cast<int>(j);
        used[j] = true;
        break;
      }
    }
  }
  for (std::size_t i = 0; i < cand.size(); ++i) {  // stem pass
    if (match[i] >= 0) continue;
    const std::string cs = stem(cand[i]);
    for (std::size_t j = 0; j < ref.size(); ++j) {
      if (!used[j] && cs == stem(ref[j])) {
        match[i] = static_cast<int>(j);
        used[j] = true;
        break;
      }
    }
  }
  std::int64_t m = 0;
  for (int v : match)
    if (v >= 0) ++m;
  if (m == 0) return 0.0;

  const double p = static_cast<double>(m) / c;
  const double rr = static_cast<double>(m) / r;
  const double f = (p * rr) / (alpha * p + (1.0 - alpha) * rr);

  // Chunks: maximal runs of adjacent candidate matches mapping to adjacent
  // reference positions.
  std::int64_t chunks = 0;
  int prev_i = -2, prev_j = -2;
  for (std::size_t i = 0; i < cand.size(); ++i) {
    if (match[i] < 0) continue;
    if (static_cast<int>(i) != prev_i + 1 || match[i] != prev_j + 1) ++chunks;
    prev_i = static_cast<int>(i);
    prev_j = match[i];
  }
  const double pen =
      gamma * std::pow(static_cast<double>(chunks) / static_cast<double>(m), beta);
  return (1.0 - pen) * f;
}

std::int64_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  const std::size_t n = a.size(), m = b.size();
  std::vector<std::int64_t> prev(m + 1, 0), cur(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

}  // namespace

double bleu(const std::vector<EvalPair>& pairs, int max_n) {
  require_nonempty(pairs, "bleu");
  if (max_n < 1) throw ConfigError("bleu: max_n must be >= 1");

  std::vector<std::int64_t> clipped(static_cast<std::size_t>(max_n), 0);
  std::vector<std::int64_t> total(static_cast<std::size_t>(max_n), 0);
  std::int64_t cand_len = 0, ref_len = 0;

  for (const auto& pair : pairs) {
    cand_len += static_cast<std::int64_t>(pair.candidate.size());
    // Closest reference length; ties go to the shorter.
    std::int64_t best = static_cast<std::int64_t>(pair.references.front().size());
    for (const auto& ref : pair.references) {
      const auto rl = static_cast<std::int64_t>(ref.size());
      const auto cl = static_cast<std::int64_t>(pair.candidate.size());
      if (std::llabs(rl - cl) < std::llabs(best - cl) ||
          (std::llabs(rl - cl) == std::llabs(best - cl) && rl < best)) {
        best = rl;
      }
    }
    ref_len += best;

    for (int n = 1; n <= max_n; ++n) {
      auto cc = ngram_counts(pair.candidate, n);
      Counts max_ref;
      for (const auto& ref : pair.references) {
        for (auto& [k, v] : ngram_counts(ref, n)) {
          auto& slot = max_ref[k];
          slot = std::max(slot, v);
        }
      }
      for (auto& [k, v] : cc) {
        total[static_cast<std::size_t>(n - 1)] += v;
        auto it = max_ref.find(k);
        if (it != max_ref.end())
          clipped[static_cast<std::size_t>(n - 1)] += std::min(v, it->second);
      }
    }
  }

  double log_prec = 0.0;
  for (int n = 0; n < max_n; ++n) {
    if (clipped[static_cast<std::size_t>(n)] == 0 || total[static_cast<std::size_t>(n)] == 0)
      return 0.0;  // log guard: any empty precision zeroes the score
    log_prec += std::log(static_cast<double>(clipped[static_cast<std::size_t>(n)]) /
                         static_cast<double>(total[static_cast<std::size_t>(n)]));
  }
  if (cand_len == 0) return 0.0;
  const double bp = cand_len > ref_len
                        ? 1.0
                        : std::exp(1.0 - static_cast<double>(ref_len) /
                                             static_cast<double>(cand_len));
  return bp * std::exp(log_prec / static_cast<double>(max_n));
}

double meteor(const std::vector<EvalPair>& pairs, double alpha, double gamma, double beta) {
  require_nonempty(pairs, "meteor");
  if (alpha <= 0.0 || alpha >= 1.0) throw ConfigError("meteor: alpha must be in (0, 1)");
  double total = 0.0;
  for (const auto& pair : pairs) {
    double best = 0.0;
    for (const auto& ref : pair.references)
      best = std::max(best, meteor_sentence(pair.candidate, ref, alpha, gamma, beta));
    total += best;
  }
  return total / static_cast<double>(pairs.size());
}

double rouge_l(const std::vector<EvalPair>& pairs, double beta) {
  require_nonempty(pairs, "rouge_l");
  if (beta <= 0.0) throw ConfigError("rouge_l: beta must be positive");
  double total = 0.0;
  for (const auto& pair : pairs) {
    double best = 0.0;
    for (const auto& ref : pair.references) {
      if (pair.candidate.empty() || ref.empty()) continue;
      const auto lcs = static_cast<double>(lcs_length(pair.candidate, ref));
      const double p = lcs / static_cast<double>(ref.size());
      const double r = lcs / static_cast<double>(pair.candidate.size());
      if (p + r == 0.0) continue;
      const double f = (beta * beta + 1.0) * r * p / (r + beta * beta * p);
      best = std::max(best, f);
    }
    total += best;
  }
  return total / static_cast<double>(pairs.size());
}

double cider(const std::vector<EvalPair>& pairs, int max_n) {
  require_nonempty(pairs, "cider");
  if (pairs.size() < 2) {
    throw DataError("cider: needs at least 2 examples for a meaningful idf");
  }
  const double num_docs = static_cast<double>(pairs.size());
  double total = 0.0;
  for (int n = 1; n <= max_n; ++n) {
    // Document frequency over reference sets.
    Counts df;
    for (const auto& pair : pairs) {
      std::unordered_set<std::string> seen;
      for (const auto& ref : pair.references) {
        for (auto& [k, v] : ngram_counts(ref, n)) {
          (void)v;
          seen.insert(k);
        }
      }
      for (const auto& k : seen) ++df[k];
    }
    auto idf = [&](const std::string& k) {
      auto it = df.find(k);
      const double d = it == df.end() ? 1.0 : std::max<double>(1.0, static_cast<double>(it->second));
      return std::log(num_docs / d);
    };
    // tf-idf vector: per-sentence normalized frequency times idf.
    auto tfidf = [&](const std::vector<std::string>& toks) {
      std::unordered_map<std::string, double> vec;
      auto counts = ngram_counts(toks, n);
      double total_count = 0.0;
      for (auto& [k, v] : counts) total_count += static_cast<double>(v);
      if (total_count > 0.0) {
        for (auto& [k, v] : counts)
          vec[k] = (static_cast<double>(v) / total_count) * idf(k);
      }
      return vec;
    };
    auto norm = [](const std::unordered_map<std::string, double>& v) {
      double s = 0.0;
      for (auto& [k, x] : v) s += x * x;
      return std::sqrt(s);
    };

    double level_total = 0.0;
    for (const auto& pair : pairs) {
      auto gc = tfidf(pair.candidate);
      const double nc = norm(gc);
      double pair_score = 0.0;
      for (const auto& ref : pair.references) {
        auto gr = tfidf(ref);
        const double nr = norm(gr);
        if (nc == 0.0 || nr == 0.0) continue;  // zero-norm term contributes 0
        double dot = 0.0;
        for (auto& [k, x] : gc) {
          auto it = gr.find(k);
          if (it != gr.end()) dot += x * it->second;
        }
        pair_score += dot / (nc * nr);
      }
      level_total += pair_score / static_cast<double>(pair.references.size());
    }
    total += level_total / static_cast<double>(pairs.size());
  }
  return total / static_cast<double>(max_n);
}

long long sample_size(double e, double confidence_z, long long population) {
  if (e <= 0.0 || e >= 1.0) throw ConfigError("sample_size: e must be in (0, 1)");
  if (population < 1) throw ConfigError("sample_size: population must be >= 1");
  const double n0 = confidence_z * confidence_z * 0.25 / (e * e);
  const double min_n = n0 / (1.0 + (n0 - 1.0) / static_cast<double>(population));
  return std::llround(min_n);
}

MetricReport evaluate_corpus(const std::vector<std::vector<std::string>>& outputs,
                             const std::vector<std::vector<std::string>>& references) {
  if (outputs.size() != references.size()) {
    throw DataError("evaluate_corpus: " + std::to_string(outputs.size()) + " outputs vs " +
                    std::to_string(references.size()) + " references");
  }
  if (outputs.empty()) throw DataError("evaluate_corpus: empty outputs");
  std::vector<EvalPair> pairs;
  pairs.reserve(outputs.size());
  for (std::size_t i = 0; i < outputs.size(); ++i)
    pairs.push_back(EvalPair{outputs[i], {references[i]}});
  MetricReport rep;
  rep.bleu = bleu(pairs);
  rep.meteor = meteor(pairs);
  rep.rouge_l = rouge_l(pairs);
  rep.cider = pairs.size() >= 2 ? cider(pairs) : 0.0;
  return rep;
}

}  // namespace deeppseudo
