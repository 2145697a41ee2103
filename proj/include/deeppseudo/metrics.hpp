#pragma once
// Corpus-level generation quality measures. All functions are pure.

#include <string>
#include <vector>

namespace deeppseudo {

struct EvalPair {
  std::vector<std::string> candidate;
  std::vector<std::vector<std::string>> references;  // at least one
};

struct MetricReport {
  double bleu = 0.0;     // [0, 1]
  double meteor = 0.0;   // [0, 1]
  double rouge_l = 0.0;  // [0, 1]
  double cider = 0.0;    // raw (no x10 convention)
};

// Corpus BLEU: clipped n-gram precision with uniform 1/N weights and the
// brevity penalty over corpus-aggregated lengths. Any zero precision gives 0.
double bleu(const std::vector<EvalPair>& pairs, int max_n = 4);

// Unigram-match METEOR with exact + suffix-stem matching (no external
// knowledge sources). pen = gamma * (chunks/m)^beta. Multi-reference: best
// reference score. Corpus score is the mean over pairs.
double meteor(const std::vector<EvalPair>& pairs, double alpha = 0.9, double gamma = 0.5,
              double beta = 3.0);

// LCS-based F measure; P_lcs divides by the reference length and R_lcs by the
// candidate length. Multi-reference: max. Corpus score is the mean over pairs.
double rouge_l(const std::vector<EvalPair>& pairs, double beta = 1.2);

// tf-idf n-gram cosine consensus, averaged over n in 1..max_n and over
// references. One document = one example's reference set;
// idf = log(D / max(df, 1)). Needs at least two examples.
double cider(const std::vector<EvalPair>& pairs, int max_n = 4);

// Finite-population sample size: n0 = Z^2 * 0.25 / e^2,
// MIN = n0 / (1 + (n0 - 1) / population), rounded to the nearest integer.
long long sample_size(double e, double confidence_z, long long population);

// All four metrics for aligned output/reference lists (single reference per
// candidate). Throws on empty or mismatched input.
MetricReport evaluate_corpus(const std::vector<std::vector<std::string>>& outputs,
                             const std::vector<std::vector<std::string>>& references);

}  // namespace deeppseudo
