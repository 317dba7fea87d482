#pragma once

// Direct-formula reference implementations shared by the unit and acceptance
// suites. Deliberately naive: explicit enumeration, no shared code paths.

#include <cmath>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace convsafe::oracle {

// Nominal alpha via the pairable-values formulation:
// D_o = sum_u (mismatching ordered pairs in u)/(m_u - 1) / n,
// D_e = mismatching ordered pairs over all pairable values / (n(n-1)).
inline double alpha(const std::vector<std::vector<std::optional<int>>>& m) {
  std::vector<int> all;
  double d_o = 0.0;
  for (const auto& row : m) {
    std::vector<int> v;
    for (const auto& x : row)
      if (x) v.push_back(*x);
    if (v.size() < 2) continue;
    int mismatched = 0;
    for (std::size_t a = 0; a < v.size(); ++a)
      for (std::size_t b = 0; b < v.size(); ++b) mismatched += a != b && v[a] != v[b];
    d_o += static_cast<double>(mismatched) / static_cast<double>(v.size() - 1);
    all.insert(all.end(), v.begin(), v.end());
  }
  const double n = static_cast<double>(all.size());
  double pairs = 0.0;
  for (std::size_t a = 0; a < all.size(); ++a)
    for (std::size_t b = 0; b < all.size(); ++b) pairs += a != b && all[a] != all[b];
  return 1.0 - (d_o / n) / (pairs / (n * (n - 1.0)));
}

// Mean over items with >= 2 codings of (agreeing unordered pairs / all unordered pairs).
inline double pairwise(const std::vector<std::vector<std::optional<int>>>& m) {
  double sum = 0.0;
  int items = 0;
  for (const auto& row : m) {
    int agree = 0, total = 0;
    for (std::size_t a = 0; a < row.size(); ++a)
      for (std::size_t b = a + 1; b < row.size(); ++b)
        if (row[a] && row[b]) {
          ++total;
          agree += *row[a] == *row[b];
        }
    if (total == 0) continue;
    sum += static_cast<double>(agree) / total;
    ++items;
  }
  return sum / items;
}

// kappa = (p_o - p_e) / (1 - p_e) from an explicit confusion table.
inline double kappa(const std::vector<int>& a, const std::vector<int>& b) {
  std::map<int, std::map<int, double>> table;
  std::map<int, double> row, col;
  for (std::size_t i = 0; i < a.size(); ++i) {
    table[a[i]][b[i]] += 1;
    row[a[i]] += 1;
    col[b[i]] += 1;
  }
  const double n = static_cast<double>(a.size());
  double p_o = 0, p_e = 0;
  for (auto& [c, r] : row) {
    p_o += table[c][c] / n;
    p_e += (r / n) * (col.count(c) ? col[c] / n : 0.0);
  }
  return (p_o - p_e) / (1.0 - p_e);
}

struct Prf {
  double p, r, f;
};

inline Prf f1(const std::vector<int>& pred, const std::vector<int>& gold, int pos) {
  int tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] == pos && gold[i] == pos) ++tp;
    if (pred[i] == pos && gold[i] != pos) ++fp;
    if (pred[i] != pos && gold[i] == pos) ++fn;
  }
  Prf out{0, 0, 0};
  if (tp + fp) out.p = static_cast<double>(tp) / (tp + fp);
  if (tp + fn) out.r = static_cast<double>(tp) / (tp + fn);
  if (tp) out.f = 2.0 * tp / (2.0 * tp + fp + fn);
  return out;
}

// Unique / total n-grams by quadratic comparison of joined n-gram strings.
inline std::optional<double> distinct(const std::vector<std::string>& responses, std::size_t n) {
  std::vector<std::string> grams;
  for (const auto& r : responses) {
    std::istringstream in(r);
    std::vector<std::string> w;
    for (std::string t; in >> t;) w.push_back(t);
    for (std::size_t i = 0; i + n <= w.size(); ++i) {
      std::string g;
      for (std::size_t k = 0; k < n; ++k) g += w[i + k] + '\x1f';
      grams.push_back(g);
    }
  }
  if (grams.empty()) return std::nullopt;
  std::size_t unique = 0;
  for (std::size_t i = 0; i < grams.size(); ++i) {
    bool seen = false;
    for (std::size_t j = 0; j < i && !seen; ++j) seen = grams[j] == grams[i];
    unique += !seen;
  }
  return static_cast<double>(unique) / static_cast<double>(grams.size());
}

}  // namespace convsafe::oracle
