// Copyright 2026 The stackattn Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cmath>
#include <algorithm>
#include <cstddef>
#include <functional>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "stackattn/errors.hpp"

namespace stackattn {

/// Grammar symbol: a terminal index or a nonterminal index.
struct GrammarSymbol {
  bool terminal = false;
  int id = 0;
};

struct Rule {
  int lhs = 0;
  std::vector<GrammarSymbol> rhs;  // empty for an epsilon rule
  double prob = 0;
};

/// Probabilistic context-free grammar over single-character terminals.
/// Rules may be nullable and may contain unit chains, but the grammar must
/// not derive a nonterminal from itself over an empty span with mass 1.
class Pcfg {
 public:
  Pcfg() = default;

  /// Builds a grammar from textual rules "A -> X Y z" where right-hand
  /// tokens naming a nonterminal are nonterminals and any other token is a
  /// single-character terminal. An empty right-hand side is epsilon.
  struct TextRule {
    std::string lhs;
    std::string rhs;
    double prob;
  };

  Pcfg(std::vector<std::string> nonterminals, std::string terminals, std::string start,
       const std::vector<TextRule>& rules)
      : nonterminals_(std::move(nonterminals)), terminals_(std::move(terminals)) {
    start_ = nonterminal_index(start);
    for (const auto& tr : rules) {
      Rule r;
      r.lhs = nonterminal_index(tr.lhs);
      r.prob = tr.prob;
      std::istringstream in(tr.rhs);
      std::string tok;
      while (in >> tok) {
        const int nt = find_nonterminal(tok);
        if (nt >= 0) {
          r.rhs.push_back({false, nt});
        } else if (tok.size() == 1 && terminal_index(tok[0]) >= 0) {
          r.rhs.push_back({true, terminal_index(tok[0])});
        } else {
          throw ParameterError("grammar rule uses unknown symbol '" + tok + "'");
        }
      }
      rules_.push_back(std::move(r));
    }
    validate();
  }

  const std::vector<std::string>& nonterminals() const { return nonterminals_; }
  const std::string& terminals() const { return terminals_; }
  int start() const { return start_; }
  const std::vector<Rule>& rules() const { return rules_; }
  std::size_t num_nonterminals() const { return nonterminals_.size(); }
  std::size_t num_terminals() const { return terminals_.size(); }

  int terminal_index(char c) const {
    const auto pos = terminals_.find(c);
    return pos == std::string::npos ? -1 : static_cast<int>(pos);
  }

  /// Per-nonterminal rule probabilities sum to 1 within 1e-9.
  void validate() const {
    if (nonterminals_.empty()) throw ParameterError("grammar has no nonterminals");
    std::vector<double> total(nonterminals_.size(), 0.0);
    for (const auto& r : rules_) {
      if (!(r.prob > 0 && r.prob <= 1)) throw ParameterError("rule probability outside (0, 1]");
      total[r.lhs] += r.prob;
    }
    for (std::size_t a = 0; a < total.size(); ++a) {
      if (std::abs(total[a] - 1.0) > 1e-9) {
        throw ParameterError("rules of '" + nonterminals_[a] + "' sum to " +
                             std::to_string(total[a]));
      }
    }
  }

  /// Terminal indices of a string; InputError on a foreign character.
  std::vector<int> encode(const std::string& s) const {
    std::vector<int> out;
    out.reserve(s.size());
    for (char c : s) {
      const int t = terminal_index(c);
      if (t < 0) throw InputError(std::string("symbol '") + c + "' not in the alphabet");
      out.push_back(t);
    }
    return out;
  }

  std::string decode(const std::vector<int>& x) const {
    std::string out;
    out.reserve(x.size());
    for (int t : x) out.push_back(terminals_.at(static_cast<std::size_t>(t)));
    return out;
  }

 private:
  int find_nonterminal(const std::string& name) const {
    for (std::size_t i = 0; i < nonterminals_.size(); ++i)
      if (nonterminals_[i] == name) return static_cast<int>(i);
    return -1;
  }
  int nonterminal_index(const std::string& name) const {
    const int i = find_nonterminal(name);
    if (i < 0) throw ParameterError("unknown nonterminal '" + name + "'");
    return i;
  }

  std::vector<std::string> nonterminals_;
  std::string terminals_;
  int start_ = 0;
  std::vector<Rule> rules_;
};

/// Wildcard entry in an inside pattern: matches every terminal with weight 1.
inline constexpr int kAnySymbol = -1;

namespace detail {

// Repeats a same-span update until it stops changing. Nullable symbols and
// unit rules make values of a span depend on other values of that span.
template <typename Update>
void span_fixpoint(Update&& update) {
  for (int iter = 0; iter < 256; ++iter) {
    if (!update()) return;
  }
  throw ContractError("grammar has a same-span cycle that does not converge");
}

}  // namespace detail

namespace detail {

// Nonterminal order for filling one span: B comes before A when a rule
// of A can derive B over the same span. Empty when that relation is cyclic.
inline std::vector<int> same_span_order(const Pcfg& g) {
  const std::size_t N = g.num_nonterminals();
  std::vector<bool> nullable(N, false);
  for (bool grew = true; grew;) {
    grew = false;
    for (const auto& r : g.rules()) {
      if (nullable[r.lhs]) continue;
      bool all = true;
      for (const auto& s : r.rhs) all = all && !s.terminal && nullable[s.id];
      if (all) nullable[r.lhs] = grew = true;
    }
  }
  std::vector<std::vector<bool>> dep(N, std::vector<bool>(N, false));
  // Rule prefixes are kept per span, so a symbol counts as soon as every
  // symbol before it is nullable.
  for (const auto& r : g.rules()) {
    for (std::size_t k = 0; k < r.rhs.size(); ++k) {
      if (r.rhs[k].terminal) break;
      dep[r.lhs][r.rhs[k].id] = true;
      if (!nullable[r.rhs[k].id]) break;
    }
  }
  std::vector<int> order, state(N, 0);
  bool cyclic = false;
  std::function<void(int)> visit = [&](int a) {
    if (state[a] == 2) return;
    if (state[a] == 1) {
      cyclic = true;
      return;
    }
    state[a] = 1;
    for (std::size_t b = 0; b < N; ++b)
      if (dep[a][b]) visit(static_cast<int>(b));
    state[a] = 2;
    order.push_back(a);
  };
  for (std::size_t a = 0; a < N; ++a) visit(static_cast<int>(a));
  if (cyclic) order.clear();
  return order;
}

}  // namespace detail

/// Inside probabilities of a pattern (terminal indices or kAnySymbol).
/// Returns the total probability of the start symbol over the whole
/// pattern, in linear space.
inline double inside_probability(const Pcfg& g, const std::vector<int>& pattern) {
  const std::size_t n = pattern.size(), N = g.num_nonterminals(), n1 = n + 1;
  const auto& rules = g.rules();
  // in[(a * n1 + i) * n1 + j]; pref[r][d] over (i, j) is the weight of the
  // first d right-hand symbols of rule r deriving pattern[i, j).
  std::vector<double> in(N * n1 * n1, 0.0);
  std::vector<std::vector<std::vector<double>>> pref(rules.size());
  // Nonzero end positions of pref[r][d][i][.] lie in [lo, hi].
  std::vector<std::vector<std::vector<std::size_t>>> lo(rules.size()), hi(rules.size());
  std::vector<std::vector<std::size_t>> by_lhs(N);
  for (std::size_t r = 0; r < rules.size(); ++r) {
    const std::size_t k = rules[r].rhs.size();
    pref[r].assign(k + 1, std::vector<double>(n1 * n1, 0.0));
    lo[r].assign(k + 1, std::vector<std::size_t>(n1, n1));
    hi[r].assign(k + 1, std::vector<std::size_t>(n1, 0));
    for (std::size_t i = 0; i <= n; ++i) {
      pref[r][0][i * n1 + i] = 1.0;
      lo[r][0][i] = hi[r][0][i] = i;
    }
    by_lhs[rules[r].lhs].push_back(r);
  }
  const std::vector<int> order = detail::same_span_order(g);

  auto fill_rule = [&](std::size_t r, std::size_t i, std::size_t j) {
    const auto& rhs = rules[r].rhs;
    for (std::size_t d = 1; d <= rhs.size(); ++d) {
      const auto& prev = pref[r][d - 1];
      const GrammarSymbol& sym = rhs[d - 1];
      double s = 0.0;
      if (sym.terminal) {
        if (j > i) {
          const int p = pattern[j - 1];
          if (p == kAnySymbol || p == sym.id) s = prev[i * n1 + j - 1];
        }
      } else {
        const std::size_t m_hi = std::min(hi[r][d - 1][i], j);
        const double* col = &in[(static_cast<std::size_t>(sym.id) * n1) * n1 + j];
        for (std::size_t m = lo[r][d - 1][i]; m <= m_hi; ++m) {
          const double a = prev[i * n1 + m];
          if (a != 0.0) s += a * col[m * n1];
        }
      }
      pref[r][d][i * n1 + j] = s;
      if (s != 0.0) {
        lo[r][d][i] = std::min(lo[r][d][i], j);
        hi[r][d][i] = std::max(hi[r][d][i], j);
      }
    }
  };
  auto fill_nonterminal = [&](std::size_t a, std::size_t i, std::size_t j) {
    double s = 0.0;
    for (std::size_t r : by_lhs[a]) {
      fill_rule(r, i, j);
      s += rules[r].prob * pref[r].back()[i * n1 + j];
    }
    double& cell = in[(a * n1 + i) * n1 + j];
    const bool changed = s != cell;
    cell = s;
    return changed;
  };

  for (std::size_t len = 0; len <= n; ++len) {
    for (std::size_t i = 0; i + len <= n; ++i) {
      const std::size_t j = i + len;
      if (!order.empty()) {
        for (int a : order) fill_nonterminal(static_cast<std::size_t>(a), i, j);
      } else {
        detail::span_fixpoint([&] {
          bool changed = false;
          for (std::size_t a = 0; a < N; ++a) changed = fill_nonterminal(a, i, j) || changed;
          return changed;
        });
      }
    }
  }
  return in[(static_cast<std::size_t>(g.start()) * n1 + 0) * n1 + n];
}

/// log p(x) summed over all derivations; -inf outside the language.
inline double inside_logprob(const Pcfg& g, const std::vector<int>& x) {
  return std::log(inside_probability(g, x));
}

inline double inside_logprob(const Pcfg& g, const std::string& x) {
  return inside_logprob(g, g.encode(x));
}

/// Length-indexed inside weights: mass[A][L] is the total probability of
/// the strings of length L derived from A. Also holds the rule-prefix
/// weights used to sample top-down conditioned on length.
class LengthTables {
 public:
  LengthTables(const Pcfg& g, std::size_t max_length) : g_(g), max_(max_length) {
    const std::size_t N = g.num_nonterminals(), L1 = max_length + 1;
    const auto& rules = g.rules();
    mass_.assign(N * L1, 0.0);
    pref_.resize(rules.size());
    for (std::size_t r = 0; r < rules.size(); ++r) {
      pref_[r].assign(rules[r].rhs.size() + 1, std::vector<double>(L1, 0.0));
      pref_[r][0][0] = 1.0;
    }
    for (std::size_t len = 0; len <= max_length; ++len) {
      detail::span_fixpoint([&] {
        bool changed = false;
        for (std::size_t r = 0; r < rules.size(); ++r) {
          const auto& rhs = rules[r].rhs;
          for (std::size_t d = 1; d <= rhs.size(); ++d) {
            double s = 0.0;
            for (std::size_t l = 0; l <= len; ++l) s += pref_[r][d - 1][len - l] * symbol_mass(rhs[d - 1], l);
            pref_[r][d][len] = s;
          }
        }
        for (std::size_t a = 0; a < N; ++a) {
          double s = 0.0;
          for (std::size_t r = 0; r < rules.size(); ++r)
            if (rules[r].lhs == static_cast<int>(a)) s += rules[r].prob * pref_[r].back()[len];
          double& cell = mass_[a * L1 + len];
          if (s != cell) {
            changed = true;
            cell = s;
          }
        }
        return changed;
      });
    }
  }

  const Pcfg& grammar() const { return g_; }
  std::size_t max_length() const { return max_; }

  /// Probability that the start symbol derives a string of length n.
  double length_mass(std::size_t n) const {
    require(n);
    return mass_[static_cast<std::size_t>(g_.start()) * (max_ + 1) + n];
  }

  /// Exact sample from the grammar's distribution restricted to length n.
  template <typename Rng>
  std::vector<int> sample(std::size_t n, Rng& rng) const {
    require(n);
    if (!(length_mass(n) > 0)) {
      throw ParameterError("grammar has no strings of length " + std::to_string(n));
    }
    std::vector<int> out;
    out.reserve(n);
    expand({false, g_.start()}, n, rng, out);
    return out;
  }

 private:
  void require(std::size_t n) const {
    if (n > max_) {
      throw ParameterError("length " + std::to_string(n) + " beyond table limit " +
                           std::to_string(max_));
    }
  }

  double symbol_mass(const GrammarSymbol& s, std::size_t l) const {
    if (s.terminal) return l == 1 ? 1.0 : 0.0;
    return mass_[static_cast<std::size_t>(s.id) * (max_ + 1) + l];
  }

  template <typename Rng>
  static std::size_t pick(const std::vector<double>& w, Rng& rng) {
    double total = 0.0;
    for (double x : w) total += x;
    double u = std::uniform_real_distribution<double>(0.0, total)(rng);
    for (std::size_t k = 0; k < w.size(); ++k) {
      if (w[k] <= 0) continue;
      if (u < w[k]) return k;
      u -= w[k];
    }
    for (std::size_t k = w.size(); k-- > 0;)
      if (w[k] > 0) return k;
    throw ContractError("sampling from an all-zero distribution");
  }

  template <typename Rng>
  void expand(const GrammarSymbol& s, std::size_t len, Rng& rng, std::vector<int>& out) const {
    if (s.terminal) {
      out.push_back(s.id);
      return;
    }
    const auto& rules = g_.rules();
    std::vector<std::size_t> cand;
    std::vector<double> w;
    for (std::size_t r = 0; r < rules.size(); ++r) {
      if (rules[r].lhs != s.id) continue;
      cand.push_back(r);
      w.push_back(rules[r].prob * pref_[r].back()[len]);
    }
    const std::size_t r = cand[pick(w, rng)];
    const auto& rhs = rules[r].rhs;
    // Split the length right to left, then expand left to right.
    std::vector<std::size_t> lens(rhs.size());
    std::size_t rem = len;
    for (std::size_t d = rhs.size(); d >= 1; --d) {
      std::vector<double> lw(rem + 1);
      for (std::size_t l = 0; l <= rem; ++l) lw[l] = pref_[r][d - 1][rem - l] * symbol_mass(rhs[d - 1], l);
      lens[d - 1] = pick(lw, rng);
      rem -= lens[d - 1];
    }
    for (std::size_t d = 0; d < rhs.size(); ++d) expand(rhs[d], lens[d], rng, out);
  }

  Pcfg g_;
  std::size_t max_;
  std::vector<double> mass_;
  std::vector<std::vector<std::vector<double>>> pref_;
};

/// Total probability of the strings of length exactly n.
inline double length_mass(const Pcfg& g, std::size_t n) { return LengthTables(g, n).length_mass(n); }

template <typename Rng>
std::vector<int> sample_conditioned(const Pcfg& g, std::size_t n, Rng& rng) {
  return LengthTables(g, n).sample(n, rng);
}

}  // namespace stackattn
