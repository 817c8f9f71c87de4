#pragma once

// Exact mutual information for finite joint distributions, in nats. These are
// reference oracles for the chain-rule identities the critic penalty relies on.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "rime/numcore/errors.hpp"

namespace rime {

/// Probability table over alphabets A x B (x C). Row-major with C fastest.
/// A two-variable joint has c == 1.
struct DiscreteJoint {
  std::size_t a = 0;
  std::size_t b = 0;
  std::size_t c = 1;
  std::vector<double> p;

  double at(std::size_t i, std::size_t j, std::size_t k = 0) const { return p[(i * b + j) * c + k]; }

  void validate() const {
    if (a == 0 || b == 0 || c == 0) throw DomainError("DiscreteJoint: empty alphabet");
    if (p.size() != a * b * c) throw DomainError("DiscreteJoint: table size does not match alphabets");
    double total = 0.0;
    for (double v : p) {
      if (!(v >= 0.0) || !std::isfinite(v)) throw DomainError("DiscreteJoint: negative or non-finite entry");
      total += v;
    }
    if (std::abs(total - 1.0) > 1e-12) throw DomainError("DiscreteJoint: entries sum to " + std::to_string(total));
  }
};

namespace detail_mi {

inline double plogp_ratio(double pxy, double px, double py) {
  return pxy > 0.0 ? pxy * std::log(pxy / (px * py)) : 0.0;
}

}  // namespace detail_mi

/// I[A; B] for a two-variable table (c must be 1).
inline double exact_discrete_mi(const DiscreteJoint& j) {
  j.validate();
  if (j.c != 1) throw DomainError("exact_discrete_mi: expected a two-variable table");
  std::vector<double> pa(j.a, 0.0), pb(j.b, 0.0);
  for (std::size_t i = 0; i < j.a; ++i)
    for (std::size_t k = 0; k < j.b; ++k) {
      pa[i] += j.at(i, k);
      pb[k] += j.at(i, k);
    }
  double mi = 0.0;
  for (std::size_t i = 0; i < j.a; ++i)
    for (std::size_t k = 0; k < j.b; ++k) mi += detail_mi::plogp_ratio(j.at(i, k), pa[i], pb[k]);
  return mi;
}

/// I[A; C | B] = sum p(a,b,c) log( p(a,b,c) p(b) / (p(a,b) p(b,c)) ).
inline double exact_conditional_mi(const DiscreteJoint& j) {
  j.validate();
  std::vector<double> pb(j.b, 0.0), pab(j.a * j.b, 0.0), pbc(j.b * j.c, 0.0);
  for (std::size_t i = 0; i < j.a; ++i)
    for (std::size_t k = 0; k < j.b; ++k)
      for (std::size_t l = 0; l < j.c; ++l) {
        const double v = j.at(i, k, l);
        pb[k] += v;
        pab[i * j.b + k] += v;
        pbc[k * j.c + l] += v;
      }
  double mi = 0.0;
  for (std::size_t i = 0; i < j.a; ++i)
    for (std::size_t k = 0; k < j.b; ++k)
      for (std::size_t l = 0; l < j.c; ++l) {
        const double v = j.at(i, k, l);
        if (v > 0.0) mi += v * std::log(v * pb[k] / (pab[i * j.b + k] * pbc[k * j.c + l]));
      }
  return mi;
}

/// Collapses (A, B) into one variable and returns I[(A,B); C].
inline double exact_joint_mi(const DiscreteJoint& j) {
  j.validate();
  DiscreteJoint flat{j.a * j.b, j.c, 1, j.p};
  return exact_discrete_mi(flat);
}

/// Marginalises A out and returns I[B; C].
inline double exact_mi_bc(const DiscreteJoint& j) {
  j.validate();
  DiscreteJoint bc{j.b, j.c, 1, std::vector<double>(j.b * j.c, 0.0)};
  for (std::size_t i = 0; i < j.a; ++i)
    for (std::size_t k = 0; k < j.b; ++k)
      for (std::size_t l = 0; l < j.c; ++l) bc.p[k * j.c + l] += j.at(i, k, l);
  return exact_discrete_mi(bc);
}

/// Reorders the axes so that old axis order[n] becomes new axis n.
inline DiscreteJoint permute_axes(const DiscreteJoint& j, std::array<int, 3> order) {
  const std::array<std::size_t, 3> dims{j.a, j.b, j.c};
  DiscreteJoint out{dims[static_cast<std::size_t>(order[0])], dims[static_cast<std::size_t>(order[1])],
                    dims[static_cast<std::size_t>(order[2])], std::vector<double>(j.p.size())};
  for (std::size_t i = 0; i < j.a; ++i)
    for (std::size_t k = 0; k < j.b; ++k)
      for (std::size_t l = 0; l < j.c; ++l) {
        const std::array<std::size_t, 3> idx{i, k, l};
        const std::size_t ni = idx[static_cast<std::size_t>(order[0])];
        const std::size_t nk = idx[static_cast<std::size_t>(order[1])];
        const std::size_t nl = idx[static_cast<std::size_t>(order[2])];
        out.p[(ni * out.b + nk) * out.c + nl] = j.at(i, k, l);
      }
  return out;
}

}  // namespace rime
